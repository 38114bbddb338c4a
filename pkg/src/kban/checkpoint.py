"""Binary checkpoint format.

Layout, all little-endian:

    magic      4 bytes  b"KBAN"
    version    u32
    hyper      10 x i64: l_enc, l_dec, d, heads, num_verbs, num_classes,
                         d_app, ka flag, map_res, sc_hidden
    iteration  u64
    seed       u64
    count      u32
    per tensor, sorted by name:
        u16 name length, utf-8 name bytes
        u8 rank, rank x u64 extents
        float64 payload (row-major)
    crc32      u32 over every preceding byte

Round-trips are bit-exact; loading verifies magic, version and checksum, so
truncated or corrupted files are rejected with a checksum error.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import KBan, ModelConfig
from .scene import KnowledgeBase

MAGIC = b"KBAN"
VERSION = 1

_HYPER_FIELDS = ("l_enc", "l_dec", "d", "heads", "num_verbs", "num_classes", "d_app", "ka", "map_res", "sc_hidden")


@dataclass
class Checkpoint:
    config: ModelConfig
    iteration: int
    seed: int
    tensors: dict[str, np.ndarray]


def _hyper_values(cfg: ModelConfig) -> tuple[int, ...]:
    return (
        cfg.l_enc, cfg.l_dec, cfg.d, cfg.heads, cfg.num_verbs, cfg.num_classes,
        cfg.d_app, int(cfg.ka), cfg.map_res, cfg.sc_hidden,
    )


def save_checkpoint(path, cfg: ModelConfig, params: dict, iteration: int, seed: int) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<10q", *_hyper_values(cfg))]
    chunks.append(struct.pack("<QQ", iteration, seed))
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        value = params[name]
        data = np.ascontiguousarray(getattr(value, "data", value), dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
        chunks.append(data.astype("<f8").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError("checkpoint truncated: checksum region missing")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8:
        raise DataError(f"checkpoint {path} truncated: checksum error")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored_crc:
        raise DataError(f"checkpoint {path} corrupt: checksum error")
    reader = _Reader(body)
    if reader.take(4) != MAGIC:
        raise DataError(f"checkpoint {path} has wrong magic")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise DataError(f"checkpoint {path} has unsupported format version {version}")
    hyper = dict(zip(_HYPER_FIELDS, reader.unpack("<10q")))
    hyper["ka"] = bool(hyper["ka"])
    iteration, seed = reader.unpack("<QQ")
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        payload = reader.take(size * 8)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return Checkpoint(config=ModelConfig(**hyper), iteration=iteration, seed=seed, tensors=tensors)


def save_model(path, model: KBan, iteration: int) -> None:
    save_checkpoint(path, model.cfg, model.params, iteration, model.seed)


def model_from_checkpoint(path, kb: KnowledgeBase) -> tuple[KBan, int]:
    """Rebuild the model and restore every parameter bit-exactly."""
    ckpt = load_checkpoint(path)
    model = KBan(ckpt.config, kb, seed=ckpt.seed)
    if set(model.params) != set(ckpt.tensors):
        missing = set(model.params) ^ set(ckpt.tensors)
        raise DataError(f"checkpoint parameter names do not match the model: {sorted(missing)[:4]}")
    for name, param in model.params.items():
        stored = ckpt.tensors[name]
        if stored.shape != param.data.shape:
            raise DataError(f"checkpoint tensor {name} has shape {stored.shape}, expected {param.data.shape}")
        param.data = stored.copy()
    return model, ckpt.iteration


def describe_checkpoint(path) -> str:
    ckpt = load_checkpoint(path)
    lines = [
        f"format version {VERSION}, iteration {ckpt.iteration}, seed {ckpt.seed}",
        "hyperparameters: "
        + ", ".join(f"{k}={getattr(ckpt.config, k)}" for k in _HYPER_FIELDS),
    ]
    total = 0
    for name in sorted(ckpt.tensors):
        shape = ckpt.tensors[name].shape
        total += int(np.prod(shape)) if shape else 1
        lines.append(f"  {name}  {'x'.join(map(str, shape)) if shape else 'scalar'}")
    lines.append(f"{len(ckpt.tensors)} tensors, {total} parameters")
    return "\n".join(lines)
