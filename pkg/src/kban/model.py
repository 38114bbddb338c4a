"""Full scoring model and the end-to-end detection pipeline.

Two score streams are fused per (pair, verb): s_r from the top-down decoder
and s_c from a complementary head over raw appearance + spatial features.
The fused score is s_h * s_o * (s_r + s_c) / 2. Non-interactive pairs are
filtered before decoding using the last encoder layer's interactiveness
matrix; suppression never changes surviving scores, only membership.

Ablation wiring: l_enc=0 removes the encoder (the decoder attends over the
raw projected instance features), l_dec=0 removes the decoder (s_r is absent
and treated as 0 at fusion), ka=False zeroes the verb embeddings in the
query builder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import Decoder, MapFeatureNet, MAP_FEATURE_DIM, QueryBuilder, VerbClassifierBank
from .encoder import Encoder, EncoderOutput, InputEmbed
from .errors import DataError
from .scene import (
    BoundingBox,
    KnowledgeBase,
    PairProposal,
    Scene,
    pair_proposals,
    position_code,
    verbs_for_object,
)
from .tensor import ParamStore, Tensor


@dataclass
class ModelConfig:
    num_verbs: int
    num_classes: int
    d: int = 64
    heads: int = 4
    l_enc: int = 2
    l_dec: int = 2
    d_app: int = 16
    ka: bool = True
    map_res: int = 64
    sc_hidden: int = 32

    def __post_init__(self):
        if self.num_verbs < 1 or self.num_classes < 2:
            raise ValueError(f"need >= 1 verbs and >= 2 classes, got {self.num_verbs}/{self.num_classes}")
        if self.d % self.heads != 0:
            raise ValueError(f"model dimension {self.d} not divisible by {self.heads} heads")
        if self.l_enc < 0 or self.l_dec < 0:
            raise ValueError("layer counts must be >= 0")


@dataclass
class InferenceConfig:
    t_human: float = 0.4
    t_object: float = 0.1
    suppression_threshold: float = 0.1


class ComplementaryHead:
    """s_c stream: [human appearance | object appearance | spatial conv
    features] through an affine/relu stack to one sigmoid score per verb.
    The spatial extractor shares the query builder's architecture but owns
    separate weights."""

    def __init__(self, store: ParamStore, d_app: int, num_verbs: int, map_res: int, hidden: int):
        self.spatial_net = MapFeatureNet(store, "comp.spatial", 2, map_res)
        in_dim = 2 * d_app + MAP_FEATURE_DIM
        self.w1 = store.uniform("comp.fc1.w", (in_dim, hidden), fan_in=in_dim)
        self.b1 = store.uniform("comp.fc1.b", (hidden,), fan_in=in_dim)
        self.w2 = store.uniform("comp.fc2.w", (hidden, num_verbs), fan_in=hidden)
        self.b2 = store.uniform("comp.fc2.b", (num_verbs,), fan_in=hidden)

    def forward(self, pair: PairProposal) -> Tensor:
        spatial = self.spatial_net.forward(pair.spatial.grid)
        feats = T.concat_last_axis(
            [
                T.constant(pair.human.appearance[None, :]),
                T.constant(pair.object.appearance[None, :]),
                spatial,
            ]
        )
        hidden = T.relu(T.affine(feats, self.w1, self.b1))
        return T.sigmoid(T.affine(hidden, self.w2, self.b2))


@dataclass
class SceneEncoding:
    """Per-scene encoder pass, computed once and reused for every pair."""

    output: EncoderOutput
    merged: Tensor  # (M + N) x d, humans then objects in scene order
    instance_ids: list[int]
    hum_index: dict[int, int]
    obj_index: dict[int, int]


@dataclass
class PairPrediction:
    human_id: int
    object_id: int
    verbs: tuple[int, ...]
    s_r: dict[int, float]  # empty when the decoder is absent
    s_c: np.ndarray  # length num_verbs
    fused: dict[int, float] = field(default_factory=dict)


class KBan:
    """Encoder-decoder relation parser with complementary score stream."""

    def __init__(self, cfg: ModelConfig, kb: KnowledgeBase, seed: int):
        if kb.num_verbs != cfg.num_verbs or kb.num_object_classes != cfg.num_classes:
            raise DataError(
                f"knowledge base ({kb.num_verbs} verbs, {kb.num_object_classes} classes) does not match "
                f"model ({cfg.num_verbs} verbs, {cfg.num_classes} classes)"
            )
        self.cfg = cfg
        self.kb = kb
        self.seed = seed
        store = ParamStore(seed)
        self.embed = InputEmbed(store, cfg.d_app, cfg.d)
        self.encoder = Encoder(store, cfg.d, cfg.heads, cfg.l_enc) if cfg.l_enc > 0 else None
        if cfg.l_dec > 0:
            self.query_builder = QueryBuilder(store, cfg.d, cfg.map_res)
            self.decoder = Decoder(store, cfg.d, cfg.heads, cfg.l_dec)
            self.classifiers = VerbClassifierBank(store, cfg.d, cfg.num_verbs)
        else:
            self.query_builder = None
            self.decoder = None
            self.classifiers = None
        self.comp = ComplementaryHead(store, cfg.d_app, cfg.num_verbs, cfg.map_res, cfg.sc_hidden)
        self.store = store

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def _embed_group(self, instances, scene: Scene) -> Tensor:
        if not instances:
            return Tensor(np.zeros((0, self.cfg.d)))
        for inst in instances:
            if inst.appearance.shape != (self.cfg.d_app,):
                raise DataError(
                    f"instance {inst.id} appearance shape {inst.appearance.shape} does not match "
                    f"model d_app={self.cfg.d_app}"
                )
        app = np.stack([inst.appearance for inst in instances])
        codes = np.stack([position_code(inst.box, scene.image_width, scene.image_height) for inst in instances])
        return self.embed.forward(app, codes)

    def encode_scene(self, scene: Scene) -> SceneEncoding:
        """Bottom-up pass over all detected instances, independent of pairing."""
        h_in = self._embed_group(scene.humans, scene)
        o_in = self._embed_group(scene.objects, scene)
        if self.encoder is not None:
            out = self.encoder.forward(h_in, o_in)
        else:
            out = EncoderOutput(humans=h_in, objects=o_in, m_att_layers=[], traces=[])
        merged = T.concat_rows([out.humans, out.objects])
        ids = [inst.id for inst in scene.humans] + [inst.id for inst in scene.objects]
        return SceneEncoding(
            output=out,
            merged=merged,
            instance_ids=ids,
            hum_index={inst.id: i for i, inst in enumerate(scene.humans)},
            obj_index={inst.id: i for i, inst in enumerate(scene.objects)},
        )

    def pair_forward(
        self, encoding: SceneEncoding, pair: PairProposal, collect_attention: bool = False
    ):
        """Score one pair: returns (verbs, s_r tensor or None, s_c row tensor,
        attention weights per decoder layer and head)."""
        verbs = verbs_for_object(self.kb, pair.object.class_id)
        s_r = None
        attention: list[list[np.ndarray]] = []
        if self.decoder is not None:
            base = self.query_builder.base_query(pair, self.kb)
            queries = self.query_builder.augment(base, verbs, self.kb, ka=self.cfg.ka)
            clues, attention = self.decoder.forward(queries, encoding.merged)
            s_r = self.classifiers.scores(clues, verbs)
        s_c = self.comp.forward(pair)
        if not collect_attention:
            attention = []
        return verbs, s_r, s_c, attention


# ---------------------------------------------------------------------------
# fusion, suppression, detection


def fuse(s_h: float, s_o: float, s_r: float, s_c: float) -> float:
    """Fused interaction score s_h * s_o * (s_r + s_c) / 2."""
    for name, v in (("s_h", s_h), ("s_o", s_o), ("s_r", s_r), ("s_c", s_c)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    return s_h * s_o * (s_r + s_c) / 2.0


def suppress(
    pairs: Sequence[PairProposal],
    m_att_last: np.ndarray,
    hum_index: dict[int, int],
    obj_index: dict[int, int],
    threshold: float,
) -> list[PairProposal]:
    """Keep pair (h, o) iff its last-layer interactiveness score >= threshold."""
    retained = []
    for pair in pairs:
        try:
            score = m_att_last[obj_index[pair.object_id], hum_index[pair.human_id]]
        except (KeyError, IndexError) as exc:
            raise ValueError(
                f"pair ({pair.human_id}, {pair.object_id}) not covered by the interactiveness matrix"
            ) from exc
        if score >= threshold:
            retained.append(pair)
    return retained


@dataclass
class ScoredTriplet:
    human_box: BoundingBox
    human_score: float
    human_id: int
    object_box: BoundingBox
    object_class: int
    object_score: float
    object_id: int
    verb: int
    score: float

    def to_dict(self) -> dict:
        return {
            "human_box": self.human_box.as_list(),
            "human_score": self.human_score,
            "human_id": self.human_id,
            "object_box": self.object_box.as_list(),
            "object_class": self.object_class,
            "object_score": self.object_score,
            "object_id": self.object_id,
            "verb": self.verb,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoredTriplet":
        return cls(
            human_box=BoundingBox(*doc["human_box"]),
            human_score=float(doc["human_score"]),
            human_id=int(doc["human_id"]),
            object_box=BoundingBox(*doc["object_box"]),
            object_class=int(doc["object_class"]),
            object_score=float(doc["object_score"]),
            object_id=int(doc["object_id"]),
            verb=int(doc["verb"]),
            score=float(doc["score"]),
        )


def detect(model: KBan, scene: Scene, cfg: InferenceConfig) -> list[ScoredTriplet]:
    """Full pipeline: pair proposals, one encoder pass, suppression, per-pair
    decoding and fusion. One triplet per (retained pair, verb in the object's
    co-occurrence set), sorted by descending score with (human id, object id,
    verb id) tie-breaks."""
    pairs = pair_proposals(scene, cfg.t_human, cfg.t_object, model.cfg.map_res)
    if not pairs:
        return []
    encoding = model.encode_scene(scene)
    if model.encoder is not None and encoding.output.m_att_layers:
        m_att_last = encoding.output.m_att_layers[-1].data
        pairs = suppress(pairs, m_att_last, encoding.hum_index, encoding.obj_index, cfg.suppression_threshold)
    triplets = []
    for pair in pairs:
        verbs, s_r, s_c, _ = model.pair_forward(encoding, pair)
        for row, verb in enumerate(verbs):
            sr = float(s_r.data[row]) if s_r is not None else 0.0
            sc = float(s_c.data[0, verb])
            triplets.append(
                ScoredTriplet(
                    human_box=pair.human.box,
                    human_score=pair.human.score,
                    human_id=pair.human_id,
                    object_box=pair.object.box,
                    object_class=pair.object.class_id,
                    object_score=pair.object.score,
                    object_id=pair.object_id,
                    verb=verb,
                    score=fuse(pair.human.score, pair.object.score, sr, sc),
                )
            )
    triplets.sort(key=lambda t: (-t.score, t.human_id, t.object_id, t.verb))
    return triplets


def run_detection(model: KBan, scenes: Sequence[Scene], cfg: InferenceConfig) -> list[list[ScoredTriplet]]:
    return [detect(model, scene, cfg) for scene in scenes]


def attention_dump(model: KBan, scene: Scene, human_id: int, object_id: int) -> list[dict]:
    """Decoder attention for one pair: one row per (layer, head, verb,
    instance) with the softmax weight assigned to that instance."""
    if model.decoder is None:
        raise DataError("model has no decoder; nothing to dump")
    pairs = [p for p in pair_proposals(scene, 0.0, 0.0, model.cfg.map_res)
             if p.human_id == human_id and p.object_id == object_id]
    if not pairs:
        raise DataError(f"pair ({human_id}, {object_id}) not found in scene")
    pair = pairs[0]
    encoding = model.encode_scene(scene)
    verbs, _, _, attention = model.pair_forward(encoding, pair, collect_attention=True)
    rows = []
    for layer_idx, layer_weights in enumerate(attention):
        for head_idx, weights in enumerate(layer_weights):
            for row, verb in enumerate(verbs):
                for col, inst_id in enumerate(encoding.instance_ids):
                    rows.append(
                        {
                            "layer": layer_idx,
                            "head": head_idx,
                            "verb": verb,
                            "instance_id": inst_id,
                            "weight": float(weights[row, col]),
                        }
                    )
    return rows


# ---------------------------------------------------------------------------
# detection files (JSON Lines, one triplet per line with its scene index)


def save_detections(per_scene: Sequence[Sequence[ScoredTriplet]], path) -> None:
    with open(path, "w") as fh:
        for scene_index, triplets in enumerate(per_scene):
            for t in triplets:
                doc = {"scene_index": scene_index, **t.to_dict()}
                fh.write(json.dumps(doc, sort_keys=True))
                fh.write("\n")


def load_detections(path, num_scenes: int | None = None) -> list[list[ScoredTriplet]]:
    by_scene: dict[int, list[ScoredTriplet]] = {}
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                by_scene.setdefault(int(doc["scene_index"]), []).append(ScoredTriplet.from_dict(doc))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load detections from {path}: {exc}") from exc
    count = num_scenes if num_scenes is not None else (max(by_scene) + 1 if by_scene else 0)
    return [by_scene.get(i, []) for i in range(count)]
