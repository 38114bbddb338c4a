"""Bottom-up relation encoder.

Each layer is a group-aware parsing block: instances are split into a human
group and an object group, each group runs multi-head self-attention among
its own members, then a bidirectional dual-attention step exchanges context
across groups. The dual attention computes one logit matrix per head for the
object direction and reuses its exact transpose for the human direction;
instead of softmax averaging it gates values with a sigmoid, expands to
N x M x d and max-pools over the partner group.

Sublayers are pre-normalized (layer norm on the sublayer input, residual add
outside), so zeroing the value/output projections makes every layer an exact
identity. The per-layer interactiveness matrix is the sigmoid of the
head-mean logits and doubles as the supervision target and the inference
suppression score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .scene import Instance
from .tensor import ParamStore, Tensor


def group_split(instances: Sequence[Instance]) -> tuple[list[Instance], list[Instance]]:
    """Stable partition of mixed instances into (humans, objects)."""
    humans = [i for i in instances if i.is_human]
    objects = [i for i in instances if not i.is_human]
    return humans, objects


class InputEmbed:
    """Instance feature = appearance projection + position-code projection."""

    def __init__(self, store: ParamStore, d_app: int, d: int):
        self.w_app = store.uniform("input.app.w", (d_app, d), fan_in=d_app)
        self.b_app = store.uniform("input.app.b", (d,), fan_in=d_app)
        self.w_pos = store.uniform("input.pos.w", (5, d), fan_in=5)
        self.b_pos = store.uniform("input.pos.b", (d,), fan_in=5)

    def forward(self, appearance: np.ndarray, codes: np.ndarray) -> Tensor:
        app = T.affine(T.constant(appearance), self.w_app, self.b_app)
        pos = T.affine(T.constant(codes), self.w_pos, self.b_pos)
        return T.add(app, pos)


class IntraGroupAttention:
    """Pre-norm multi-head softmax self-attention with a residual connection."""

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int):
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.wq = store.uniform(f"{prefix}.wq", (d, d), fan_in=d)
        self.bq = store.uniform(f"{prefix}.bq", (d,), fan_in=d)
        self.wk = store.uniform(f"{prefix}.wk", (d, d), fan_in=d)
        self.bk = store.uniform(f"{prefix}.bk", (d,), fan_in=d)
        self.wv = store.uniform(f"{prefix}.wv", (d, d), fan_in=d)
        self.bv = store.uniform(f"{prefix}.bv", (d,), fan_in=d)
        self.wo = store.uniform(f"{prefix}.wo", (d, d), fan_in=d)
        self.bo = store.uniform(f"{prefix}.bo", (d,), fan_in=d)
        self.ln_gain = store.full(f"{prefix}.ln.gain", (d,), 1.0)
        self.ln_bias = store.full(f"{prefix}.ln.bias", (d,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        xn = T.layer_norm_rows(x, self.ln_gain, self.ln_bias)
        q = T.affine(xn, self.wq, self.bq)
        k = T.affine(xn, self.wk, self.bk)
        v = T.affine(xn, self.wv, self.bv)
        outs = []
        for t in range(self.heads):
            lo, hi = t * self.d_head, (t + 1) * self.d_head
            logits = T.scale(
                T.matmul(T.slice_cols(q, lo, hi), T.transpose(T.slice_cols(k, lo, hi))),
                1.0 / math.sqrt(self.d_head),
            )
            outs.append(T.matmul(T.softmax_rows(logits), T.slice_cols(v, lo, hi)))
        update = T.affine(T.concat_last_axis(outs), self.wo, self.bo)
        return T.add(x, update)


@dataclass
class DualTrace:
    """Per-head logit matrices of one dual-attention step, both directions."""

    object_logits: list[Tensor]  # each N x M (objects as queries)
    human_logits: list[Tensor]  # each M x N, the exact transposes


class DualAttention:
    """Shared-logit bidirectional cross-group attention.

    Per head: A = (P_o o)(P_h h)^T / sqrt(d_head); the object update gates
    projected human values with sigmoid(A) and max-pools over humans, the
    human update reuses sigmoid(A^T) against projected object values. Heads
    are concatenated and residual-added (no output projection).
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int):
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.w_obj_qk = store.uniform(f"{prefix}.obj_qk.w", (d, d), fan_in=d)
        self.b_obj_qk = store.uniform(f"{prefix}.obj_qk.b", (d,), fan_in=d)
        self.w_hum_qk = store.uniform(f"{prefix}.hum_qk.w", (d, d), fan_in=d)
        self.b_hum_qk = store.uniform(f"{prefix}.hum_qk.b", (d,), fan_in=d)
        self.w_hum_v = store.uniform(f"{prefix}.hum_v.w", (d, d), fan_in=d)
        self.b_hum_v = store.uniform(f"{prefix}.hum_v.b", (d,), fan_in=d)
        self.w_obj_v = store.uniform(f"{prefix}.obj_v.w", (d, d), fan_in=d)
        self.b_obj_v = store.uniform(f"{prefix}.obj_v.b", (d,), fan_in=d)
        self.ln_hum_gain = store.full(f"{prefix}.ln_hum.gain", (d,), 1.0)
        self.ln_hum_bias = store.full(f"{prefix}.ln_hum.bias", (d,), 0.0)
        self.ln_obj_gain = store.full(f"{prefix}.ln_obj.gain", (d,), 1.0)
        self.ln_obj_bias = store.full(f"{prefix}.ln_obj.bias", (d,), 0.0)

    def forward(self, h: Tensor, o: Tensor) -> tuple[Tensor, Tensor, Tensor, DualTrace]:
        hn = T.layer_norm_rows(h, self.ln_hum_gain, self.ln_hum_bias)
        on = T.layer_norm_rows(o, self.ln_obj_gain, self.ln_obj_bias)
        po = T.affine(on, self.w_obj_qk, self.b_obj_qk)
        ph = T.affine(hn, self.w_hum_qk, self.b_hum_qk)
        vh = T.affine(hn, self.w_hum_v, self.b_hum_v)
        vo = T.affine(on, self.w_obj_v, self.b_obj_v)
        o_heads, h_heads = [], []
        obj_logits, hum_logits = [], []
        for t in range(self.heads):
            lo, hi = t * self.d_head, (t + 1) * self.d_head
            logits = T.scale(
                T.matmul(T.slice_cols(po, lo, hi), T.transpose(T.slice_cols(ph, lo, hi))),
                1.0 / math.sqrt(self.d_head),
            )
            logits_t = T.transpose(logits)
            o_heads.append(T.max_pool_axis1(T.broadcast_expand_mul(T.sigmoid(logits), T.slice_cols(vh, lo, hi))))
            h_heads.append(T.max_pool_axis1(T.broadcast_expand_mul(T.sigmoid(logits_t), T.slice_cols(vo, lo, hi))))
            obj_logits.append(logits)
            hum_logits.append(logits_t)
        o_out = T.add(o, T.concat_last_axis(o_heads))
        h_out = T.add(h, T.concat_last_axis(h_heads))
        m_att = T.sigmoid(T.scale(T.add_n(obj_logits), 1.0 / self.heads))
        return h_out, o_out, m_att, DualTrace(object_logits=obj_logits, human_logits=hum_logits)


class GpmLayer:
    """One encoder layer: intra-group self-attention per group, then dual attention."""

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int):
        if d % heads != 0:
            raise ValueError(f"model dimension {d} not divisible by {heads} heads")
        self.hum_sa = IntraGroupAttention(store, f"{prefix}.hum_sa", d, heads)
        self.obj_sa = IntraGroupAttention(store, f"{prefix}.obj_sa", d, heads)
        self.dual = DualAttention(store, f"{prefix}.dual", d, heads)

    def forward(self, h: Tensor, o: Tensor) -> tuple[Tensor, Tensor, Tensor, DualTrace | None]:
        m, n = h.shape[0], o.shape[0]
        if m > 0:
            h = self.hum_sa.forward(h)
        if n > 0:
            o = self.obj_sa.forward(o)
        if m > 0 and n > 0:
            return self.dual.forward(h, o)
        # one group empty: dual attention is skipped, suppression is vacuous
        return h, o, Tensor(np.zeros((n, m))), None


@dataclass
class EncoderOutput:
    humans: Tensor  # M x d
    objects: Tensor  # N x d
    m_att_layers: list[Tensor]  # per layer, N x M in (0, 1)
    traces: list[DualTrace | None]


class Encoder:
    """A stack of identical group-aware parsing layers."""

    def __init__(self, store: ParamStore, d: int, heads: int, depth: int):
        if depth < 1:
            raise ValueError(f"encoder depth must be >= 1, got {depth}")
        self.depth = depth
        self.layers = [GpmLayer(store, f"encoder.layer{i}", d, heads) for i in range(depth)]

    def forward(self, h: Tensor, o: Tensor) -> EncoderOutput:
        m_att_layers, traces = [], []
        for layer in self.layers:
            h, o, m_att, trace = layer.forward(h, o)
            m_att_layers.append(m_att)
            traces.append(trace)
        return EncoderOutput(humans=h, objects=o, m_att_layers=m_att_layers, traces=traces)


def interactiveness_loss(m_att_layers: Sequence[Tensor], gt: Tensor) -> Tensor:
    """Mean over layers of binary cross entropy between the interactiveness
    matrix and the binary pair ground truth (deep supervision)."""
    if not m_att_layers:
        raise ValueError("no interactiveness matrices")
    losses = [T.bce(m, gt) for m in m_att_layers]
    return T.scale(T.add_n(losses), 1.0 / len(losses))
