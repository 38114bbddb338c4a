"""Knowledge-guided top-down decoder.

A pair proposal becomes a base query from the object's word embedding plus
conv features of its pose and spatial maps. The base query is duplicated
once per co-occurring verb and each duplicate is augmented with that verb's
embedding, so the decoder can attend differently per candidate verb. Stacked
cross-attention layers (queries from the pair side, keys/values from the
encoder outputs; queries never attend to each other) produce one clue vector
per verb, scored by that verb's own binary classifier.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .scene import EMBED_DIM, KnowledgeBase, PairProposal
from .tensor import ParamStore, Tensor

MAP_FEATURE_DIM = 32
BASE_QUERY_DIM = EMBED_DIM + 2 * MAP_FEATURE_DIM  # object embedding + pose + spatial


class MapFeatureNet:
    """conv(in->4, k5, s2), relu, conv(4->8, k5, s2), relu, flatten, affine -> 32."""

    def __init__(self, store: ParamStore, prefix: str, in_channels: int, map_res: int):
        side1 = (map_res - 5) // 2 + 1
        side2 = (side1 - 5) // 2 + 1
        if map_res < 5 or side2 < 1:
            raise ValueError(f"map resolution {map_res} too small for two stride-2 5x5 convs")
        self.flat_dim = 8 * side2 * side2
        self.conv1_w = store.uniform(f"{prefix}.conv1.w", (4, in_channels, 5, 5), fan_in=in_channels * 25)
        self.conv1_b = store.uniform(f"{prefix}.conv1.b", (4, 1, 1), fan_in=in_channels * 25)
        self.conv2_w = store.uniform(f"{prefix}.conv2.w", (8, 4, 5, 5), fan_in=4 * 25)
        self.conv2_b = store.uniform(f"{prefix}.conv2.b", (8, 1, 1), fan_in=4 * 25)
        self.fc_w = store.uniform(f"{prefix}.fc.w", (self.flat_dim, MAP_FEATURE_DIM), fan_in=self.flat_dim)
        self.fc_b = store.uniform(f"{prefix}.fc.b", (MAP_FEATURE_DIM,), fan_in=self.flat_dim)

    def forward(self, grid: Tensor) -> Tensor:
        h = T.relu(T.add(T.conv2d(grid, self.conv1_w, stride=2), self.conv1_b))
        h = T.relu(T.add(T.conv2d(h, self.conv2_w, stride=2), self.conv2_b))
        return T.affine(T.flatten_row(h), self.fc_w, self.fc_b)


class QueryBuilder:
    """Builds per-pair, per-verb queries in the model dimension."""

    def __init__(self, store: ParamStore, d: int, map_res: int):
        self.pose_net = MapFeatureNet(store, "query.pose", 1, map_res)
        self.spatial_net = MapFeatureNet(store, "query.spatial", 2, map_res)
        self.proj_w = store.uniform("query.proj.w", (BASE_QUERY_DIM + EMBED_DIM, d), fan_in=BASE_QUERY_DIM + EMBED_DIM)
        self.proj_b = store.uniform("query.proj.b", (d,), fan_in=BASE_QUERY_DIM + EMBED_DIM)

    def base_query(self, pair: PairProposal, kb: KnowledgeBase) -> Tensor:
        """[object word embedding | pose conv features | spatial conv features], 1 x 96."""
        obj_embed = T.constant(kb.object_embed[pair.object.class_id][None, :])
        pose_feat = self.pose_net.forward(pair.pose.grid)
        spatial_feat = self.spatial_net.forward(pair.spatial.grid)
        return T.concat_last_axis([obj_embed, pose_feat, spatial_feat])

    def augment(self, base: Tensor, verbs: Sequence[int], kb: KnowledgeBase, ka: bool = True) -> Tensor:
        """One query row per verb (ascending verb id): project [base | verb embedding].

        With knowledge augmentation off the verb embeddings are zeroed, which
        collapses all rows of a pair to the same query.
        """
        if not verbs:
            raise ValueError("cannot build queries for an empty verb set")
        verb_rows = kb.verb_embed[list(verbs)]
        if not ka:
            verb_rows = np.zeros_like(verb_rows)
        stacked = T.concat_last_axis([T.tile_rows(base, len(verbs)), T.constant(verb_rows)])
        return T.affine(stacked, self.proj_w, self.proj_b)


class CrossAttentionLayer:
    """Pre-norm multi-head cross-attention with a residual query update."""

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int):
        if d % heads != 0:
            raise ValueError(f"model dimension {d} not divisible by {heads} heads")
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

    def forward(self, q: Tensor, kv: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        qn = T.layer_norm_rows(q, self.ln_gain, self.ln_bias)
        qp = T.affine(qn, self.wq, self.bq)
        kp = T.affine(kv, self.wk, self.bk)
        vp = T.affine(kv, self.wv, self.bv)
        outs, attention = [], []
        for t in range(self.heads):
            lo, hi = t * self.d_head, (t + 1) * self.d_head
            logits = T.scale(
                T.matmul(T.slice_cols(qp, lo, hi), T.transpose(T.slice_cols(kp, lo, hi))),
                1.0 / math.sqrt(self.d_head),
            )
            weights = T.softmax_rows(logits)
            attention.append(weights.data)
            outs.append(T.matmul(weights, T.slice_cols(vp, lo, hi)))
        update = T.affine(T.concat_last_axis(outs), self.wo, self.bo)
        return T.add(q, update), attention


class Decoder:
    """A stack of identical cross-attention layers over the encoder outputs."""

    def __init__(self, store: ParamStore, d: int, heads: int, depth: int):
        if depth < 1:
            raise ValueError(f"decoder depth must be >= 1, got {depth}")
        self.depth = depth
        self.layers = [CrossAttentionLayer(store, f"decoder.layer{i}", d, heads) for i in range(depth)]

    def forward(self, q: Tensor, enc_out: Tensor) -> tuple[Tensor, list[list[np.ndarray]]]:
        """Returns the clue rows plus attention weights per layer and head."""
        if enc_out.shape[0] == 0:
            raise ValueError("decoder needs at least one instance to attend over")
        attention = []
        for layer in self.layers:
            q, weights = layer.forward(q, enc_out)
            attention.append(weights)
        return q, attention


class VerbClassifierBank:
    """One independent binary classifier per verb id; classifier v only ever
    scores the clue row whose query was augmented with verb v."""

    def __init__(self, store: ParamStore, d: int, num_verbs: int):
        self.num_verbs = num_verbs
        self.w = store.uniform("classifier.w", (num_verbs, d), fan_in=d)
        self.b = store.uniform("classifier.b", (num_verbs,), fan_in=d)

    def scores(self, clues: Tensor, verbs: Sequence[int]) -> Tensor:
        """s_r per row: sigmoid of the verb-specific affine score. No
        cross-verb normalization."""
        if clues.shape[0] != len(verbs):
            raise ValueError(f"{clues.shape[0]} clue rows for {len(verbs)} verbs")
        if any(not 0 <= v < self.num_verbs for v in verbs):
            raise ValueError(f"verb ids {list(verbs)} outside 0..{self.num_verbs - 1}")
        idx = list(verbs)
        w_sel = T.gather_rows(self.w, idx)
        b_sel = T.gather_rows(self.b, idx)
        return T.sigmoid(T.add(T.rows_dot(clues, w_sel), b_sel))
