"""Label construction, the multi-task objective and the SGD training loop.

A batch is one or more whole scenes: the interactiveness matrix is
supervised per scene against the binary pair ground truth, s_c against the
full verb label vector and s_r per co-occurring verb (the s_r term is a sum
over the object's co-occurrence set, the pair terms are averaged over the
batch's pairs). Training runs over all human-object pairs; suppression is
inference-only.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import interactiveness_loss
from .errors import DataError, DivergenceError
from .model import KBan, ModelConfig
from .scene import Instance, GtTriplet, KnowledgeBase, Scene, iou, pair_proposals
from .tensor import SGD, Tape, Tensor

LABEL_IOU_THRESHOLD = 0.5

# optimizer presets: the schedule from the original full-scale recipe and a
# desk-scale one tuned for the synthetic data (larger steps destabilize the
# sum-over-verbs score loss)
PRESETS = {
    "vcoco": {"lr": 1e-3, "weight_decay": 5e-4},
    "desk": {"lr": 5e-3, "weight_decay": 1e-4, "grad_clip": 5.0},
}


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_iters: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    batch_size: int = 1
    log_interval: int = 50
    val_interval: int = 0
    seed: int = 0
    l_enc: int = 2
    l_dec: int = 2
    d: int = 64
    heads: int = 4
    d_app: int = 16
    ka: bool = True
    grad_clip: float = 0.0  # global grad-norm clip before each step; 0 disables
    suppression_threshold: float = 0.1  # inference-time only

    def __post_init__(self):
        self.lr_decay_iters = tuple(self.lr_decay_iters)
        if self.iterations < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("iterations, batch_size and log_interval must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("bad optimizer settings")

    def model_config(self, kb: KnowledgeBase) -> ModelConfig:
        return ModelConfig(
            num_verbs=kb.num_verbs,
            num_classes=kb.num_object_classes,
            d=self.d,
            heads=self.heads,
            l_enc=self.l_enc,
            l_dec=self.l_dec,
            d_app=self.d_app,
            ka=self.ka,
        )


@dataclass
class PairLabels:
    l: np.ndarray  # binary verb vector, length num_verbs
    interactive: bool


def make_labels(
    human: Instance,
    obj: Instance,
    gt_triplets: Sequence[GtTriplet],
    num_verbs: int,
    iou_thresh: float = LABEL_IOU_THRESHOLD,
) -> PairLabels:
    """l_v = 1 iff some ground-truth triplet with verb v matches the pair:
    same object class and both box IoUs >= the threshold."""
    l = np.zeros(num_verbs)
    for t in gt_triplets:
        if (
            t.object_class == obj.class_id
            and iou(human.box, t.human_box) >= iou_thresh
            and iou(obj.box, t.object_box) >= iou_thresh
        ):
            l[t.verb] = 1.0
    return PairLabels(l=l, interactive=bool(l.any()))


def build_gt_matrix(scene: Scene, num_verbs: int, iou_thresh: float = LABEL_IOU_THRESHOLD) -> np.ndarray:
    """Binary objects x humans matrix; entry (i, j) is 1 iff the pair
    (human j, object i) matches any ground-truth triplet."""
    gt = np.zeros((len(scene.objects), len(scene.humans)))
    for i, obj in enumerate(scene.objects):
        for j, human in enumerate(scene.humans):
            if make_labels(human, obj, scene.gt_triplets, num_verbs, iou_thresh).interactive:
                gt[i, j] = 1.0
    return gt


@dataclass
class PreparedScene:
    """A scene with its training pairs (all pairs, no score thresholding),
    per-pair labels and the interactiveness ground truth, computed once."""

    scene: Scene
    pairs: list
    labels: list[PairLabels]
    gt: np.ndarray


def prepare_scene(scene: Scene, kb: KnowledgeBase, map_res: int) -> PreparedScene:
    pairs = pair_proposals(scene, 0.0, 0.0, map_res)
    labels = [make_labels(p.human, p.object, scene.gt_triplets, kb.num_verbs) for p in pairs]
    return PreparedScene(scene=scene, pairs=pairs, labels=labels, gt=build_gt_matrix(scene, kb.num_verbs))


@dataclass
class LossParts:
    total: float
    interactiveness: float
    s_c: float
    s_r: float


def objective(
    m_att_layers: Sequence[Tensor],
    gt: np.ndarray,
    per_pair: Sequence[tuple[Tensor | None, np.ndarray, Tensor, np.ndarray]],
) -> tuple[Tensor, LossParts]:
    """Scene objective: interactiveness loss plus the per-pair mean of
    [bce(s_c, l) + sum over the object's co-occurring verbs of bce(s_r_v, l_v)].

    ``per_pair`` rows are (s_r or None, labels restricted to the pair's verb
    set, s_c row, full label vector).
    """
    terms: list[Tensor] = []
    li_val = 0.0
    if m_att_layers and gt.size > 0:
        li = interactiveness_loss(m_att_layers, T.constant(gt))
        li_val = li.item()
        terms.append(li)
    sc_val = 0.0
    sr_val = 0.0
    if per_pair:
        pair_terms = []
        for s_r, l_sel, s_c, l_full in per_pair:
            lc = T.bce(s_c, T.constant(l_full[None, :]))
            sc_val += lc.item()
            term = lc
            if s_r is not None:
                # sum over the verb set = |Verb_o| times the elementwise mean
                lr_sum = T.scale(T.bce(s_r, T.constant(l_sel)), float(len(l_sel)))
                sr_val += lr_sum.item()
                term = T.add(term, lr_sum)
            pair_terms.append(term)
        terms.append(T.scale(T.add_n(pair_terms), 1.0 / len(pair_terms)))
        sc_val /= len(per_pair)
        sr_val /= len(per_pair)
    if not terms:
        raise DataError("scene provides no supervision (no pairs and no interactiveness matrix)")
    total = T.add_n(terms) if len(terms) > 1 else terms[0]
    return total, LossParts(total=total.item(), interactiveness=li_val, s_c=sc_val, s_r=sr_val)


def scene_loss(model: KBan, prep: PreparedScene) -> tuple[Tensor, LossParts]:
    encoding = model.encode_scene(prep.scene)
    per_pair = []
    for pair, labels in zip(prep.pairs, prep.labels):
        verbs, s_r, s_c, _ = model.pair_forward(encoding, pair)
        per_pair.append((s_r, labels.l[list(verbs)], s_c, labels.l))
    return objective(encoding.output.m_att_layers, prep.gt, per_pair)


def validation_loss(model: KBan, preps: Sequence[PreparedScene]) -> float:
    return float(np.mean([scene_loss(model, p)[0].item() for p in preps]))


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    interactiveness_loss: float
    s_c_loss: float
    s_r_loss: float
    lr: float


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "interactiveness_loss", "s_c_loss", "s_r_loss", "lr"])
        for r in rows:
            writer.writerow([r.iteration, r.loss, r.interactiveness_loss, r.s_c_loss, r.s_r_loss, r.lr])


@dataclass
class TrainResult:
    model: KBan
    metrics: list[MetricsRow]
    iterations_completed: int
    final_train_loss: float
    final_val_loss: float | None
    best_val_loss: float | None
    best_iteration: int | None
    best_params: dict[str, np.ndarray] | None = field(repr=False, default=None)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    decays = sum(1 for m in cfg.lr_decay_iters if iteration >= m)
    return cfg.lr * cfg.lr_decay_factor**decays


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm. Keeps confident wrong predictions from
    throwing the sigmoid heads into saturation."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def train(
    cfg: TrainConfig,
    scenes: Sequence[Scene],
    kb: KnowledgeBase,
    val_scenes: Sequence[Scene] = (),
    model: KBan | None = None,
    start_iteration: int = 0,
    stop_below: float | None = None,
) -> TrainResult:
    """Scene-batched SGD. Pass ``model``/``start_iteration`` to resume; the
    loop then continues numbering at start_iteration + 1. ``stop_below``
    halts early once a batch loss drops under it."""
    if not scenes:
        raise DataError("no training scenes")
    if model is None:
        model = KBan(cfg.model_config(kb), kb, seed=cfg.seed)
    map_res = model.cfg.map_res
    preps = [prepare_scene(s, kb, map_res) for s in scenes]
    val_preps = [prepare_scene(s, kb, map_res) for s in val_scenes]
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rows: list[MetricsRow] = []
    best_val = math.inf
    best_iteration = None
    best_params = None
    last_loss = math.nan
    it = start_iteration
    for it in range(start_iteration + 1, start_iteration + cfg.iterations + 1):
        opt.lr = lr_at(cfg, it)
        base = (it - start_iteration - 1) * cfg.batch_size
        batch = [preps[(base + k) % len(preps)] for k in range(cfg.batch_size)]
        with Tape() as tape:
            losses = [scene_loss(model, p) for p in batch]
            loss = T.scale(T.add_n([lt for lt, _ in losses]), 1.0 / len(losses))
            last_loss = loss.item()
            if not math.isfinite(last_loss):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            tape.backward(loss)
        if cfg.grad_clip > 0:
            clip_gradients(model.params, cfg.grad_clip)
        opt.step()
        opt.zero_grad()
        if it % cfg.log_interval == 0:
            parts = [p for _, p in losses]
            rows.append(
                MetricsRow(
                    iteration=it,
                    loss=last_loss,
                    interactiveness_loss=float(np.mean([p.interactiveness for p in parts])),
                    s_c_loss=float(np.mean([p.s_c for p in parts])),
                    s_r_loss=float(np.mean([p.s_r for p in parts])),
                    lr=opt.lr,
                )
            )
        if cfg.val_interval and val_preps and it % cfg.val_interval == 0:
            vl = validation_loss(model, val_preps)
            if vl < best_val:
                best_val = vl
                best_iteration = it
                best_params = {name: p.data.copy() for name, p in model.params.items()}
        if stop_below is not None and last_loss < stop_below:
            break
    final_val = validation_loss(model, val_preps) if val_preps else None
    if val_preps and final_val is not None and final_val < best_val:
        best_val = final_val
        best_iteration = it
        best_params = {name: p.data.copy() for name, p in model.params.items()}
    return TrainResult(
        model=model,
        metrics=rows,
        iterations_completed=it,
        final_train_loss=last_loss,
        final_val_loss=final_val,
        best_val_loss=None if best_iteration is None else best_val,
        best_iteration=best_iteration,
        best_params=best_params,
    )
