"""Role-AP / mAP evaluation.

A detection is a true positive iff an unmatched ground-truth triplet exists
with the same verb and object class whose human and object boxes both
overlap the detection's boxes with IoU >= 0.5 (the boundary is inclusive).
Matching is greedy in descending score order; among eligible ground truths
the one maximizing min(human IoU, object IoU) is consumed, each at most
once. AP is the exact area under the precision-recall step curve with the
standard monotone precision envelope (no 11-point interpolation); mAP
averages over verbs that have at least one ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .model import ScoredTriplet
from .scene import GtTriplet, Scene, iou

MATCH_IOU_THRESHOLD = 0.5


@dataclass
class MatchResult:
    flags: list[bool]  # per detection, in the given (descending score) order
    gt_counts: dict[int, int]  # ground-truth triplets per verb


def match_triplets(
    detections: Sequence[ScoredTriplet],
    gts: Sequence[GtTriplet],
    iou_thresh: float = MATCH_IOU_THRESHOLD,
) -> MatchResult:
    scores = [d.score for d in detections]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by descending score")
    matched = [False] * len(gts)
    flags = []
    for det in detections:
        best, best_quality = None, -1.0
        for gi, gt in enumerate(gts):
            if matched[gi] or gt.verb != det.verb or gt.object_class != det.object_class:
                continue
            iou_h = iou(det.human_box, gt.human_box)
            iou_o = iou(det.object_box, gt.object_box)
            if iou_h >= iou_thresh and iou_o >= iou_thresh:
                quality = min(iou_h, iou_o)
                if quality > best_quality:
                    best, best_quality = gi, quality
        if best is not None:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    gt_counts: dict[int, int] = {}
    for gt in gts:
        gt_counts[gt.verb] = gt_counts.get(gt.verb, 0) + 1
    return MatchResult(flags=flags, gt_counts=gt_counts)


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """All-points AP over TP/FP flags in descending score order.

    Returns 0.0 when there are no ground truths or no true positives; verbs
    without ground truth are excluded from mAP by the caller.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0 or not flags:
        return 0.0
    arr = np.asarray(flags, dtype=bool)
    tp_cum = np.cumsum(arr)
    precision = tp_cum / np.arange(1, arr.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # sequential sum in rank order keeps the result reproducible bit for bit;
    # the clamp removes float dust a few ulps above 1 on perfect rankings
    return min(1.0, float(sum(envelope[i] / num_gt for i in np.flatnonzero(arr))))


@dataclass
class ApReport:
    per_verb_ap: dict[int, float]
    map: float
    gt_counts: dict[int, int]
    detection_counts: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_verb_ap": {str(v): ap for v, ap in sorted(self.per_verb_ap.items())},
            "gt_counts": {str(v): c for v, c in sorted(self.gt_counts.items())},
            "detection_counts": {str(v): c for v, c in sorted(self.detection_counts.items())},
        }

    def format_table(self) -> str:
        lines = [f"{'verb':>6} {'AP':>10} {'#gt':>6} {'#det':>6}"]
        for v in sorted(self.per_verb_ap):
            lines.append(
                f"{v:>6} {self.per_verb_ap[v]:>10.4f} {self.gt_counts.get(v, 0):>6} "
                f"{self.detection_counts.get(v, 0):>6}"
            )
        lines.append(f"role mAP over {len(self.per_verb_ap)} verbs: {self.map:.4f}")
        return "\n".join(lines)


def role_map(per_verb_flags: dict[int, list[bool]], gt_counts: dict[int, int]) -> ApReport:
    """Arithmetic mean of per-verb AP over verbs with at least one ground truth."""
    included = sorted(v for v, c in gt_counts.items() if c > 0)
    if not included:
        raise DataError("empty evaluation: no verb has ground-truth triplets")
    per_verb = {v: average_precision(per_verb_flags.get(v, []), gt_counts[v]) for v in included}
    return ApReport(
        per_verb_ap=per_verb,
        map=float(np.mean([per_verb[v] for v in included])),
        gt_counts={v: gt_counts[v] for v in included},
        detection_counts={v: len(per_verb_flags.get(v, [])) for v in included},
    )


def evaluate_detections(
    per_scene_detections: Sequence[Sequence[ScoredTriplet]],
    scenes: Sequence[Scene],
    iou_thresh: float = MATCH_IOU_THRESHOLD,
) -> ApReport:
    """Match per scene, pool per verb across scenes in global score order
    (ties broken by scene index, then per-scene rank), then average AP."""
    if len(per_scene_detections) != len(scenes):
        raise DataError(
            f"{len(per_scene_detections)} detection lists for {len(scenes)} scenes"
        )
    pooled: dict[int, list[tuple[float, int, int, bool]]] = {}
    gt_counts: dict[int, int] = {}
    for si, (dets, scene) in enumerate(zip(per_scene_detections, scenes)):
        result = match_triplets(dets, scene.gt_triplets, iou_thresh)
        for verb, count in result.gt_counts.items():
            gt_counts[verb] = gt_counts.get(verb, 0) + count
        for rank, (det, flag) in enumerate(zip(dets, result.flags)):
            pooled.setdefault(det.verb, []).append((-det.score, si, rank, flag))
    per_verb_flags = {
        verb: [flag for *_, flag in sorted(entries)] for verb, entries in pooled.items()
    }
    return role_map(per_verb_flags, gt_counts)


def shuffled_score_baseline(
    per_scene_detections: Sequence[Sequence[ScoredTriplet]],
    rng: np.random.Generator,
) -> list[list[ScoredTriplet]]:
    """Diagnostic baseline: the same detections with their scores permuted
    globally, destroying the ranking information while keeping the detection
    set fixed."""
    from dataclasses import replace

    flat = [(si, det) for si, dets in enumerate(per_scene_detections) for det in dets]
    scores = rng.permutation([det.score for _, det in flat])
    shuffled: list[list[ScoredTriplet]] = [[] for _ in per_scene_detections]
    for (si, det), score in zip(flat, scores):
        shuffled[si].append(replace(det, score=float(score)))
    for dets in shuffled:
        dets.sort(key=lambda t: (-t.score, t.human_id, t.object_id, t.verb))
    return shuffled
