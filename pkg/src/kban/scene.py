"""Scene data model: detected instances, pair proposals, spatial/pose map
rasterization, position coding, and the verb-object knowledge base.

Detections (boxes, scores, appearance features, keypoints) are inputs here;
no detector or pose estimator runs inside this package. All types are plain
immutable-by-convention value objects and safe to share across threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .tensor import Tensor

HUMAN_CLASS_ID = 0
MAP_RESOLUTION = 64
EMBED_DIM = 32
_EMBED_SEED = 1009  # deterministic stand-in for pretrained word embeddings

# score thresholds for pairing detections, (t_human, t_object)
V_COCO_THRESHOLDS = (0.4, 0.1)
HICO_DET_THRESHOLDS = (0.6, 0.1)

# 16-edge tree over the standard 17 keypoints
# 0 nose, 1/2 eyes, 3/4 ears, 5/6 shoulders, 7/8 elbows, 9/10 wrists,
# 11/12 hips, 13/14 knees, 15/16 ankles
SKELETON_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (0, 5), (0, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 13), (13, 15), (12, 14), (14, 16),
)


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            min(self.x1, other.x1), min(self.y1, other.y1),
            max(self.x2, other.x2), max(self.y2, other.y2),
        )

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union, 0 when the boxes are disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def position_code(box: BoundingBox, image_width: int, image_height: int) -> np.ndarray:
    """Normalized [x1/w, y1/h, box_w/w, box_h/h, area fraction]."""
    if not (0 <= box.x1 and box.x2 <= image_width and 0 <= box.y1 and box.y2 <= image_height):
        raise ValueError(f"box {box.as_list()} outside {image_width}x{image_height} image")
    return np.array(
        [
            box.x1 / image_width,
            box.y1 / image_height,
            box.width / image_width,
            box.height / image_height,
            box.area / (image_width * image_height),
        ]
    )


@dataclass
class Instance:
    id: int
    is_human: bool
    class_id: int
    box: BoundingBox
    score: float
    appearance: np.ndarray
    keypoints: list[tuple[float, float]] | None = None

    def __post_init__(self):
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        if self.is_human and self.class_id != HUMAN_CLASS_ID:
            raise ValueError(f"human instance {self.id} must use class {HUMAN_CLASS_ID}")


@dataclass
class GtTriplet:
    human_box: BoundingBox
    object_box: BoundingBox
    object_class: int
    verb: int


@dataclass
class Scene:
    image_width: int
    image_height: int
    humans: list[Instance]
    objects: list[Instance]
    gt_triplets: list[GtTriplet] = field(default_factory=list)

    def __post_init__(self):
        ids = [inst.id for inst in self.humans + self.objects]
        if len(ids) != len(set(ids)):
            raise DataError("duplicate instance ids in scene")

    @property
    def instances(self) -> list[Instance]:
        return self.humans + self.objects


@dataclass
class PoseMap:
    grid: Tensor  # 1 x R x R binary
    has_pose: bool = True


@dataclass
class SpatialMap:
    grid: Tensor  # 2 x R x R binary; channel 0 human, channel 1 object


@dataclass
class PairProposal:
    human: Instance
    object: Instance
    pose: PoseMap
    spatial: SpatialMap
    human_code: np.ndarray
    object_code: np.ndarray

    @property
    def human_id(self) -> int:
        return self.human.id

    @property
    def object_id(self) -> int:
        return self.object.id


def _box_mask(box: BoundingBox, frame: BoundingBox, resolution: int) -> np.ndarray:
    """Rasterize ``box`` in the coordinate frame of ``frame``; a cell is 1
    iff its center lies inside the box (closed interval)."""
    cx = frame.x1 + (np.arange(resolution) + 0.5) * frame.width / resolution
    cy = frame.y1 + (np.arange(resolution) + 0.5) * frame.height / resolution
    in_x = (box.x1 <= cx) & (cx <= box.x2)
    in_y = (box.y1 <= cy) & (cy <= box.y2)
    return (in_y[:, None] & in_x[None, :]).astype(np.float64)


def render_spatial_map(b_h: BoundingBox, b_o: BoundingBox, resolution: int = MAP_RESOLUTION) -> SpatialMap:
    """Binary masks of human and object rasterized in their union box."""
    frame = b_h.union(b_o)
    grid = np.stack([_box_mask(b_h, frame, resolution), _box_mask(b_o, frame, resolution)])
    return SpatialMap(grid=Tensor(grid))


def _bresenham(r0: int, c0: int, r1: int, c1: int) -> Iterable[tuple[int, int]]:
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        yield r, c
        if r == r1 and c == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def render_pose_map(
    keypoints: Sequence[tuple[float, float]] | None,
    union_box: BoundingBox,
    resolution: int = MAP_RESOLUTION,
) -> PoseMap:
    """Draw the 16-edge skeleton as 1-valued line segments in the union frame.

    Keypoints outside the frame are clipped to the border cells. Missing
    keypoints yield an all-zero map flagged has_pose=False.
    """
    grid = np.zeros((1, resolution, resolution))
    if keypoints is None:
        return PoseMap(grid=Tensor(grid), has_pose=False)
    if len(keypoints) != 17:
        raise ValueError(f"expected 17 keypoints, got {len(keypoints)}")
    cells = []
    for x, y in keypoints:
        c = int(math.floor((x - union_box.x1) / union_box.width * resolution))
        r = int(math.floor((y - union_box.y1) / union_box.height * resolution))
        cells.append((min(max(r, 0), resolution - 1), min(max(c, 0), resolution - 1)))
    for a, b in SKELETON_EDGES:
        for r, c in _bresenham(*cells[a], *cells[b]):
            grid[0, r, c] = 1.0
    return PoseMap(grid=Tensor(grid), has_pose=True)


def pair_proposals(
    scene: Scene,
    t_human: float,
    t_object: float,
    resolution: int = MAP_RESOLUTION,
) -> list[PairProposal]:
    """Cartesian product of score-qualifying humans and objects, ordered by
    (human id, object id), each pair carrying its rendered maps and codes."""
    humans = sorted((h for h in scene.humans if h.score >= t_human), key=lambda i: i.id)
    objects = sorted((o for o in scene.objects if o.score >= t_object), key=lambda i: i.id)
    pairs = []
    for h in humans:
        h_code = position_code(h.box, scene.image_width, scene.image_height)
        for o in objects:
            union = h.box.union(o.box)
            pairs.append(
                PairProposal(
                    human=h,
                    object=o,
                    pose=render_pose_map(h.keypoints, union, resolution),
                    spatial=render_spatial_map(h.box, o.box, resolution),
                    human_code=h_code,
                    object_code=position_code(o.box, scene.image_width, scene.image_height),
                )
            )
    return pairs


# ---------------------------------------------------------------------------
# knowledge base


@dataclass
class KnowledgeBase:
    num_verbs: int
    num_object_classes: int
    cooccur: dict[int, tuple[int, ...]]
    object_embed: np.ndarray = field(repr=False, default=None)
    verb_embed: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.cooccur = {int(c): tuple(sorted(set(int(v) for v in verbs))) for c, verbs in self.cooccur.items()}
        for c, verbs in self.cooccur.items():
            if not 0 <= c < self.num_object_classes:
                raise DataError(f"co-occurrence class {c} outside 0..{self.num_object_classes - 1}")
            if any(not 0 <= v < self.num_verbs for v in verbs):
                raise DataError(f"co-occurrence verbs for class {c} outside 0..{self.num_verbs - 1}")
        if self.object_embed is None or self.verb_embed is None:
            rng = np.random.default_rng(_EMBED_SEED)
            self.object_embed = rng.standard_normal((self.num_object_classes, EMBED_DIM)) / math.sqrt(EMBED_DIM)
            self.verb_embed = rng.standard_normal((self.num_verbs, EMBED_DIM)) / math.sqrt(EMBED_DIM)

    def save(self, path) -> None:
        doc = {
            "num_verbs": self.num_verbs,
            "num_object_classes": self.num_object_classes,
            "cooccur": {str(c): list(v) for c, v in sorted(self.cooccur.items())},
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        try:
            with open(path) as fh:
                doc = json.load(fh)
            return cls(
                num_verbs=int(doc["num_verbs"]),
                num_object_classes=int(doc["num_object_classes"]),
                cooccur={int(c): tuple(v) for c, v in doc["cooccur"].items()},
            )
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load knowledge base from {path}: {exc}") from exc


def verbs_for_object(kb: KnowledgeBase, class_id: int) -> tuple[int, ...]:
    """The verbs co-occurring with an object class, ascending by verb id."""
    if not 0 <= class_id < kb.num_object_classes:
        raise DataError(f"unknown object class {class_id}")
    verbs = kb.cooccur.get(class_id, ())
    if not verbs:
        raise DataError(f"empty co-occurrence set for object class {class_id}")
    return verbs


# ---------------------------------------------------------------------------
# scene (de)serialization: JSON Lines, one scene object per line


def _instance_to_dict(inst: Instance) -> dict:
    doc = {
        "id": inst.id,
        "is_human": inst.is_human,
        "class_id": inst.class_id,
        "box": inst.box.as_list(),
        "score": inst.score,
        "appearance": [float(v) for v in inst.appearance],
    }
    if inst.keypoints is not None:
        doc["keypoints"] = [[float(x), float(y)] for x, y in inst.keypoints]
    return doc


def scene_to_dict(scene: Scene) -> dict:
    return {
        "image_width": scene.image_width,
        "image_height": scene.image_height,
        "instances": [_instance_to_dict(i) for i in scene.instances],
        "gt_triplets": [
            {
                "human_box": t.human_box.as_list(),
                "object_box": t.object_box.as_list(),
                "object_class": t.object_class,
                "verb": t.verb,
            }
            for t in scene.gt_triplets
        ],
    }


def scene_from_dict(doc: dict) -> Scene:
    humans, objects = [], []
    for rec in doc["instances"]:
        inst = Instance(
            id=int(rec["id"]),
            is_human=bool(rec["is_human"]),
            class_id=int(rec["class_id"]),
            box=BoundingBox(*rec["box"]),
            score=float(rec["score"]),
            appearance=np.asarray(rec["appearance"], dtype=np.float64),
            keypoints=[(float(x), float(y)) for x, y in rec["keypoints"]] if rec.get("keypoints") else None,
        )
        (humans if inst.is_human else objects).append(inst)
    triplets = [
        GtTriplet(
            human_box=BoundingBox(*t["human_box"]),
            object_box=BoundingBox(*t["object_box"]),
            object_class=int(t["object_class"]),
            verb=int(t["verb"]),
        )
        for t in doc.get("gt_triplets", [])
    ]
    return Scene(
        image_width=int(doc["image_width"]),
        image_height=int(doc["image_height"]),
        humans=humans,
        objects=objects,
        gt_triplets=triplets,
    )


def save_scenes(scenes: Sequence[Scene], path) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene), sort_keys=True))
            fh.write("\n")


def load_scenes(path) -> list[Scene]:
    scenes = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    scenes.append(scene_from_dict(json.loads(line)))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load scenes from {path}: {exc}") from exc
    return scenes
