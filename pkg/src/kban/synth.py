"""Synthetic scene generator.

Makes desk-scale learning possible: interactions are statistically learnable
because (a) instances taking part in a verb carry that verb's appearance
offset on top of their class prototype, and (b) interacting objects are
placed near their partner human, so spatial maps and position codes
correlate with interactiveness. Ground-truth triplet boxes equal the
generated instance boxes, so the IoU-0.5 label rule matches exactly.

Everything is drawn from seeded generators in a fixed order; the same config
reproduces the same dataset byte for byte.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .scene import BoundingBox, GtTriplet, Instance, KnowledgeBase, Scene, save_scenes

SNR_PRESETS = {"high": 10.0, "medium": 4.0, "low": 1.5}

# verb-conditioned skeleton deformation, in unit-box coordinates; carries
# verb signal that only the pose stream can read
POSE_DEFORM_SCALE = 0.12

# standing-figure template over the 17 standard keypoints, in unit-box coords
KEYPOINT_TEMPLATE = np.array(
    [
        (0.50, 0.08),  # nose
        (0.46, 0.06), (0.54, 0.06),  # eyes
        (0.42, 0.08), (0.58, 0.08),  # ears
        (0.35, 0.22), (0.65, 0.22),  # shoulders
        (0.30, 0.38), (0.70, 0.38),  # elbows
        (0.27, 0.52), (0.73, 0.52),  # wrists
        (0.40, 0.52), (0.60, 0.52),  # hips
        (0.40, 0.73), (0.60, 0.73),  # knees
        (0.40, 0.95), (0.60, 0.95),  # ankles
    ]
)


def resolve_snr(value) -> float:
    if isinstance(value, str):
        try:
            return SNR_PRESETS[value]
        except KeyError:
            raise ConfigError(f"unknown snr preset {value!r}; choose from {sorted(SNR_PRESETS)}") from None
    return float(value)


@dataclass
class SynthConfig:
    num_scenes: int = 20
    num_val_scenes: int = 0
    num_test_scenes: int = 0
    humans_range: tuple[int, int] = (1, 2)
    objects_range: tuple[int, int] = (2, 3)
    num_verbs: int = 5
    num_object_classes: int = 4
    cooccur_density: float = 0.5
    d_app: int = 16
    snr: float = 4.0
    interaction_prob: float = 0.5
    image_width: int = 640
    image_height: int = 480
    seed: int = 0

    def __post_init__(self):
        self.humans_range = tuple(self.humans_range)
        self.objects_range = tuple(self.objects_range)
        self.snr = resolve_snr(self.snr)
        if self.num_scenes < 1 or self.num_val_scenes < 0 or self.num_test_scenes < 0:
            raise ConfigError("scene counts must be positive (val/test may be zero)")
        for name, (lo, hi) in (("humans_range", self.humans_range), ("objects_range", self.objects_range)):
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.num_verbs < 1 or self.num_object_classes < 2:
            raise ConfigError("need at least 1 verb and 2 object classes (class 0 is the human class)")
        if not 0.0 < self.cooccur_density <= 1.0 or not 0.0 <= self.interaction_prob <= 1.0:
            raise ConfigError("cooccur_density must be in (0, 1], interaction_prob in [0, 1]")
        if self.d_app < 1 or self.snr <= 0:
            raise ConfigError("d_app must be >= 1 and snr > 0")
        if self.image_width < 8 or self.image_height < 8:
            raise ConfigError("image too small")


@dataclass
class SynthWorld:
    """Per-dataset latent structure shared by all splits."""

    kb: KnowledgeBase
    prototypes: np.ndarray  # class prototypes incl. the human class 0
    verb_offsets: np.ndarray
    pose_deforms: np.ndarray  # per verb, 17 x 2 skeleton deformation


def build_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng([cfg.seed, 0])
    cooccur: dict[int, tuple[int, ...]] = {}
    for c in range(1, cfg.num_object_classes):
        verbs = [v for v in range(cfg.num_verbs) if rng.random() < cfg.cooccur_density]
        if not verbs:
            verbs = [int(rng.integers(cfg.num_verbs))]
        cooccur[c] = tuple(verbs)
    kb = KnowledgeBase(num_verbs=cfg.num_verbs, num_object_classes=cfg.num_object_classes, cooccur=cooccur)
    prototypes = rng.standard_normal((cfg.num_object_classes, cfg.d_app))
    # verbs 2k and 2k+1 share one appearance offset: confusable in appearance,
    # distinguishable only by the per-verb skeleton deformation (the pose map
    # feeds the decoder queries but not the complementary stream)
    shared = rng.standard_normal(((cfg.num_verbs + 1) // 2, cfg.d_app))
    verb_offsets = np.repeat(shared, 2, axis=0)[: cfg.num_verbs]
    pose_deforms = rng.standard_normal((cfg.num_verbs, 17, 2)) * POSE_DEFORM_SCALE
    return SynthWorld(kb=kb, prototypes=prototypes, verb_offsets=verb_offsets, pose_deforms=pose_deforms)


def _sample_box(rng: np.random.Generator, width: int, height: int, frac=(0.15, 0.35)) -> BoundingBox:
    w = rng.uniform(*frac) * width
    h = rng.uniform(*frac) * height
    x1 = rng.uniform(0.0, width - w)
    y1 = rng.uniform(0.0, height - h)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def _sample_box_near(rng: np.random.Generator, anchor: BoundingBox, width: int, height: int) -> BoundingBox:
    w = rng.uniform(0.12, 0.30) * width
    h = rng.uniform(0.12, 0.30) * height
    cx = (anchor.x1 + anchor.x2) / 2 + rng.normal(0.0, 0.35 * anchor.width)
    cy = (anchor.y1 + anchor.y2) / 2 + rng.normal(0.0, 0.35 * anchor.height)
    x1 = min(max(cx - w / 2, 0.0), width - w)
    y1 = min(max(cy - h / 2, 0.0), height - h)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def _keypoints_in_box(
    rng: np.random.Generator, box: BoundingBox, deform: np.ndarray
) -> list[tuple[float, float]]:
    template = KEYPOINT_TEMPLATE + deform
    jitter = rng.normal(0.0, 0.02 * min(box.width, box.height), size=(17, 2))
    pts = template * (box.width, box.height) + (box.x1, box.y1) + jitter
    pts[:, 0] = np.clip(pts[:, 0], box.x1, box.x2)
    pts[:, 1] = np.clip(pts[:, 1], box.y1, box.y2)
    return [(float(x), float(y)) for x, y in pts]


def generate_scene(rng: np.random.Generator, cfg: SynthConfig, world: SynthWorld) -> Scene:
    n_h = int(rng.integers(cfg.humans_range[0], cfg.humans_range[1] + 1))
    n_o = int(rng.integers(cfg.objects_range[0], cfg.objects_range[1] + 1))
    human_boxes = [_sample_box(rng, cfg.image_width, cfg.image_height) for _ in range(n_h)]
    human_scores = [float(rng.uniform(0.5, 1.0)) for _ in range(n_h)]

    # sample object classes, per-pair interactions and object placement
    object_specs = []
    human_verbs: list[list[int]] = [[] for _ in range(n_h)]
    for i in range(n_o):
        class_id = int(rng.integers(1, cfg.num_object_classes))
        verb_pool = world.kb.cooccur[class_id]
        partners = []
        for j in range(n_h):
            if rng.random() < cfg.interaction_prob:
                verb = int(verb_pool[rng.integers(len(verb_pool))])
                partners.append((j, verb))
                human_verbs[j].append(verb)
        if partners:
            box = _sample_box_near(rng, human_boxes[partners[0][0]], cfg.image_width, cfg.image_height)
        else:
            box = _sample_box(rng, cfg.image_width, cfg.image_height)
        object_specs.append((class_id, partners, box, float(rng.uniform(0.5, 1.0))))

    noise_std = 1.0 / cfg.snr
    humans = []
    for j in range(n_h):
        deform = np.zeros((17, 2))
        for verb in human_verbs[j]:
            deform += world.pose_deforms[verb]
        keypoints = _keypoints_in_box(rng, human_boxes[j], deform)
        appearance = world.prototypes[0].copy()
        for verb in human_verbs[j]:
            appearance += world.verb_offsets[verb]
        appearance += noise_std * rng.standard_normal(cfg.d_app)
        humans.append(
            Instance(id=j, is_human=True, class_id=0, box=human_boxes[j],
                     score=human_scores[j], appearance=appearance, keypoints=keypoints)
        )

    objects = []
    triplets = []
    for i, (class_id, partners, box, score) in enumerate(object_specs):
        appearance = world.prototypes[class_id].copy()
        for _, verb in partners:
            appearance += world.verb_offsets[verb]
        appearance += noise_std * rng.standard_normal(cfg.d_app)
        objects.append(
            Instance(id=n_h + i, is_human=False, class_id=class_id, box=box,
                     score=score, appearance=appearance)
        )
        for j, verb in partners:
            triplets.append(
                GtTriplet(human_box=human_boxes[j], object_box=box, object_class=class_id, verb=verb)
            )

    return Scene(
        image_width=cfg.image_width,
        image_height=cfg.image_height,
        humans=humans,
        objects=objects,
        gt_triplets=triplets,
    )


_SPLIT_STREAMS = {"train": 1, "val": 2, "test": 3}


def generate_split(cfg: SynthConfig, world: SynthWorld, split: str, count: int) -> list[Scene]:
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAMS[split]])
    return [generate_scene(rng, cfg, world) for _ in range(count)]


def generate_dataset(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write kb.json plus train/val/test JSONL files (val/test only when
    their counts are nonzero). Deterministic per seed; splits are disjoint
    by construction (separate generator streams)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg)
    paths = {"kb": out_dir / "kb.json"}
    world.kb.save(paths["kb"])
    for split, count in (("train", cfg.num_scenes), ("val", cfg.num_val_scenes), ("test", cfg.num_test_scenes)):
        if count < 1:
            continue
        path = out_dir / f"{split}.jsonl"
        save_scenes(generate_split(cfg, world, split, count), path)
        paths[split] = path
    return paths
