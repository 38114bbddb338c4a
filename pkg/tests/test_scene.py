"""Scene model: geometry, rasterization, pairing and knowledge-base contracts."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kban.errors import DataError
from kban.scene import (
    BoundingBox,
    Instance,
    GtTriplet,
    KnowledgeBase,
    Scene,
    HICO_DET_THRESHOLDS,
    V_COCO_THRESHOLDS,
    iou,
    load_scenes,
    pair_proposals,
    position_code,
    render_pose_map,
    render_spatial_map,
    save_scenes,
    verbs_for_object,
)


def rasterized_iou(a: BoundingBox, b: BoundingBox, cells: int = 1200) -> float:
    """Area-count oracle: fraction of fine-grid cell centers in both boxes
    over centers in either box."""
    x_lo, x_hi = min(a.x1, b.x1), max(a.x2, b.x2)
    y_lo, y_hi = min(a.y1, b.y1), max(a.y2, b.y2)
    xs = x_lo + (np.arange(cells) + 0.5) * (x_hi - x_lo) / cells
    ys = y_lo + (np.arange(cells) + 0.5) * (y_hi - y_lo) / cells
    def inside(box):
        return ((box.x1 <= xs) & (xs <= box.x2))[None, :] & ((box.y1 <= ys) & (ys <= box.y2))[:, None]
    in_a, in_b = inside(a), inside(b)
    return (in_a & in_b).sum() / (in_a | in_b).sum()


def boxes(max_coord=100.0):
    coords = st.floats(min_value=0.0, max_value=max_coord)
    return st.tuples(coords, coords, coords, coords).filter(
        lambda t: t[0] + 0.5 < t[2] and t[1] + 0.5 < t[3]
    ).map(lambda t: BoundingBox(*t))


def make_instance(idx, is_human, box, score=0.9, class_id=None, keypoints=None):
    return Instance(
        id=idx,
        is_human=is_human,
        class_id=0 if is_human else (class_id if class_id is not None else 1),
        box=box,
        score=score,
        appearance=np.zeros(4),
        keypoints=keypoints,
    )


# ---------------------------------------------------------------------------
# position code


def test_position_code_full_image_box():
    code = position_code(BoundingBox(0, 0, 100, 50), 100, 50)
    assert np.allclose(code, [0, 0, 1, 1, 1], atol=1e-15)


def test_position_code_frozen_value():
    code = position_code(BoundingBox(10, 20, 30, 60), 100, 100)
    assert np.allclose(code, [0.1, 0.2, 0.2, 0.4, 0.08], atol=1e-15)


def test_position_code_translation_changes_only_first_entry():
    base = position_code(BoundingBox(10, 20, 30, 60), 100, 100)
    moved = position_code(BoundingBox(15, 20, 35, 60), 100, 100)
    assert moved[0] == pytest.approx(base[0] + 0.05, abs=1e-15)
    assert np.allclose(moved[1:], base[1:], atol=1e-15)


@given(boxes())
def test_position_code_entries_in_unit_interval(box):
    code = position_code(box, 101, 101)
    assert np.all(code >= 0.0) and np.all(code <= 1.0)


def test_position_code_rejects_out_of_image_box():
    with pytest.raises(ValueError):
        position_code(BoundingBox(10, 10, 200, 20), 100, 100)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        BoundingBox(5, 5, 5, 10)


# ---------------------------------------------------------------------------
# iou


def test_iou_identity():
    box = BoundingBox(3, 4, 10, 12)
    assert iou(box, box) == 1.0


def test_iou_disjoint():
    assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0


def test_iou_frozen_value_against_rasterized_oracle():
    a = BoundingBox(0, 0, 2, 2)
    b = BoundingBox(1, 1, 3, 3)
    got = iou(a, b)
    assert got == pytest.approx(1 / 7, rel=1e-12)
    assert got == pytest.approx(rasterized_iou(a, b), abs=3e-3)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes(), boxes())
@settings(max_examples=25)
def test_iou_matches_rasterized_oracle(a, b):
    assert iou(a, b) == pytest.approx(rasterized_iou(a, b), abs=6e-3)


# ---------------------------------------------------------------------------
# spatial map


def test_spatial_map_equal_boxes_cover_grid():
    box = BoundingBox(5, 5, 20, 20)
    sp = render_spatial_map(box, box, resolution=16)
    assert np.all(sp.grid.data == 1.0)


def test_spatial_map_left_half_columns():
    human = BoundingBox(0, 0, 32, 64)
    obj = BoundingBox(0, 0, 64, 64)  # union frame is the object box
    sp = render_spatial_map(human, obj, resolution=64)
    # independent cell-center reference
    centers = (np.arange(64) + 0.5) * 64 / 64
    expected_cols = centers <= 32.0
    assert np.array_equal(sp.grid.data[0], np.tile(expected_cols, (64, 1)).astype(float))
    assert np.all(sp.grid.data[0][:, :32] == 1.0) and np.all(sp.grid.data[0][:, 32:] == 0.0)
    assert np.all(sp.grid.data[1] == 1.0)


def test_spatial_map_disjoint_boxes_do_not_overlap():
    sp = render_spatial_map(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30), resolution=32)
    assert np.all(sp.grid.data[0] * sp.grid.data[1] == 0.0)
    assert sp.grid.data[0].sum() > 0 and sp.grid.data[1].sum() > 0


@given(boxes(), boxes(), st.floats(min_value=-50, max_value=50), st.floats(min_value=-50, max_value=50))
@settings(max_examples=25)
def test_spatial_map_translation_covariant(a, b, dx, dy):
    base = render_spatial_map(a, b, resolution=16)
    moved = render_spatial_map(a.translate(dx, dy), b.translate(dx, dy), resolution=16)
    assert np.array_equal(base.grid.data, moved.grid.data)


# ---------------------------------------------------------------------------
# pose map


def test_pose_map_missing_keypoints():
    pm = render_pose_map(None, BoundingBox(0, 0, 10, 10))
    assert not pm.has_pose
    assert np.all(pm.grid.data == 0.0)


def test_pose_map_all_joints_coincident_lights_one_cell():
    kps = [(5.0, 5.0)] * 17
    pm = render_pose_map(kps, BoundingBox(0, 0, 10, 10), resolution=16)
    assert pm.has_pose
    assert pm.grid.data.sum() == 1.0


def test_pose_map_horizontal_line_lights_one_row_segment():
    frame = BoundingBox(0, 0, 32, 32)
    xs = np.linspace(1.0, 31.0, 17)
    kps = [(float(x), 16.5) for x in xs]
    pm = render_pose_map(kps, frame, resolution=32)
    grid = pm.grid.data[0]
    row = int(16.5 / 32 * 32)
    c_lo = int(1.0 / 32 * 32)
    c_hi = int(31.0 / 32 * 32)
    expected = np.zeros((32, 32))
    expected[row, c_lo : c_hi + 1] = 1.0
    assert np.array_equal(grid, expected)


def test_pose_map_clips_outside_keypoints():
    kps = [(-100.0, -100.0)] + [(5.0, 5.0)] * 16
    pm = render_pose_map(kps, BoundingBox(0, 0, 10, 10), resolution=8)
    assert pm.grid.data[0, 0, 0] == 1.0
    assert set(np.unique(pm.grid.data)) <= {0.0, 1.0}


def test_pose_map_wrong_count_rejected():
    with pytest.raises(ValueError, match="17"):
        render_pose_map([(0.0, 0.0)] * 5, BoundingBox(0, 0, 10, 10))


def test_pose_map_translation_covariant():
    kps = [(float(3 + j % 5), float(2 + j // 5)) for j in range(17)]
    frame = BoundingBox(0, 0, 12, 12)
    base = render_pose_map(kps, frame, resolution=16)
    moved = render_pose_map([(x + 7, y - 3) for x, y in kps], frame.translate(7, -3), resolution=16)
    assert np.array_equal(base.grid.data, moved.grid.data)


# ---------------------------------------------------------------------------
# pair proposals


def scene_with_scores(h_scores, o_scores):
    humans = [
        make_instance(i, True, BoundingBox(5 + i, 5, 25 + i, 45), score=s, keypoints=[(10.0 + i, 10.0)] * 17)
        for i, s in enumerate(h_scores)
    ]
    objects = [
        make_instance(100 + i, False, BoundingBox(30, 8 + i, 60, 38 + i), score=s)
        for i, s in enumerate(o_scores)
    ]
    return Scene(image_width=100, image_height=100, humans=humans, objects=objects)


def test_pair_proposals_counting():
    scene = scene_with_scores([0.9, 0.8], [0.9, 0.5, 0.3])
    pairs = pair_proposals(scene, t_human=0.4, t_object=0.1)
    assert len(pairs) == 6


def test_pair_proposals_empty_when_humans_below_threshold():
    scene = scene_with_scores([0.2, 0.3], [0.9, 0.9])
    assert pair_proposals(scene, t_human=0.4, t_object=0.1) == []


def test_pair_proposals_threshold_presets():
    assert V_COCO_THRESHOLDS == (0.4, 0.1)
    assert HICO_DET_THRESHOLDS == (0.6, 0.1)
    scene = scene_with_scores([0.5], [0.9, 0.9])
    assert len(pair_proposals(scene, *V_COCO_THRESHOLDS)) == 2
    assert len(pair_proposals(scene, *HICO_DET_THRESHOLDS)) == 0


def test_pair_proposals_order_is_human_major_object_minor():
    scene = scene_with_scores([0.9, 0.9], [0.9, 0.9])
    pairs = pair_proposals(scene, 0.0, 0.0)
    assert [(p.human_id, p.object_id) for p in pairs] == [(0, 100), (0, 101), (1, 100), (1, 101)]


@given(
    st.lists(st.floats(min_value=0, max_value=1), min_size=0, max_size=4),
    st.lists(st.floats(min_value=0, max_value=1), min_size=0, max_size=4),
    st.floats(min_value=0, max_value=1),
    st.floats(min_value=0, max_value=1),
)
@settings(max_examples=30)
def test_pair_proposals_count_formula(h_scores, o_scores, t_h, t_o):
    scene = scene_with_scores(h_scores, o_scores)
    n = len(pair_proposals(scene, t_h, t_o, resolution=8))
    assert n == sum(s >= t_h for s in h_scores) * sum(s >= t_o for s in o_scores)


# ---------------------------------------------------------------------------
# knowledge base


def test_verbs_for_object_sorted():
    kb = KnowledgeBase(num_verbs=8, num_object_classes=3, cooccur={1: (7, 2, 5)})
    assert verbs_for_object(kb, 1) == (2, 5, 7)


def test_verbs_for_object_empty_cooccurrence():
    kb = KnowledgeBase(num_verbs=8, num_object_classes=3, cooccur={1: (0,)})
    with pytest.raises(DataError, match="empty co-occurrence"):
        verbs_for_object(kb, 2)


def test_verbs_for_object_full_vocabulary():
    kb = KnowledgeBase(num_verbs=4, num_object_classes=2, cooccur={1: (0, 1, 2, 3)})
    assert verbs_for_object(kb, 1) == (0, 1, 2, 3)


def test_verbs_for_object_unknown_class():
    kb = KnowledgeBase(num_verbs=4, num_object_classes=2, cooccur={1: (0,)})
    with pytest.raises(DataError, match="unknown"):
        verbs_for_object(kb, 9)


def test_knowledge_base_embeddings_deterministic():
    a = KnowledgeBase(num_verbs=5, num_object_classes=3, cooccur={1: (0, 1)})
    b = KnowledgeBase(num_verbs=5, num_object_classes=3, cooccur={1: (0, 1)})
    assert np.array_equal(a.object_embed, b.object_embed)
    assert np.array_equal(a.verb_embed, b.verb_embed)
    assert a.object_embed.shape == (3, 32) and a.verb_embed.shape == (5, 32)


def test_knowledge_base_file_roundtrip(tmp_path):
    kb = KnowledgeBase(num_verbs=6, num_object_classes=4, cooccur={1: (2, 0), 2: (5,), 3: (1, 3, 4)})
    path = tmp_path / "kb.json"
    kb.save(path)
    kb.save(tmp_path / "kb2.json")
    assert (tmp_path / "kb.json").read_bytes() == (tmp_path / "kb2.json").read_bytes()
    loaded = KnowledgeBase.load(path)
    assert loaded.num_verbs == 6 and loaded.num_object_classes == 4
    assert loaded.cooccur == kb.cooccur
    assert np.array_equal(loaded.verb_embed, kb.verb_embed)


# ---------------------------------------------------------------------------
# scene files


def test_scene_file_roundtrip(tmp_path):
    scene = scene_with_scores([0.9], [0.8, 0.7])
    scene.gt_triplets.append(
        GtTriplet(human_box=scene.humans[0].box, object_box=scene.objects[0].box, object_class=1, verb=2)
    )
    path = tmp_path / "scenes.jsonl"
    save_scenes([scene, scene], path)
    loaded = load_scenes(path)
    assert len(loaded) == 2
    got = loaded[0]
    assert got.image_width == 100 and len(got.humans) == 1 and len(got.objects) == 2
    assert got.humans[0].keypoints == scene.humans[0].keypoints
    assert got.gt_triplets[0].verb == 2
    save_scenes(loaded, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_load_scenes_bad_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(DataError):
        load_scenes(path)


def test_scene_duplicate_ids_rejected():
    box = BoundingBox(0, 0, 10, 10)
    with pytest.raises(DataError, match="duplicate"):
        Scene(
            image_width=50,
            image_height=50,
            humans=[make_instance(1, True, box)],
            objects=[make_instance(1, False, box)],
        )
