import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vscd.synthdata import GenConfig, generate_dataset, load_pair, manifest_hash, pair_dirs
from vscd.synthdata.generate import plan_change_counts, rebuild_masks
from vscd.synthdata.render import Pose, Trajectory, render, render_change_mask, render_frame, sample_trajectory
from vscd.synthdata.world import (
    ChangeSet,
    Illumination,
    Layout,
    ObjectInstance,
    Scene,
    Wall,
    feasible_counts,
    make_layout,
    make_pairs,
    make_scenes,
    present_in,
    repair_counts,
    symmetric_difference,
    toggle_edges,
)

CENTRE = Pose(1.2, 1.2, 0.0, math.radians(60))


def obj(i, x, y, label=0, size=0.2, height=0.1, color=(0.9, 0.1, 0.1)):
    return ObjectInstance(i, label, x, y, 0.0, size, height, color)


def empty_layout(walls=()):
    return Layout(0, 2.4, list(walls), [], texture_seed=5)


def diff_oracle(ref, query):
    app = dis = 0
    for q in query:
        app += not any(q.id == r.id and q.x == r.x and q.y == r.y for r in ref)
    for r in ref:
        dis += not any(q.id == r.id and q.x == r.x and q.y == r.y for q in query)
    return app, dis


def test_symmetric_difference_adds_removes_move(rng):
    base = [obj(i, *rng.uniform(0.2, 2.2, size=2)) for i in range(6)]
    ref = base[:5]
    query = base[2:4] + [base[4].moved_to(0.3, 0.3)] + [obj(10 + i, 1.0 + 0.1 * i, 2.0) for i in range(3)]
    cs = symmetric_difference(Scene(0, ref), Scene(0, query))
    assert (len(cs.appeared), len(cs.disappeared)) == (4, 3) == diff_oracle(ref, query)


def test_symmetric_difference_layout_mismatch():
    with pytest.raises(ValueError):
        symmetric_difference(Scene(0, []), Scene(1, []))


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        Scene(0, [obj(1, 1, 1), obj(1, 2, 2)])


def test_pair_cycle():
    assert make_pairs(3) == [(0, 1), (1, 2), (2, 0)]
    with pytest.raises(ValueError):
        make_pairs(1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=2, max_size=7))
def test_toggle_edges_realize_counts(counts):
    if not feasible_counts(counts):
        with pytest.raises(ValueError):
            toggle_edges(counts)
        return
    edges = toggle_edges(counts)
    got = [0] * len(counts)
    for i, j in edges:
        assert i < j
        got[i] += 1
        got[j] += 1
    assert got == counts
    for e in edges:
        # present exactly in the scenes between its two toggles
        n = len(counts)
        flips = sum(present_in(e, s) != present_in(e, (s + 1) % n) for s in range(n))
        assert flips == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=2, max_size=6), st.integers(0, 10_000))
def test_repair_counts_stays_in_bounds(raw, seed):
    bounds = [(min(a, b), max(a, b)) for a, b in raw]
    g = np.random.default_rng(seed)
    counts = [int(g.integers(lo, hi + 1)) for lo, hi in bounds]
    fixed = repair_counts(counts, bounds)
    if fixed is not None:
        assert feasible_counts(fixed)
        assert all(lo <= c <= hi for c, (lo, hi) in zip(fixed, bounds))


@pytest.mark.parametrize("counts", [[3, 5, 4, 2], [0, 0, 0], [6, 6], [1, 2, 3, 4, 0]])
def test_scenes_realize_requested_counts(counts):
    rng = np.random.default_rng(3)
    layout = make_layout(0, rng)
    scenes = make_scenes(layout, counts, 3, rng, relocate_prob=0.5)
    for (i, j), want in zip(make_pairs(len(counts)), counts):
        assert len(symmetric_difference(scenes[i], scenes[j])) == want


def test_too_many_changes_for_slots():
    rng = np.random.default_rng(0)
    layout = make_layout(0, rng)
    with pytest.raises(ValueError):
        make_scenes(layout, [60, 60], 3, rng)


def test_render_is_deterministic():
    layout = make_layout(0, np.random.default_rng(1))
    scene = Scene(0, [obj(0, 1.2, 1.2)])
    traj = sample_trajectory(layout, 5, np.random.default_rng(2))
    assert render(layout, scene, traj).tobytes() == render(layout, scene, traj).tobytes()


def test_brightness_halves_pixel_means():
    layout = empty_layout()
    full = render_frame(layout, Scene(0, [obj(0, 1.2, 1.2)]), CENTRE).astype(float)
    half = render_frame(layout, Scene(0, [obj(0, 1.2, 1.2)], Illumination(0.5)), CENTRE).astype(float)
    assert abs(half.mean() / full.mean() - 0.5) < 0.01
    assert np.abs(half - full / 2).max() <= 1.0


def test_mask_equals_rendered_silhouette():
    layout = empty_layout()
    o = obj(7, 1.3, 1.1, label=1)
    bare = render_frame(layout, Scene(0, []), CENTRE)
    with_obj = render_frame(layout, Scene(0, [o]), CENTRE)
    silhouette = (np.abs(with_obj.astype(int) - bare.astype(int)).sum(-1) > 0).astype(np.uint8)
    mask = render_change_mask(layout, ChangeSet([o], []), CENTRE)
    assert mask.sum() > 50
    assert np.array_equal(mask, silhouette)


def test_wall_occludes_disappeared_object():
    wall = Wall(1.6, 1.0, 1.7, 1.4, 0.45)
    hidden = obj(3, 1.78, 1.2, size=0.06, height=0.05)
    assert render_change_mask(empty_layout(), ChangeSet([], [hidden]), CENTRE).sum() > 0
    assert render_change_mask(empty_layout([wall]), ChangeSet([], [hidden]), CENTRE).sum() == 0


def test_trajectory_json_round_trip():
    layout = make_layout(0, np.random.default_rng(1))
    traj = sample_trajectory(layout, 7, np.random.default_rng(4))
    back = Trajectory.from_json(json.loads(json.dumps(traj.to_json())))
    assert back == traj
    for p in traj.poses:
        assert 0 <= p.x <= layout.size and 0 <= p.y <= layout.size


def test_change_strata_match_proportions():
    cfg = GenConfig(layouts=6, scenes=5, change_bins=[(0, 2), (3, 6), (7, 10)], change_proportions=[0.2, 0.4, 0.4])
    counts = [c for layout in plan_change_counts(cfg) for c in layout]
    hist = [sum(a <= c <= b for c in counts) for a, b in cfg.change_bins]
    for h, p in zip(hist, cfg.change_proportions):
        assert abs(h - p * len(counts)) <= 1


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(scenes=1).validate()
    with pytest.raises(ValueError):
        GenConfig(change_proportions=[0.5, 0.5, 0.5]).validate()
    with pytest.raises(ValueError):
        GenConfig.from_dict({"layout": 3})


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "data"
    cfg = GenConfig(layouts=2, scenes=3, seed=11, frame_size=64, length_range=(6, 10), test_layouts=1,
                    illumination_prob=0.5)
    manifest = generate_dataset(cfg, root)
    return cfg, root, manifest


def test_dataset_layout_on_disk(dataset):
    cfg, root, manifest = dataset
    assert len(manifest["pairs"]) == 6
    assert len(pair_dirs(root, "train")) == 3 and len(pair_dirs(root, "test")) == 3
    pair = load_pair(pair_dirs(root)[0])
    assert pair.query.frames.shape[1:] == (64, 64, 3)
    assert len(pair.masks) == len(pair.query)
    assert set(np.unique(pair.masks)) <= {0, 1}
    assert "viewpoint_overlap" in pair.meta and 0 <= manifest["viewpoint_overlap"] <= 1


def test_dataset_masks_rebuild_exactly(dataset):
    _, root, _ = dataset
    for d in pair_dirs(root):
        pair = load_pair(d)
        assert np.array_equal(rebuild_masks(pair.meta), pair.masks)


def test_dataset_is_reproducible(dataset, tmp_path):
    cfg, root, _ = dataset
    generate_dataset(cfg, tmp_path / "again")
    assert manifest_hash(tmp_path / "again") == manifest_hash(root)


def test_dataset_refuses_non_empty_target(dataset):
    cfg, root, _ = dataset
    with pytest.raises(FileExistsError):
        generate_dataset(cfg, root)


def test_identical_and_illumination_only_pairs_have_empty_masks(dataset):
    _, root, _ = dataset
    meta = load_pair(pair_dirs(root)[0]).meta
    meta = dict(meta, query_scene=meta["reference_scene"])
    assert rebuild_masks(meta).sum() == 0
    relit = json.loads(json.dumps(meta["reference_scene"]))
    relit["illumination"] = {"brightness": 0.6, "light_dir": [0.5, -0.5]}
    assert rebuild_masks(dict(meta, query_scene=relit)).sum() == 0
