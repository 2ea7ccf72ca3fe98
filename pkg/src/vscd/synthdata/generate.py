"""Procedural dataset generation: layouts -> scene cycles -> rendered pairs."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..pnm import write_mask, write_ppm
from .render import Trajectory, footprint_overlap, render, render_change_masks, sample_trajectory
from .world import (
    Illumination,
    Layout,
    Scene,
    make_layout,
    make_pairs,
    make_scenes,
    repair_counts,
    symmetric_difference,
)

log = logging.getLogger(__name__)


@dataclass
class GenConfig:
    layouts: int = 2
    scenes: int = 5
    seed: int = 0
    frame_size: int = 128
    length_range: tuple[int, int] = (24, 48)
    # stratification knobs; bins are inclusive [lo, hi] ranges
    change_bins: list[tuple[int, int]] = field(default_factory=lambda: [(0, 2), (3, 6), (7, 10)])
    change_proportions: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.4])
    length_edges: tuple[int, int] = (32, 40)
    static_range: tuple[int, int] = (2, 5)
    relocate_prob: float = 0.3
    illumination_prob: float = 0.3
    rotate_view: bool = False
    world_size: float = 2.4
    speed: float = 0.035
    test_layouts: int = 0  # trailing layouts marked split="test"
    workers: int = 1

    def validate(self) -> None:
        if self.layouts < 1:
            raise ValueError("layouts must be >= 1")
        if self.scenes < 2:
            raise ValueError("need at least two scenes per layout")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length_range {self.length_range}")
        if len(self.change_bins) != len(self.change_proportions):
            raise ValueError("change_bins and change_proportions differ in length")
        if any(p < 0 for p in self.change_proportions) or not math.isclose(sum(self.change_proportions), 1.0, abs_tol=1e-6):
            raise ValueError("change_proportions must be non-negative and sum to 1")
        for a, b in self.change_bins:
            if not 0 <= a <= b:
                raise ValueError(f"bad change bin {(a, b)}")
        if self.frame_size < 16 or self.frame_size % 16:
            raise ValueError("frame_size must be a positive multiple of 16")
        if not 0 <= self.test_layouts < self.layouts or (self.test_layouts and self.layouts < 2):
            raise ValueError("test_layouts must leave at least one training layout")

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown generation keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("length_range", "length_edges", "static_range"):
            if k in d:
                d[k] = tuple(d[k])
        if "change_bins" in d:
            d["change_bins"] = [tuple(b) for b in d["change_bins"]]
        return cls(**d)


def _bin_labels(cfg: GenConfig, rng: np.random.Generator) -> list[int]:
    if cfg.scenes == 2:
        # both directions of a two-scene cycle see the same change set
        per_layout = _largest_remainder(cfg.change_proportions, cfg.layouts, rng)
        return [b for b in per_layout for _ in range(2)]
    return _largest_remainder(cfg.change_proportions, cfg.layouts * cfg.scenes, rng)


def _largest_remainder(proportions: list[float], total: int, rng: np.random.Generator) -> list[int]:
    raw = np.array(proportions) * total
    counts = np.floor(raw).astype(int)
    # largest remainder keeps every bin within one pair of its target share
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    labels = np.repeat(np.arange(len(counts)), counts)
    return list(rng.permutation(labels))


def plan_change_counts(cfg: GenConfig) -> list[list[int]]:
    """Per-layout, per-transition change counts that populate the strata."""
    rng = np.random.default_rng([cfg.seed, 7919])
    for _ in range(200):
        labels = _bin_labels(cfg, rng)
        plan = []
        for li in range(cfg.layouts):
            bins = [cfg.change_bins[b] for b in labels[li * cfg.scenes : (li + 1) * cfg.scenes]]
            counts = [int(rng.integers(a, b + 1)) for a, b in bins]
            fixed = repair_counts(counts, bins)
            if fixed is None:
                break
            plan.append(fixed)
        else:
            return plan
    raise ValueError("requested change-count strata cannot be realized on a scene cycle")


def _illumination(rng: np.random.Generator, prob: float) -> Illumination:
    if rng.random() >= prob:
        return Illumination()
    ang = rng.uniform(0, 2 * math.pi)
    mag = rng.uniform(0.3, 1.0)
    return Illumination(round(float(rng.uniform(0.65, 1.3)), 4),
                        (round(mag * math.cos(ang), 4), round(mag * math.sin(ang), 4)))


@dataclass
class LayoutPlan:
    layout: Layout
    scenes: list[Scene]
    trajectories: list[Trajectory]
    seed: list[int]


def plan_layout(cfg: GenConfig, index: int, counts: list[int]) -> LayoutPlan:
    seed = [cfg.seed, index]
    rng = np.random.default_rng(seed)
    layout = make_layout(index, rng, size=cfg.world_size)
    n_static = int(rng.integers(cfg.static_range[0], cfg.static_range[1] + 1))
    scenes = make_scenes(layout, counts, n_static, rng, relocate_prob=cfg.relocate_prob)
    for s in scenes:
        s.illumination = _illumination(rng, cfg.illumination_prob)
    trajs = [
        sample_trajectory(layout, int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1)), rng, speed=cfg.speed)
        for _ in scenes
    ]
    return LayoutPlan(layout, scenes, trajs, seed)


def pair_metadata(plan: LayoutPlan, ri: int, qi: int, cfg: GenConfig, split: str) -> dict:
    ref, query = plan.scenes[ri], plan.scenes[qi]
    tr, tq = plan.trajectories[ri], plan.trajectories[qi]
    changes = symmetric_difference(ref, query)
    overlap = float(np.mean([max(footprint_overlap(q, r, cfg.frame_size, cfg.frame_size) for r in tr.poses) for q in tq.poses]))
    return {
        "pair_id": f"L{plan.layout.id:03d}_{ri}to{qi}",
        "layout_id": plan.layout.id,
        "ref_scene": ri,
        "query_scene": qi,
        "change_count": len(changes),
        "appeared": len(changes.appeared),
        "disappeared": len(changes.disappeared),
        "ref_length": len(tr),
        "query_length": len(tq),
        "seed": plan.seed,
        "split": split,
        "illumination": {
            "reference": asdict(ref.illumination),
            "query": asdict(query.illumination),
        },
        "viewpoint_overlap": round(overlap, 6),
        "frame_size": cfg.frame_size,
        "rotate_view": cfg.rotate_view,
        "layout": plan.layout.to_json(),
        "reference_scene": ref.to_json(),
        "query_scene": query.to_json(),
        "reference_trajectory": tr.to_json(),
        "query_trajectory": tq.to_json(),
    }


def rebuild_masks(meta: dict) -> np.ndarray:
    """Re-derive the change set from stored scenes and re-render the masks."""
    layout = Layout.from_json(meta["layout"])
    changes = symmetric_difference(Scene.from_json(meta["reference_scene"]), Scene.from_json(meta["query_scene"]))
    size = meta["frame_size"]
    return render_change_masks(layout, changes, Trajectory.from_json(meta["query_trajectory"]), size, size,
                               meta.get("rotate_view", False))


def _write_pair(out: Path, meta: dict) -> tuple:
    layout = Layout.from_json(meta["layout"])
    size, rot = meta["frame_size"], meta["rotate_view"]
    folder = out / "pairs" / meta["pair_id"]
    stats = []
    for role, scene_key, traj_key in (("ref", "reference_scene", "reference_trajectory"),
                                      ("query", "query_scene", "query_trajectory")):
        (folder / role).mkdir(parents=True)
        frames = render(layout, Scene.from_json(meta[scene_key]), Trajectory.from_json(meta[traj_key]), size, size, rot)
        for t, fr in enumerate(frames):
            write_ppm(folder / role / f"frame_{t:05d}.ppm", fr)
        stats.append(frames.reshape(-1, 3).astype(np.float64) / 255.0)
    (folder / "masks").mkdir()
    masks = rebuild_masks(meta)
    for t, m in enumerate(masks):
        write_mask(folder / "masks" / f"mask_{t:05d}.pgm", m)
    (folder / "pair.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    px = np.concatenate(stats)
    return meta["pair_id"], px.sum(0), (px**2).sum(0), len(px), masks.mean()


def _histogram(values: list[int], bins: list[tuple[int, int]]) -> dict[str, int]:
    return {f"{a}-{b}": sum(a <= v <= b for v in values) for a, b in bins}


def _length_bin(n: int, edges: tuple[int, int]) -> str:
    return "low" if n < edges[0] else ("mid" if n <= edges[1] else "high")


def generate_dataset(cfg: GenConfig, out: str | Path) -> dict:
    """Plan everything in memory, render into a temp dir, then move into place."""
    cfg.validate()
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} exists and is not empty")
    counts = plan_change_counts(cfg)
    plans = [plan_layout(cfg, i, c) for i, c in enumerate(counts)]
    metas = []
    for li, plan in enumerate(plans):
        split = "test" if li >= cfg.layouts - cfg.test_layouts else "train"
        for ri, qi in make_pairs(cfg.scenes):
            metas.append(pair_metadata(plan, ri, qi, cfg, split))

    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".gen-", dir=out.parent))
    try:
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as ex:
                results = list(ex.map(_write_pair, [tmp] * len(metas), metas))
        else:
            results = [_write_pair(tmp, m) for m in metas]
        n_px = sum(r[3] for r in results)
        mean = sum(r[1] for r in results) / n_px
        std = np.sqrt(np.maximum(sum(r[2] for r in results) / n_px - mean**2, 1e-12))
        change_counts = [m["change_count"] for m in metas]
        manifest = {
            "version": 1,
            "config": json.loads(json.dumps(asdict(cfg))),
            "pairs": [
                {k: m[k] for k in ("pair_id", "layout_id", "ref_scene", "query_scene", "change_count", "appeared",
                                   "disappeared", "ref_length", "query_length", "split", "viewpoint_overlap")}
                | {"mask_fraction": round(float(r[4]), 6)}
                for m, r in zip(metas, results)
            ],
            "strata": {
                "change_count": _histogram(change_counts, cfg.change_bins),
                "query_length": {b: sum(_length_bin(m["query_length"], cfg.length_edges) == b for m in metas)
                                 for b in ("low", "mid", "high")},
            },
            "norm": {"mean": [round(float(v), 6) for v in mean], "std": [round(float(v), 6) for v in std]},
            "viewpoint_overlap": round(float(np.mean([m["viewpoint_overlap"] for m in metas])), 6),
        }
        manifest["config"].pop("workers")
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d pairs to %s", len(metas), out)
    return manifest
