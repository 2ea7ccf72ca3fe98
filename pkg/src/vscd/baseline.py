"""Naive pair differencing: top-1 matched reference frame, absolute pixel difference."""

from __future__ import annotations

import numpy as np

from .evaluator import PairResult, frame_f1
from .synthdata.dataset import DatasetPair
from .trainer import sample_keyframes


def frame_vectors(frames: np.ndarray, pool: int = 8) -> np.ndarray:
    """Mean-centred, block-averaged frames flattened to vectors."""
    t, h, w, c = frames.shape
    x = frames.astype(np.float64).reshape(t, h // pool, pool, w // pool, pool, c).mean(axis=(2, 4)) / 255.0
    x = x.reshape(t, -1)
    return x - x.mean(axis=1, keepdims=True)


def match_top1(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar reference frame for each query frame."""
    q, r = frame_vectors(query), frame_vectors(ref)
    q /= np.linalg.norm(q, axis=1, keepdims=True) + 1e-12
    r /= np.linalg.norm(r, axis=1, keepdims=True) + 1e-12
    sim = q @ r.T
    return np.argmax(sim, axis=1), sim


def difference_maps(pair: DatasetPair, T_key: int) -> tuple[np.ndarray, list[int], np.ndarray]:
    ri = sample_keyframes(len(pair.reference), T_key)
    qi = sample_keyframes(len(pair.query), T_key)
    ref = pair.reference.frames[ri]
    query = pair.query.frames[qi]
    best, sim = match_top1(query, ref)
    diff = np.abs(query.astype(np.float64) - ref[best].astype(np.float64)).mean(axis=-1) / 255.0
    return diff, qi, sim


def evaluate_baseline(pair: DatasetPair, threshold: float, T_key: int = 8) -> PairResult:
    diff, qi, sim = difference_maps(pair, T_key)
    gt = pair.masks[qi]
    scores = [frame_f1(diff[i] > threshold, gt[i], qi[i], pair.pair_id) for i in range(len(qi))]
    e = np.exp((sim - sim.max(1, keepdims=True)) / 0.5)
    return PairResult(pair.pair_id, scores, e / e.sum(1, keepdims=True), diff, gt, qi, pair.meta)


def calibrate_threshold(pairs: list[DatasetPair], T_key: int = 8, grid=None) -> float:
    """Threshold maximising mean frame F1 on the given (training) pairs."""
    grid = np.linspace(0.02, 0.6, 30) if grid is None else grid
    maps = [difference_maps(p, T_key) for p in pairs]
    best, best_f1 = float(grid[0]), -1.0
    for th in grid:
        f1 = np.mean([frame_f1(d[i] > th, p.masks[qi[i]]).f1 for p, (d, qi, _) in zip(pairs, maps) for i in range(len(qi))])
        if f1 > best_f1:
            best, best_f1 = float(th), f1
    return best
