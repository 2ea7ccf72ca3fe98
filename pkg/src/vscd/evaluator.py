"""Frame-wise F1 and the stratified, ambiguity and error-type breakdowns."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .fusion import predict_mask
from .model import VSCDNet
from .synthdata.dataset import DatasetPair
from .trainer import pair_tensors

log = logging.getLogger(__name__)

# change-size thresholds (fraction of frame pixels) for Small / Medium / Large
SIZE_EDGES = (0.027, 0.1082)


@dataclass
class FrameScore:
    frame: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    gt_fraction: float = 0.0
    pair_id: str = ""


def frame_f1(pred, gt, frame: int = 0, pair_id: str = "") -> FrameScore:
    """Pixel confusion counts and P/R/F1 for one frame.

    A frame with empty ground truth and empty prediction scores F1 = 1; any
    false positive on an empty ground truth scores 0.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        p = r = f = 1.0
    else:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
    return FrameScore(frame, tp, fp, fn, p, r, f, float(gt.mean()) if gt.size else 0.0, pair_id)


@dataclass
class PairResult:
    pair_id: str
    scores: list[FrameScore]
    P: np.ndarray  # [T_key, T_key] frame matching distribution
    probs: np.ndarray  # [T_key, H, W]
    gt: np.ndarray  # [T_key, H, W]
    query_indices: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def mean_f1(self) -> float:
        return float(np.mean([s.f1 for s in self.scores]))


@torch.no_grad()
def evaluate_pair(model: VSCDNet, pair: DatasetPair, tau: float = 0.5, T_key: int = 8) -> PairResult:
    """Run the pipeline on sampled keyframes and score each against its GT mask."""
    if len(pair.masks) != len(pair.query):
        raise ValueError(f"{pair.pair_id}: missing ground-truth masks")
    ref, query, _, qi = pair_tensors(pair, T_key)
    out = model(ref, query)
    logits = out["logits"][:, 0]
    pred = predict_mask(logits, tau).numpy()
    gt = pair.masks[qi]
    scores = [frame_f1(pred[i], gt[i], qi[i], pair.pair_id) for i in range(len(qi))]
    return PairResult(pair.pair_id, scores, out["P"].numpy(), torch.sigmoid(logits).numpy(), gt, qi, pair.meta)


def score_probabilities(result: PairResult, tau: float, exclude_empty: bool = False) -> list[FrameScore]:
    """Re-threshold stored probabilities (for threshold sweeps)."""
    scores = []
    for i, q in enumerate(result.query_indices):
        if exclude_empty and not result.gt[i].any():
            continue
        scores.append(frame_f1(result.probs[i] > tau, result.gt[i], q, result.pair_id))
    return scores


def mean_f1(scores: list[FrameScore], exclude_empty: bool = False) -> float:
    vals = [s.f1 for s in scores if not (exclude_empty and s.tp + s.fn == 0)]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def _bin_summary(scores: list[FrameScore]) -> dict:
    n = len(scores)
    if not n:
        return {"frames": 0, "f1": None, "precision": None, "recall": None}
    return {
        "frames": n,
        "f1": math.fsum(s.f1 for s in scores) / n,
        "precision": math.fsum(s.precision for s in scores) / n,
        "recall": math.fsum(s.recall for s in scores) / n,
    }


def size_bin(fraction: float, edges: tuple[float, float] = SIZE_EDGES) -> str:
    if fraction < edges[0]:
        return "small"
    return "medium" if fraction < edges[1] else "large"


def range_bin(value: float, edges: tuple[float, float]) -> str:
    """low: < edges[0]; mid: edges[0]..edges[1]; high: > edges[1]."""
    if value < edges[0]:
        return "low"
    return "mid" if value <= edges[1] else "high"


@dataclass
class BinConfig:
    length_edges: tuple[float, float] = (32, 40)
    change_edges: tuple[float, float] = (5, 15)
    size_edges: tuple[float, float] = SIZE_EDGES

    @classmethod
    def from_dict(cls, d: dict) -> BinConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown bin keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


def stratified_report(results: list[PairResult], bins: BinConfig | None = None, exclude_empty: bool = False) -> dict:
    """Mean F1 overall and per length / change-count / change-size bin."""
    bins = bins or BinConfig()
    groups: dict[str, dict[str, list[FrameScore]]] = {"video_length": {}, "change_count": {}, "change_size": {}}
    used: list[FrameScore] = []
    skipped = 0
    for res in results:
        meta = res.meta or {}
        if "query_length" not in meta or "change_count" not in meta:
            skipped += 1
            continue
        lb = range_bin(meta["query_length"], bins.length_edges)
        cb = range_bin(meta["change_count"], bins.change_edges)
        for s in res.scores:
            if exclude_empty and s.tp + s.fn == 0:
                continue
            used.append(s)
            groups["video_length"].setdefault(lb, []).append(s)
            groups["change_count"].setdefault(cb, []).append(s)
            groups["change_size"].setdefault(size_bin(s.gt_fraction, bins.size_edges), []).append(s)
    if skipped:
        log.warning("%d pairs lacked metadata and were excluded", skipped)
    order = {"video_length": ("low", "mid", "high"), "change_count": ("low", "mid", "high"),
             "change_size": ("small", "medium", "large")}
    return {
        "overall": _bin_summary(used),
        "bins": {fac: {b: _bin_summary(groups[fac].get(b, [])) for b in order[fac]} for fac in order},
        "bin_definitions": {
            "video_length": {"low": f"< {bins.length_edges[0]} frames", "mid": f"{bins.length_edges[0]}-{bins.length_edges[1]} frames",
                             "high": f"> {bins.length_edges[1]} frames"},
            "change_count": {"low": f"< {bins.change_edges[0]} changed instances",
                             "mid": f"{bins.change_edges[0]}-{bins.change_edges[1]} changed instances",
                             "high": f"> {bins.change_edges[1]} changed instances"},
            "change_size": {"small": f"< {100 * bins.size_edges[0]:.2f}%",
                            "medium": f"{100 * bins.size_edges[0]:.2f}%-{100 * bins.size_edges[1]:.2f}%",
                            "large": f">= {100 * bins.size_edges[1]:.2f}%"},
        },
        "excluded_pairs": skipped,
        "exclude_empty_gt": exclude_empty,
    }


def recompose(report: dict, factor: str) -> float:
    """Frame-weighted mean of per-bin F1 for one factor."""
    bins = [b for b in report["bins"][factor].values() if b["frames"]]
    total = sum(b["frames"] for b in bins)
    return math.fsum(b["f1"] * b["frames"] for b in bins) / total


def top_gap(P) -> np.ndarray:
    """top-1 minus top-2 probability of every row."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("the top-1/top-2 gap needs at least two reference keyframes")
    srt = np.sort(P, axis=1)
    return srt[:, -1] - srt[:, -2]


def ambiguity_bins(rows, scores: list[FrameScore], edges: tuple[float, float] | None = None) -> dict:
    """Group query keyframes into ambiguous / medium / clear by their gap."""
    gaps = top_gap(rows)
    if len(gaps) != len(scores):
        raise ValueError("one score per matching row is required")
    if edges is None:
        edges = tuple(float(e) for e in np.quantile(gaps, [1 / 3, 2 / 3]))
    labels = ["ambiguous" if g <= edges[0] else ("medium" if g <= edges[1] else "clear") for g in gaps]
    table = {b: _bin_summary([s for s, lab in zip(scores, labels) if lab == b]) for b in ("ambiguous", "medium", "clear")}
    return {"edges": list(edges), "gaps": gaps.tolist(), "labels": labels, "bins": table}


def error_taxonomy(scores: list[FrameScore], ratio: float = 2.0) -> dict:
    """Share of error frames that are FP-heavy, balanced or FN-heavy."""
    err = [s for s in scores if s.fp + s.fn > 0]
    counts = {"fp_heavy": 0, "balanced": 0, "fn_heavy": 0}
    for s in err:
        if s.fp > ratio * s.fn:
            counts["fp_heavy"] += 1
        elif s.fn > ratio * s.fp:
            counts["fn_heavy"] += 1
        else:
            counts["balanced"] += 1
    n = len(err)
    return {
        "ratio": ratio,
        "error_frames": n,
        "counts": counts,
        "percent": {k: (100.0 * v / n if n else 0.0) for k, v in counts.items()},
    }


def anomaly_scores(masks) -> np.ndarray:
    """Per-frame fraction of changed pixels (or mean probability)."""
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    return m.reshape(m.shape[0], -1).mean(axis=1)


def build_report(results: list[PairResult], bins: BinConfig | None = None, ratio: float = 2.0,
                 exclude_empty: bool = False, failures: dict | None = None) -> dict:
    scores = [s for r in results for s in r.scores]
    rows = np.concatenate([r.P for r in results]) if results else np.zeros((0, 2))
    report = {
        "metric": "frame-wise F1 (pixel F1 per frame, averaged over frames)",
        "degenerate_rule": "empty GT and empty prediction -> F1 = 1; empty GT with any FP -> F1 = 0",
        "mean_f1": mean_f1(scores, exclude_empty),
        "frames": len(scores),
        "pairs": {r.pair_id: {"mean_f1": r.mean_f1, "anomaly_scores": anomaly_scores(r.probs).tolist(),
                              "query_indices": r.query_indices} for r in results},
        "stratified": stratified_report(results, bins, exclude_empty),
        "taxonomy": error_taxonomy(scores, ratio),
        "failures": failures or {},
    }
    if rows.shape[1] >= 2 and scores:
        amb = ambiguity_bins(rows, scores)
        report["ambiguity"] = {"edges": amb["edges"], "bins": amb["bins"]}
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["metric", "mean_f1", "frames", "pairs", "stratified", "taxonomy", "failures"],
    "properties": {
        "mean_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "frames": {"type": "integer", "minimum": 0},
        "pairs": {"type": "object"},
        "stratified": {
            "type": "object",
            "required": ["overall", "bins", "bin_definitions"],
            "properties": {"bins": {"type": "object", "required": ["video_length", "change_count", "change_size"]}},
        },
        "taxonomy": {"type": "object", "required": ["percent", "counts", "error_frames"]},
        "ambiguity": {"type": "object", "required": ["edges", "bins"]},
        "failures": {"type": "object"},
    },
}


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def report_markdown(report: dict) -> str:
    lines = ["# Change detection report", "", f"Metric: {report['metric']}.", f"Degenerate frames: {report['degenerate_rule']}.", "",
             f"**Mean F1: {_fmt(report['mean_f1'])}** over {report['frames']} frames", ""]
    strat = report["stratified"]
    for fac, table in strat["bins"].items():
        lines += [f"## {fac.replace('_', ' ').title()}", "", "| Bin | Definition | Frames | F1 | Precision | Recall |",
                  "|---|---|---|---|---|---|"]
        for b, row in table.items():
            lines.append(f"| {b} | {strat['bin_definitions'][fac][b]} | {row['frames']} | {_fmt(row['f1'])} | "
                         f"{_fmt(row['precision'])} | {_fmt(row['recall'])} |")
        lines.append("")
    if "ambiguity" in report:
        lines += ["## Alignment ambiguity (top-1/top-2 gap)", "", "| Bin | Frames | F1 | Precision | Recall |", "|---|---|---|---|---|"]
        for b, row in report["ambiguity"]["bins"].items():
            lines.append(f"| {b} | {row['frames']} | {_fmt(row['f1'])} | {_fmt(row['precision'])} | {_fmt(row['recall'])} |")
        lines.append("")
    tax = report["taxonomy"]
    lines += [f"## Error taxonomy (ratio {tax['ratio']})", "", "| Type | Frames | Share |", "|---|---|---|"]
    for k, v in tax["counts"].items():
        lines.append(f"| {k} | {v} | {tax['percent'][k]:.1f}% |")
    lines.append("")
    if report["failures"]:
        lines += ["## Failed pairs", ""] + [f"- {k}: {v}" for k, v in report["failures"].items()] + [""]
    return "\n".join(lines)


def write_report(report: dict, out: str | Path, results: list[PairResult] | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (out / "report.md").write_text(report_markdown(report))
    if results is not None:
        with open(out / "frames.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "frame", "tp", "fp", "fn", "precision", "recall", "f1", "gt_fraction"])
            for r in results:
                for s in r.scores:
                    w.writerow([s.pair_id, s.frame, s.tp, s.fp, s.fn, f"{s.precision:.6f}", f"{s.recall:.6f}",
                                f"{s.f1:.6f}", f"{s.gt_fraction:.6f}"])
