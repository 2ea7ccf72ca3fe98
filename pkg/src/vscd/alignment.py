"""Frame-level alignment: similarity grid, soft matching, segments, candidates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .pnm import read_planes, write_planes


def similarity_grid(q_desc: torch.Tensor, r_desc: torch.Tensor) -> torch.Tensor:
    """Cosine similarity S[t, s] between query and reference descriptors."""
    qn = q_desc.norm(dim=-1)
    rn = r_desc.norm(dim=-1)
    if (qn == 0).any() or (rn == 0).any():
        raise ValueError("zero-norm frame descriptor")
    if not (torch.isfinite(q_desc).all() and torch.isfinite(r_desc).all()):
        raise ValueError("non-finite frame descriptor")
    return (q_desc / qn[:, None]) @ (r_desc / rn[:, None]).T


class RefineHead(nn.Module):
    """Residual 2-D conv head over the similarity grid (1 -> hidden -> 1)."""

    def __init__(self, hidden: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def residual(self, S: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(S[None, None])))[0, 0]

    def forward(self, S: torch.Tensor) -> torch.Tensor:
        return S + self.residual(S)


def soft_matching(A: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-wise softmax of A / tau."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = A / tau
    z = z - z.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


@dataclass
class SegmentProposal:
    t0: int
    t1: int  # inclusive
    matches: list[int]
    mean_logit: float
    singleton_fill: bool = False

    def __len__(self) -> int:
        return self.t1 - self.t0 + 1

    @property
    def ref_range(self) -> range:
        return range(min(self.matches), max(self.matches) + 1)


@dataclass
class CandidateSet:
    t: int
    anchor: int
    candidates: list[int]
    confidences: list[float]


def top1(P: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: smallest reference index wins ties
    return np.argmax(P, axis=1)


def segment_proposals(P, A, delta: int = 2, min_len: int = 2, L_max: int = 5,
                      split_quantile: float = 0.0) -> list[SegmentProposal]:
    """Group near-diagonal runs of the top-1 path, then guarantee coverage."""
    P = _np(P)
    A = _np(A)
    if delta < 0 or not 1 <= min_len <= L_max:
        raise ValueError(f"need delta >= 0 and 1 <= min_len <= L_max (got {delta}, {min_len}, {L_max})")
    T = P.shape[0]
    s_hat = top1(P)
    logit = A[np.arange(T), s_hat]

    runs: list[list[int]] = []
    cur = [0]
    for t in range(T - 1):
        if abs((int(s_hat[t + 1]) - int(s_hat[t])) - 1) <= delta:
            cur.append(t + 1)
        else:
            runs.append(cur)
            cur = [t + 1]
    runs.append(cur)

    if split_quantile > 0:
        pieces = []
        for run in runs:
            cut = np.quantile(logit[run], split_quantile)
            part: list[int] = []
            for t in run:
                if logit[t] < cut:
                    if part:
                        pieces.append(part)
                    part = []
                else:
                    part.append(t)
            if part:
                pieces.append(part)
        runs = pieces

    segments = []
    for run in runs:
        if len(run) < min_len:
            continue
        for i in range(0, len(run), L_max):
            chunk = run[i : i + L_max]
            if len(chunk) >= min_len:
                segments.append(_segment(chunk, s_hat, logit))

    covered = set()
    for seg in segments:
        covered.update(range(seg.t0, seg.t1 + 1))
    for t in range(T):
        if t not in covered:
            segments.append(_segment([t], s_hat, logit, fill=True))
    return sorted(segments, key=lambda s: (s.t0, s.t1))


def _segment(ts: list[int], s_hat: np.ndarray, logit: np.ndarray, fill: bool = False) -> SegmentProposal:
    return SegmentProposal(ts[0], ts[-1], [int(s_hat[t]) for t in ts], float(np.mean(logit[ts])), fill)


def reference_support(t: int, segments: list[SegmentProposal]) -> list[int]:
    """Reference indices spanned by the segments that cover query index t."""
    refs: set[int] = set()
    for seg in segments:
        if seg.t0 <= t <= seg.t1:
            refs.update(seg.ref_range)
    return sorted(refs)


def candidate_set(t: int, segments: list[SegmentProposal], P, K: int = 4, cap: int = 6) -> CandidateSet:
    """Segment-consistent anchor first, then global top-K fills, deduplicated."""
    row = _np(P)[t]
    support = reference_support(t, segments)
    if not support:
        raise RuntimeError(f"query keyframe {t} is not covered by any segment")
    anchor = max(support, key=lambda s: (row[s], -s))
    ranked = sorted(range(len(row)), key=lambda s: (-row[s], s))[:K]
    cands = [anchor] + [s for s in ranked if s != anchor]
    cands = cands[:cap]
    return CandidateSet(t, anchor, cands, [float(row[s]) for s in cands])


def dump_alignment(path, S, A, P) -> None:
    write_planes(path, np.stack([_np(S), _np(A), _np(P)]))


def load_alignment(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    planes = read_planes(path)
    if planes.shape[0] != 3:
        raise ValueError(f"{path}: expected 3 planes, found {planes.shape[0]}")
    return planes[0], planes[1], planes[2]


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)
