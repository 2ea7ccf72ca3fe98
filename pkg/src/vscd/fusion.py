"""Confidence-weighted multi-candidate fusion and query-guided decoding."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def patch_confidence(P: torch.Tensor, k: int, c_p: float = 0.5, c: float = 0.5) -> torch.Tensor:
    """c_p * peak + c * (1 - normalized entropy) per cell.

    P: [B, k*k, h, w] with exact zeros on masked offsets. Entropy is normalized
    by log(k^2); for k = 1 it is defined as 0.
    """
    if c_p < 0 or c < 0:
        raise ValueError("confidence weights must be non-negative")
    p_max = P.max(dim=1).values
    if k == 1:
        ent = torch.zeros_like(p_max)
    else:
        pos = P > 0
        logp = torch.log(torch.where(pos, P, torch.ones_like(P)))
        ent = -(P * logp).sum(1) / math.log(k * k)
    return c_p * p_max + c * (1 - ent)


def fuse(features: torch.Tensor, c_f: torch.Tensor, c_sp: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Weighted average of candidate features for one query frame.

    features [S, C, h, w], c_f [S], c_sp [S, h, w] -> [C, h, w].
    """
    if features.shape[0] == 0:
        raise RuntimeError("no candidates to fuse")
    wgt = (c_f.view(-1, 1, 1) * c_sp).unsqueeze(1)
    return (wgt * features).sum(0) / (wgt.sum(0) + eps)


def fuse_batched(features: torch.Tensor, c_f: torch.Tensor, c_sp: torch.Tensor, owner: torch.Tensor,
                 n_frames: int, eps: float = 1e-8) -> torch.Tensor:
    """Same as `fuse`, for candidates of many query frames at once.

    owner[i] is the query keyframe that candidate i belongs to.
    """
    wgt = (c_f.view(-1, 1, 1) * c_sp).unsqueeze(1)
    num = features.new_zeros((n_frames,) + features.shape[1:]).index_add(0, owner, wgt * features)
    den = wgt.new_zeros((n_frames, 1) + wgt.shape[2:]).index_add(0, owner, wgt)
    return num / (den + eps)


class Decoder(nn.Module):
    """Progressive x2 upsampling from the token grid to frame resolution.

    A 1x1 projection of the query RGB is concatenated at the middle stage and
    at the final stage.
    """

    def __init__(self, in_ch: int, grid: int, frame: int, widths: list[int] | None = None, rgb_ch: int = 16):
        super().__init__()
        ratio = frame // grid
        if frame % grid or ratio & (ratio - 1) or ratio < 2:
            raise ValueError(f"cannot reach {frame} from {grid} by x2 stages")
        n = int(math.log2(ratio))
        widths = widths or [max(16, in_ch // 2 ** (i // 2)) for i in range(n)]
        if len(widths) != n:
            raise ValueError(f"need {n} stage widths, got {len(widths)}")
        self.inject = sorted({(n - 1) // 2, n - 1})
        self.rgb = nn.ModuleDict({str(i): nn.Conv2d(3, rgb_ch, 1) for i in self.inject})
        convs = []
        prev = in_ch
        for i, wd in enumerate(widths):
            convs.append(nn.Conv2d(prev + (rgb_ch if i in self.inject else 0), wd, 3, padding=1))
            prev = wd
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(prev, 1, 1)
        self.frame = frame

    def stage_sizes(self, grid: int) -> list[int]:
        return [grid * 2 ** (i + 1) for i in range(len(self.convs))]

    def forward(self, fused: torch.Tensor, rgb: torch.Tensor) -> torch.Tensor:
        """fused [T, C, g, g], rgb [T, 3, H, W] (normalized) -> logits [T, 1, H, W]."""
        x = fused
        for i, conv in enumerate(self.convs):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i in self.inject:
                size = x.shape[-1]
                img = rgb if size == rgb.shape[-1] else F.adaptive_avg_pool2d(rgb, x.shape[-2:])
                x = torch.cat([x, self.rgb[str(i)](img)], dim=1)
            x = torch.relu(conv(x))
        return self.head(x)


def predict_mask(logits: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Binary mask: sigmoid(logit) > tau, strictly."""
    if not 0 < tau < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    return (torch.sigmoid(logits) > tau).to(torch.uint8)
