"""Patch-level correspondence: local correlation, soft-argmax warping, change features."""

from __future__ import annotations

import torch
import torch.nn as nn


def window_offsets(k: int) -> list[tuple[int, int]]:
    """(dx, dy) offsets of a k x k window, row-major with dy outer."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {k}")
    r = (k - 1) // 2
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def offset_validity(k: int, h: int, w: int, device=None) -> torch.Tensor:
    """[k*k, h, w] bool: whether cell + offset stays on the grid."""
    ys = torch.arange(h, device=device).view(h, 1)
    xs = torch.arange(w, device=device).view(1, w)
    masks = [((xs + dx >= 0) & (xs + dx < w) & (ys + dy >= 0) & (ys + dy < h)) for dx, dy in window_offsets(k)]
    return torch.stack(masks)


def local_correlation(q: torch.Tensor, r: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Dot products <q(x,y), r(x+dx, y+dy)> over a k x k window.

    q, r: [B, D, h, w]. Returns logits [B, k*k, h, w] (-inf off-grid) and the
    validity mask [k*k, h, w].
    """
    if q.shape != r.shape:
        raise ValueError(f"grid shapes differ: {tuple(q.shape)} vs {tuple(r.shape)}")
    offsets = window_offsets(k)
    rad = (k - 1) // 2
    h, w = q.shape[-2:]
    rp = nn.functional.pad(r, (rad, rad, rad, rad))
    logits = torch.stack(
        [(q * rp[:, :, rad + dy : rad + dy + h, rad + dx : rad + dx + w]).sum(1) for dx, dy in offsets], dim=1
    )
    valid = offset_validity(k, h, w, q.device)
    return logits.masked_fill(~valid, float("-inf")), valid


def patch_match(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the window offsets; masked offsets get probability 0."""
    return torch.softmax(logits, dim=1)


def expected_displacement(P: torch.Tensor, k: int) -> torch.Tensor:
    """[B, k*k, h, w] -> [B, 2, h, w] expected (dx, dy) in cell units."""
    off = torch.tensor(window_offsets(k), dtype=P.dtype, device=P.device)  # [k*k, 2]
    return torch.einsum("bihw,ic->bchw", P, off)


def warp(grid: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of grid at (x + dx, y + dy), clamped to the border.

    grid [B, D, h, w], disp [B, 2, h, w]. Integer displacements reproduce the
    source values exactly.
    """
    b, d, h, w = grid.shape
    ys = torch.arange(h, dtype=disp.dtype, device=disp.device).view(1, h, 1)
    xs = torch.arange(w, dtype=disp.dtype, device=disp.device).view(1, 1, w)
    x = (xs + disp[:, 0]).clamp(0, w - 1)
    y = (ys + disp[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)
    flat = grid.reshape(b, d, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, d, h * w)
        return flat.gather(2, idx).view(b, d, h, w)

    top = gather(y0i, x0i) * (1 - wx) + gather(y0i, x1i) * wx
    bottom = gather(y1i, x0i) * (1 - wx) + gather(y1i, x1i) * wx
    return top * (1 - wy) + bottom * wy


def cosine_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-cell cosine over channels, [B, 1, h, w]; 0 where either norm vanishes."""
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    denom = na * nb
    ok = denom > 0
    safe = torch.where(ok, denom, torch.ones_like(denom))
    return torch.where(ok, (a * b).sum(1, keepdim=True) / safe, torch.zeros_like(denom))


class ChangeHead(nn.Module):
    """Shared 1x1 reduction, then [q, r, q - r, cos] -> 3x3 conv -> C channels."""

    def __init__(self, dim: int, reduced: int, out: int):
        super().__init__()
        self.reduce = nn.Conv2d(dim, reduced, 1)
        self.fuse = nn.Conv2d(3 * reduced + 1, out, 3, padding=1)

    def features(self, q: torch.Tensor, r_warped: torch.Tensor) -> torch.Tensor:
        rq, rr = self.reduce(q), self.reduce(r_warped)
        return torch.cat([rq, rr, rq - rr, cosine_map(rq, rr)], dim=1)

    def forward(self, q: torch.Tensor, r_warped: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.fuse(self.features(q, r_warped)))
