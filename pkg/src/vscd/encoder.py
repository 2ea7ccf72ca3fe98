"""Frame encoders producing patch-token grids and compact frame descriptors."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("tiny-vit", "conv-pyramid", "precomputed")


@dataclass
class EncoderConfig:
    patch_size: int = 8
    token_dim: int = 64
    frame_size: int = 128
    backbone_kind: str = "tiny-vit"
    frozen: bool = False
    at_heads: int = 8
    at_layers: int = 1
    at_layernorm: bool = False
    at_residual: bool = False
    vit_depth: int = 2
    vit_heads: int = 4
    norm_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    norm_std: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25])

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch_size

    def validate(self) -> None:
        if self.backbone_kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone_kind!r}")
        if self.frame_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide frame size {self.frame_size}")
        if self.token_dim < 8:
            raise ValueError("token_dim must be >= 8")
        if self.token_dim % self.at_heads:
            raise ValueError(f"at_heads={self.at_heads} does not divide token_dim={self.token_dim}")
        if self.backbone_kind == "tiny-vit" and self.vit_depth and self.token_dim % self.vit_heads:
            raise ValueError(f"vit_heads={self.vit_heads} does not divide token_dim={self.token_dim}")
        if self.backbone_kind == "conv-pyramid" and self.patch_size & (self.patch_size - 1):
            raise ValueError("conv-pyramid needs a power-of-two patch size")
        if self.at_layers < 1:
            raise ValueError("at_layers must be >= 1")


class TinyViT(nn.Module):
    """Linear patch embedding + learned positions + a few pre-norm blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d, p = cfg.token_dim, cfg.patch_size
        self.embed = nn.Conv2d(3, d, p, stride=p)
        self.pos = nn.Parameter(torch.randn(1, d, cfg.grid, cfg.grid) * 0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(d, cfg.vit_heads, 2 * d, dropout=0.0, activation="gelu",
                                       batch_first=True, norm_first=True)
            for _ in range(cfg.vit_depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.embed(x) + self.pos
        if not self.blocks:
            return x
        b, d, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            seq = blk(seq)
        return seq.transpose(1, 2).reshape(b, d, h, w)


class ConvPyramid(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        n = int(math.log2(cfg.patch_size))
        chans = [3] + [max(16, cfg.token_dim // 2 ** (n - i - 1)) for i in range(n)]
        layers: list[nn.Module] = []
        for i in range(n):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.ReLU()]
        layers.append(nn.Conv2d(chans[-1], cfg.token_dim, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class AlignmentTokenHead(nn.Module):
    """A learnable token that cross-attends over the patch tokens.

    The last output projection starts at zero, so the head contributes
    nothing until training moves it.
    """

    def __init__(self, dim: int, heads: int, layers: int = 1, layernorm: bool = False, residual: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} does not divide dim={dim}")
        self.heads, self.residual = heads, residual
        self.token = nn.Parameter(torch.randn(dim) * 0.02)
        self.q = nn.ModuleList(nn.Linear(dim, dim) for _ in range(layers))
        self.k = nn.ModuleList(nn.Linear(dim, dim) for _ in range(layers))
        self.v = nn.ModuleList(nn.Linear(dim, dim) for _ in range(layers))
        self.o = nn.ModuleList(nn.Linear(dim, dim) for _ in range(layers))
        self.norm = nn.ModuleList(nn.LayerNorm(dim) if layernorm else nn.Identity() for _ in range(layers))
        nn.init.zeros_(self.o[-1].weight)
        nn.init.zeros_(self.o[-1].bias)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """grid [B, D, h, w] -> [B, D]."""
        b, d = grid.shape[:2]
        if self.token.shape[0] != d:
            raise ValueError(f"token dim {self.token.shape[0]} != grid channels {d}")
        tokens = grid.flatten(2).transpose(1, 2)  # [B, N, D]
        x = self.token.expand(b, d)
        hd = d // self.heads
        for q, k, v, o, norm in zip(self.q, self.k, self.v, self.o, self.norm):
            kv = norm(tokens)
            qh = q(norm(x)).view(b, self.heads, 1, hd)
            kh = k(kv).view(b, -1, self.heads, hd).transpose(1, 2)
            vh = v(kv).view(b, -1, self.heads, hd).transpose(1, 2)
            att = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(hd), dim=-1)
            out = o((att @ vh).reshape(b, d))
            x = x + out if self.residual else out
        return x


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, use_at: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.use_at = use_at
        if cfg.backbone_kind == "tiny-vit":
            self.backbone: nn.Module | None = TinyViT(cfg)
        elif cfg.backbone_kind == "conv-pyramid":
            self.backbone = ConvPyramid(cfg)
        else:
            self.backbone = None
        self.at = AlignmentTokenHead(cfg.token_dim, cfg.at_heads, cfg.at_layers, cfg.at_layernorm, cfg.at_residual)
        self.register_buffer("mean", torch.tensor(cfg.norm_mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.norm_std).view(1, 3, 1, 1))
        if cfg.frozen and self.backbone is not None:
            self.backbone.requires_grad_(False)

    def normalize(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - self.mean) / self.std

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """[T, 3, H, W] in [0, 1] -> token grids [T, D, H/p, W/p]."""
        h, w = frames.shape[-2:]
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"frame {h}x{w} not divisible by patch size {p}")
        if not torch.isfinite(frames).all():
            raise ValueError("non-finite pixel values")
        if self.backbone is None:
            raise RuntimeError("precomputed backbone: pass token grids instead of frames")
        return self.backbone(self.normalize(frames))

    def frame_descriptor(self, grid: torch.Tensor) -> torch.Tensor:
        """Spatial mean of the tokens plus the alignment-token embedding."""
        v = grid.mean(dim=(2, 3))
        if self.use_at:
            v = v + self.at(grid)
        return v


def write_token_file(path: str | Path, grids: np.ndarray, indices: list[int] | None = None) -> None:
    """One record per frame: int32 (index, D, h, w) then row-major float32."""
    grids = np.asarray(grids, dtype="<f4")
    indices = list(range(len(grids))) if indices is None else indices
    with open(path, "wb") as fh:
        for idx, g in zip(indices, grids):
            d, h, w = g.shape
            fh.write(struct.pack("<4i", idx, d, h, w))
            fh.write(g.tobytes())


def read_token_file(path: str | Path) -> tuple[list[int], np.ndarray]:
    data = Path(path).read_bytes()
    pos, idx, out = 0, [], []
    while pos < len(data):
        i, d, h, w = struct.unpack_from("<4i", data, pos)
        pos += 16
        n = d * h * w
        if pos + 4 * n > len(data):
            raise ValueError(f"{path}: truncated record for frame {i}")
        out.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(d, h, w))
        idx.append(i)
        pos += 4 * n
    return idx, np.stack(out).astype(np.float32)
