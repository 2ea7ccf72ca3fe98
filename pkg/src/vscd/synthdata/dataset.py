"""On-disk pair format and loaders."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..pnm import read_mask, read_ppm


@dataclass
class VideoClip:
    """Ordered uint8 RGB frames [T, H, W, 3] of one recording."""

    frames: np.ndarray
    role: str = "query"
    source: str = ""

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"clip frames must be [T, H, W, 3], got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetPair:
    pair_id: str
    reference: VideoClip
    query: VideoClip
    masks: np.ndarray  # [T_q, H, W] uint8 in {0,1}
    meta: dict = field(default_factory=dict)

    @property
    def change_count(self) -> int:
        return int(self.meta.get("change_count", 0))


def _read_clip(folder: Path, role: str) -> VideoClip:
    files = sorted(folder.glob("frame_*.ppm"))
    if not files:
        raise FileNotFoundError(f"no frames in {folder}")
    return VideoClip(np.stack([read_ppm(f) for f in files]), role=role, source=str(folder))


def load_pair(path: str | Path, with_masks: bool = True) -> DatasetPair:
    path = Path(path)
    meta = json.loads((path / "pair.json").read_text())
    ref = _read_clip(path / "ref", "reference")
    query = _read_clip(path / "query", "query")
    if with_masks:
        files = sorted((path / "masks").glob("mask_*.pgm"))
        if len(files) != len(query):
            raise FileNotFoundError(f"{path}: {len(files)} masks for {len(query)} query frames")
        masks = np.stack([read_mask(f) for f in files])
    else:
        masks = np.zeros((0,) + query.frames.shape[1:3], dtype=np.uint8)
    return DatasetPair(meta["pair_id"], ref, query, masks, meta)


def load_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def manifest_hash(root: str | Path) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def pair_dirs(root: str | Path, split: str | None = None) -> list[Path]:
    """Pair directories in manifest order, optionally filtered by split."""
    root = Path(root)
    manifest = load_manifest(root)
    return [root / "pairs" / p["pair_id"] for p in manifest["pairs"] if split is None or p.get("split") == split]
