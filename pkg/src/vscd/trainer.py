"""Keyframe sampling, the mask loss, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .model import VSCDNet, frames_to_tensor
from .synthdata.dataset import DatasetPair

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    T_key: int = 8
    batch_size: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 30
    seed: int = 0
    freeze_encoder: bool = False
    dice_smooth: float = 1.0
    grad_clip: float = 0.0
    augment: bool = False  # random dihedral transform + channel shuffle, shared by both videos

    def validate(self) -> None:
        if self.T_key < 1:
            raise ValueError("T_key must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.dice_smooth <= 0:
            raise ValueError("dice smoothing must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class TrainingError(RuntimeError):
    pass


def sample_keyframes(T: int, T_key: int) -> list[int]:
    """Centre-aligned uniform indices floor((i + 0.5) T / T_key); repeats when T < T_key."""
    if T < 1:
        raise ValueError("cannot sample keyframes from an empty clip")
    if T_key < 1:
        raise ValueError("T_key must be >= 1")
    return [((2 * i + 1) * T) // (2 * T_key) for i in range(T_key)]


def mask_loss(logits: torch.Tensor, masks: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Mean over keyframes of BCE-with-logits + soft Dice.

    logits, masks: [T, ...] with matching shapes; masks must be binary.
    """
    if logits.shape != masks.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(masks.shape)}")
    if not ((masks == 0) | (masks == 1)).all():
        raise ValueError("mask must be binary")
    masks = masks.to(logits.dtype)
    z = logits.flatten(1)
    g = masks.flatten(1)
    bce = F.binary_cross_entropy_with_logits(z, g, reduction="none").mean(1)
    p = torch.sigmoid(z)
    dice = 1 - (2 * (p * g).sum(1) + smooth) / (p.sum(1) + g.sum(1) + smooth)
    return (bce + dice).mean()


def augment_pair(ref: torch.Tensor, query: torch.Tensor, masks: torch.Tensor, rng: np.random.Generator):
    """Apply one random rot90/flip and RGB channel permutation to a whole pair.

    The same transform is used for both videos and the masks, so the change
    labels stay valid.
    """
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    perm = torch.from_numpy(rng.permutation(3))
    out = []
    for x in (ref, query, masks):
        x = torch.rot90(x, k, dims=(-2, -1))
        if flip:
            x = torch.flip(x, dims=(-1,))
        out.append(x)
    return out[0][:, perm].contiguous(), out[1][:, perm].contiguous(), out[2].contiguous()


def pair_tensors(pair: DatasetPair, T_key: int, dtype=torch.float32):
    """Keyframe tensors (ref, query, masks, query indices) for one pair."""
    ri = sample_keyframes(len(pair.reference), T_key)
    qi = sample_keyframes(len(pair.query), T_key)
    ref = frames_to_tensor(pair.reference.frames[ri], dtype)
    query = frames_to_tensor(pair.query.frames[qi], dtype)
    masks = torch.from_numpy(pair.masks[qi]).to(dtype).unsqueeze(1) if len(pair.masks) else None
    return ref, query, masks, qi


def train(pairs: list[DatasetPair], model: VSCDNet, cfg: TrainConfig, log_path: str | Path | None = None,
          step_callback=None) -> Checkpoint:
    """AdamW over the non-frozen parameters; one shuffled pass per epoch."""
    cfg.validate()
    if not pairs:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    if cfg.freeze_encoder and model.encoder.backbone is not None:
        model.encoder.backbone.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas)
    data = [pair_tensors(p, cfg.T_key) for p in pairs]
    history: list[dict] = []
    step = 0
    t0 = time.time()
    log_fh = open(log_path, "w") if log_path else None
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
            for b in range(0, len(order), cfg.batch_size):
                batch = order[b : b + cfg.batch_size]
                opt.zero_grad(set_to_none=True)
                total = 0.0
                for i in batch:
                    ref, query, masks, _ = data[i]
                    if cfg.augment:
                        ref, query, masks = augment_pair(ref, query, masks, np.random.default_rng([cfg.seed, epoch, int(i)]))
                    loss = mask_loss(model(ref, query)["logits"], masks, cfg.dice_smooth) / len(batch)
                    if not torch.isfinite(loss):
                        raise TrainingError(f"non-finite loss at step {step}, pair {pairs[i].pair_id}")
                    loss.backward()
                    total += float(loss.detach())
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                rec = {"step": step, "epoch": epoch, "loss": total, "lr": cfg.lr, "time": round(time.time() - t0, 3)}
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if step_callback:
                    step_callback(rec)
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    log.info("trained %d steps in %.1fs", step, time.time() - t0)
    return Checkpoint.from_model(model, asdict(cfg), step, history)
