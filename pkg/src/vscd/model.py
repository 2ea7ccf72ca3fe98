"""The three-stage change detection network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn

from .alignment import RefineHead, candidate_set, segment_proposals, similarity_grid, soft_matching
from .correspondence import ChangeHead, expected_displacement, local_correlation, patch_match, warp
from .encoder import Encoder, EncoderConfig
from .fusion import Decoder, fuse_batched, patch_confidence


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tau_f: float = 0.5
    delta: int = 2
    min_len: int = 2
    L_max: int = 5
    split_quantile: float = 0.0
    K: int = 4
    cap: int = 6
    k: int = 5
    reduced_ch: int | None = None  # defaults to D / 2
    change_ch: int = 32
    c_p: float = 0.5
    c: float = 0.5
    eps: float = 1e-8
    decoder_widths: list[int] | None = None
    rgb_ch: int = 16
    refine_hidden: int = 8
    use_at: bool = True
    use_cf: bool = True
    use_csp: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        enc = d.pop("encoder", {})
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        enc_names = {f.name for f in fields(EncoderConfig)}
        if set(enc) - enc_names:
            raise ValueError(f"unknown encoder keys: {sorted(set(enc) - enc_names)}")
        return cls(encoder=EncoderConfig(**enc), **d)

    def validate(self) -> None:
        self.encoder.validate()
        if self.tau_f <= 0:
            raise ValueError("tau_f must be positive")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("k must be a positive odd integer")
        if self.cap < 1 or self.K < 1:
            raise ValueError("K and cap must be >= 1")
        if self.delta < 0 or not 1 <= self.min_len <= self.L_max:
            raise ValueError("need delta >= 0 and 1 <= min_len <= L_max")
        if self.c_p < 0 or self.c < 0:
            raise ValueError("confidence weights must be non-negative")


class VSCDNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc = cfg.encoder
        self.encoder = Encoder(enc, use_at=cfg.use_at)
        self.refine = RefineHead(cfg.refine_hidden)
        reduced = cfg.reduced_ch or enc.token_dim // 2
        self.change = ChangeHead(enc.token_dim, reduced, cfg.change_ch)
        self.decoder = Decoder(cfg.change_ch, enc.grid, enc.frame_size, cfg.decoder_widths, cfg.rgb_ch)

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "backbone": [] if self.encoder.backbone is None else list(self.encoder.backbone.parameters()),
            "alignment_token": list(self.encoder.at.parameters()),
            "refine": list(self.refine.parameters()),
            "change": list(self.change.parameters()),
            "decoder": list(self.decoder.parameters()),
        }
        return {k: [p for p in v if p.requires_grad] for k, v in groups.items()}

    def align(self, q_tokens: torch.Tensor, r_tokens: torch.Tensor) -> dict:
        vq = self.encoder.frame_descriptor(q_tokens)
        vr = self.encoder.frame_descriptor(r_tokens)
        S = similarity_grid(vq, vr)
        A = self.refine(S)
        P = soft_matching(A, self.cfg.tau_f)
        return {"S": S, "A": A, "P": P}

    def candidates(self, P: torch.Tensor, A: torch.Tensor):
        c = self.cfg
        P_np, A_np = P.detach().cpu().numpy(), A.detach().cpu().numpy()
        segs = segment_proposals(P_np, A_np, c.delta, c.min_len, c.L_max, c.split_quantile)
        return segs, [candidate_set(t, segs, P_np, c.K, c.cap) for t in range(P_np.shape[0])]

    def forward(self, ref_frames: torch.Tensor, query_frames: torch.Tensor,
                ref_tokens: torch.Tensor | None = None, query_tokens: torch.Tensor | None = None) -> dict:
        """ref_frames, query_frames: [T_key, 3, H, W] in [0, 1].

        Token grids may be passed directly (precomputed backbone). Returns
        logits [T_key, 1, H, W] plus the intermediate alignment products.
        """
        c = self.cfg
        enc = self.encoder
        if ref_tokens is None:
            ref_tokens = enc.encode_frames(ref_frames)
        if query_tokens is None:
            query_tokens = enc.encode_frames(query_frames)
        out = self.align(query_tokens, ref_tokens)
        P = out["P"]
        segs, cands = self.candidates(P, out["A"])

        owner = torch.tensor([cs.t for cs in cands for _ in cs.candidates], device=P.device)
        ref_idx = torch.tensor([s for cs in cands for s in cs.candidates], device=P.device)
        q = query_tokens[owner]
        r = ref_tokens[ref_idx]
        vol, _ = local_correlation(q, r, c.k)
        P_patch = patch_match(vol)
        disp = expected_displacement(P_patch, c.k)
        feats = self.change(q, warp(r, disp))

        c_f = P[owner, ref_idx] if c.use_cf else torch.ones_like(P[owner, ref_idx])
        c_sp = patch_confidence(P_patch, c.k, c.c_p, c.c) if c.use_csp else torch.ones_like(P_patch[:, 0])
        fused = fuse_batched(feats, c_f, c_sp, owner, query_tokens.shape[0], c.eps)
        logits = self.decoder(fused, enc.normalize(query_frames))
        out.update(logits=logits, segments=segs, candidates=cands, displacement=disp, c_sp=c_sp, fused=fused)
        return out


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 [T, H, W, 3] -> float [T, 3, H, W] in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(frames)).to(dtype).permute(0, 3, 1, 2) / 255.0
