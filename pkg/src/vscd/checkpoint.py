"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the concatenated little-endian float32 tensor payloads in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, VSCDNet

MAGIC = b"VSCDCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: dict
    train_config: dict = field(default_factory=dict)
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: VSCDNet, train_config: dict | None = None, step: int = 0,
                   history: list[dict] | None = None) -> Checkpoint:
        tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
        return cls(tensors, model.cfg.to_dict(), dict(train_config or {}), step, list(history or []))

    def build_model(self) -> VSCDNet:
        model = VSCDNet(ModelConfig.from_dict(self.model_config))
        self.load_into(model)
        return model

    def load_into(self, model: VSCDNet) -> None:
        state = model.state_dict()
        if set(state) != set(self.tensors):
            missing = sorted(set(state) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(state))
            raise CheckpointError(f"tensor names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, ref in state.items():
            if tuple(ref.shape) != self.tensors[name].shape:
                raise CheckpointError(f"{name}: shape {self.tensors[name].shape} != model {tuple(ref.shape)}")
        model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in self.tensors.items()})


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        nbytes = arr.size * 4
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": "vscd-checkpoint",
        "version": VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "history": ckpt.history,
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(raw)) + raw)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, expected_config: ModelConfig | dict | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {header.get('version')} unsupported (expected {VERSION})")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        count = e["nbytes"] // 4
        tensors[e["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(e["shape"]).astype(np.float32)
    if base + sum(e["nbytes"] for e in header["tensors"]) != len(data):
        raise CheckpointError(f"{path}: trailing or missing payload bytes")
    if expected_config is not None:
        want = expected_config.to_dict() if isinstance(expected_config, ModelConfig) else expected_config
        if json.loads(json.dumps(want)) != header["model_config"]:
            raise CheckpointError(f"{path}: model config does not match the checkpoint")
    return Checkpoint(tensors, header["model_config"], header["train_config"], header["step"], header["history"])
