"""Desk-scale end-to-end experiment: trained model vs untrained model vs pixel differencing.

One call generates (or reuses) a small layout-disjoint dataset for a seed,
scores the naive baseline and the untrained network, then trains and scores
the full model and any requested module ablations.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .baseline import calibrate_threshold, evaluate_baseline
from .evaluator import evaluate_pair, mean_f1
from .model import ModelConfig, VSCDNet
from .synthdata import GenConfig, generate_dataset, load_manifest, load_pair, pair_dirs
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no_at": {"use_at": False},
    "no_csp": {"use_csp": False},
    "no_cf": {"use_cf": False},
    "no_cf_csp": {"use_cf": False, "use_csp": False},
}


def desk_gen_config(seed: int) -> GenConfig:
    """24 pairs at 128x128: 8 training layouts and 4 held-out layouts, two scenes each."""
    return GenConfig(layouts=12, scenes=2, seed=seed, test_layouts=4, frame_size=128,
                     change_bins=[(4, 6), (7, 10), (11, 14)], change_proportions=[1 / 3, 1 / 3, 1 / 3])


@dataclass
class DeskConfig:
    epochs: int = 100
    T_key: int = 8
    tau: float = 0.5
    augment: bool = True
    model: dict = field(default_factory=dict)  # ModelConfig overrides shared by all variants


def _score(model: VSCDNet, pairs, tau: float, T_key: int) -> float:
    model.eval()
    return mean_f1([s for p in pairs for s in evaluate_pair(model, p, tau, T_key).scores])


def run_seed(seed: int, workdir: str | Path, variants: list[str] | None = None, cfg: DeskConfig | None = None,
             gen: GenConfig | None = None, done: dict | None = None, on_variant=None) -> dict:
    """Score baseline, untrained and trained variants for one seed.

    ``done`` holds variant results from an earlier call; those are not retrained.
    ``on_variant(out)`` is called after every finished variant.
    """
    cfg = cfg or DeskConfig()
    variants = variants or ["full"]
    workdir = Path(workdir)
    data = workdir / f"data_seed{seed}"
    if not (data / "manifest.json").is_file():
        generate_dataset(gen or desk_gen_config(seed), data)
    manifest = load_manifest(data)
    train_pairs = [load_pair(d) for d in pair_dirs(data, "train")]
    test_pairs = [load_pair(d) for d in pair_dirs(data, "test")]

    def build(patch: dict) -> VSCDNet:
        mc = ModelConfig.from_dict({**ModelConfig().to_dict(), **cfg.model, **patch})
        mc.encoder.norm_mean = list(manifest["norm"]["mean"])
        mc.encoder.norm_std = list(manifest["norm"]["std"])
        torch.manual_seed(seed)
        return VSCDNet(mc)

    th = calibrate_threshold(train_pairs, cfg.T_key)
    out = {
        "seed": seed,
        "train_pairs": len(train_pairs),
        "test_pairs": len(test_pairs),
        "baseline_threshold": th,
        "baseline": mean_f1([s for p in test_pairs for s in evaluate_baseline(p, th, cfg.T_key).scores]),
        "untrained": _score(build({}), test_pairs, cfg.tau, cfg.T_key),
        "variants": dict(done or {}),
    }
    for name in variants:
        if name in out["variants"]:
            continue
        model = build(VARIANTS[name])
        t0 = time.process_time()
        ckpt = train(train_pairs, model, TrainConfig(T_key=cfg.T_key, epochs=cfg.epochs, seed=seed, augment=cfg.augment))
        cpu = time.process_time() - t0
        out["variants"][name] = {
            "test_f1": _score(model, test_pairs, cfg.tau, cfg.T_key),
            "train_cpu_seconds": cpu,
            "final_loss": ckpt.history[-1]["loss"] if ckpt.history else None,
        }
        log.info("seed %d %s: %s", seed, name, out["variants"][name])
        if on_variant:
            on_variant(out)
    return out


def run_seeds(seeds: list[int], workdir: str | Path, variants: list[str] | None = None,
              cfg: DeskConfig | None = None, cache: str | Path | None = None,
              gen: GenConfig | None = None) -> list[dict]:
    """Run several seeds, reusing per-seed results stored in ``cache`` when their settings match."""
    cfg = cfg or DeskConfig()
    variants = variants or ["full"]
    stored = json.loads(Path(cache).read_text()) if cache and Path(cache).is_file() else {}
    key = json.dumps(asdict(cfg), sort_keys=True)
    results = []

    def save(seed, result):
        stored[str(seed)] = {"settings": key, "result": result}
        if cache:
            Path(cache).write_text(json.dumps(stored, indent=1))

    for seed in seeds:
        entry = stored.get(str(seed))
        done = entry["result"]["variants"] if entry and entry.get("settings") == key else {}
        if set(variants) - set(done):
            result = run_seed(seed, workdir, variants, cfg, replace(gen, seed=seed) if gen else None, done=done, on_variant=lambda out, s=seed: save(s, out))
        else:
            result = entry["result"]
        results.append(result)
    return results
