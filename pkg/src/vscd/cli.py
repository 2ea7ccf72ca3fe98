"""Command line entry point: gen, train, infer, eval, sweep, report."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluator import BinConfig, PairResult, build_report, evaluate_pair, score_probabilities, mean_f1, write_report
from .model import ModelConfig, VSCDNet
from .pnm import write_mask, write_planes
from .synthdata import GenConfig, generate_dataset, load_manifest, load_pair, manifest_hash, pair_dirs
from .trainer import TrainConfig, TrainingError, pair_tensors, train

log = logging.getLogger("vscd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags, config keys or paths; maps to exit code 2."""


def default_config() -> dict:
    return {
        "gen": json.loads(json.dumps(asdict(GenConfig()))),
        "model": ModelConfig().to_dict(),
        "train": json.loads(json.dumps(asdict(TrainConfig()))),
        "eval": {"threshold": 0.5, "T_key": 8, "split": None, "exclude_empty": False, "taxonomy_ratio": 2.0,
                 "bins": json.loads(json.dumps(asdict(BinConfig())))},
    }


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge(base: dict, patch: dict, path: str = "") -> dict:
    """Recursive update that rejects keys the base does not know."""
    for key, val in patch.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def set_dotted(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(text)


def load_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    for a in args.set or []:
        set_dotted(cfg, a)
    if args.seed is not None:
        cfg["gen"]["seed"] = cfg["train"]["seed"] = args.seed
    if getattr(args, "tkey", None) is not None:
        cfg["train"]["T_key"] = cfg["eval"]["T_key"] = args.tkey
    if getattr(args, "threshold", None) is not None:
        cfg["eval"]["threshold"] = args.threshold
    return cfg


def build_configs(cfg: dict):
    try:
        gen = GenConfig.from_dict(cfg["gen"])
        model = ModelConfig.from_dict(cfg["model"])
        tr = TrainConfig.from_dict(cfg["train"])
        gen.validate()
        model.validate()
        tr.validate()
        bins = BinConfig.from_dict(cfg["eval"]["bins"])
        if not 0 < cfg["eval"]["threshold"] < 1:
            raise ValueError("threshold must lie in (0, 1)")
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return gen, model, tr, bins


def write_effective(out: Path, cfg: dict, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"effective_config.{command}.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


def data_root(args) -> Path:
    root = args.data or os.environ.get("VSCD_DATA_ROOT")
    if not root:
        raise UsageError("no dataset given: pass --data or set VSCD_DATA_ROOT")
    root = Path(root)
    if not (root / "manifest.json").is_file():
        raise UsageError(f"{root} is not a dataset directory (manifest.json missing)")
    return root


def with_dataset_norm(model_cfg: ModelConfig, root: Path) -> ModelConfig:
    manifest = load_manifest(root)
    size = manifest.get("config", {}).get("frame_size")
    if size is not None and size != model_cfg.encoder.frame_size:
        raise UsageError(f"dataset frames are {size}px but model.encoder.frame_size is {model_cfg.encoder.frame_size}")
    norm = manifest.get("norm")
    if norm:
        model_cfg.encoder.norm_mean = list(norm["mean"])
        model_cfg.encoder.norm_std = list(norm["std"])
    return model_cfg


def select_pairs(root: Path, split: str | None) -> list[Path]:
    dirs = pair_dirs(root, split)
    if not dirs and split == "train":
        dirs = pair_dirs(root)  # unsplit dataset: train on everything
    return dirs


# -- commands ---------------------------------------------------------------

def cmd_gen(args, cfg: dict) -> int:
    if args.layouts is not None:
        cfg["gen"]["layouts"] = args.layouts
    if args.scenes is not None:
        cfg["gen"]["scenes"] = args.scenes
    gen, *_ = build_configs(cfg)
    out = Path(args.out)
    try:
        manifest = generate_dataset(gen, out)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    except ValueError as exc:  # strata cannot be realised etc.
        raise UsageError(str(exc)) from exc
    write_effective(out, cfg, "gen")
    print(f"{len(manifest['pairs'])} pairs -> {out}")
    print(f"change-count strata: {manifest['strata']['change_count']}")
    print(f"query-length strata: {manifest['strata']['query_length']}")
    print(f"manifest sha256: {manifest_hash(out)}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    root = data_root(args)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    _, model_cfg, tr, _ = build_configs(cfg)
    model_cfg = with_dataset_norm(model_cfg, root)
    cfg["model"] = model_cfg.to_dict()
    out = Path(args.out)
    write_effective(out, cfg, "train")
    pairs = [load_pair(d) for d in select_pairs(root, args.split)]
    if not pairs:
        raise UsageError(f"no pairs found under {root}")
    torch.manual_seed(tr.seed)
    model = VSCDNet(model_cfg)
    ckpt = train(pairs, model, tr, log_path=out / "train_log.jsonl")
    ckpt.train_config["dataset_manifest"] = manifest_hash(root)
    save_checkpoint(out / "model.ckpt", ckpt)
    last = ckpt.history[-1]["loss"] if ckpt.history else float("nan")
    print(f"trained {ckpt.step} steps on {len(pairs)} pairs, final loss {last:.4f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    model = load_checkpoint(path).build_model()
    model.eval()
    return model


def cmd_infer(args, cfg: dict) -> int:
    model = _load_model(args.checkpoint)
    pair_dir = Path(args.pair)
    if not (pair_dir / "pair.json").is_file():
        raise UsageError(f"{pair_dir} is not a pair directory")
    tau = cfg["eval"]["threshold"]
    if not 0 < tau < 1:
        raise UsageError("threshold must lie in (0, 1)")
    T_key = cfg["eval"]["T_key"]
    pair = load_pair(pair_dir, with_masks=False)
    ref, query, _, qi = pair_tensors(pair, T_key)
    with torch.no_grad():
        logits = model(ref, query)["logits"][:, 0]
    probs = torch.sigmoid(logits).numpy()
    out = Path(args.out)
    write_effective(out, cfg, "infer")
    for i, p in enumerate(probs):
        write_mask(out / f"mask_{i:05d}.pgm", (p > tau).astype(np.uint8))
    write_planes(out / "probabilities.bin", probs)
    (out / "keyframes.json").write_text(json.dumps({"pair_id": pair.pair_id, "query_indices": qi, "threshold": tau}))
    print(f"{len(probs)} masks -> {out}")
    return EXIT_OK


def save_result(path: Path, res: PairResult) -> None:
    np.savez_compressed(path, probs=res.probs.astype(np.float32), gt=res.gt, P=res.P,
                        query_indices=np.asarray(res.query_indices), meta=json.dumps(res.meta))


def load_result(path: Path, tau: float) -> PairResult:
    z = np.load(path)
    res = PairResult(path.stem, [], z["P"], z["probs"], z["gt"], z["query_indices"].tolist(), json.loads(str(z["meta"])))
    res.scores = score_probabilities(res, tau)
    return res


def slim_meta(meta: dict) -> dict:
    keep = ("pair_id", "change_count", "query_length", "ref_length", "layout_id", "split", "viewpoint_overlap")
    return {k: meta[k] for k in keep if k in meta}


def evaluate_dataset(model: VSCDNet, dirs: list[Path], tau: float, T_key: int, out: Path | None = None):
    results, failures = [], {}
    for d in dirs:
        try:
            pair = load_pair(d)
            res = evaluate_pair(model, pair, tau, T_key)
            res.meta = slim_meta(pair.meta)
        except (OSError, ValueError, RuntimeError) as exc:
            failures[d.name] = f"{type(exc).__name__}: {exc}"
            log.error("pair %s failed: %s", d.name, exc)
            continue
        results.append(res)
        if out is not None:
            save_result(out / f"{res.pair_id}.npz", res)
    return results, failures


def cmd_eval(args, cfg: dict) -> int:
    root = data_root(args)
    *_, bins = build_configs(cfg)
    ev = cfg["eval"]
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    write_effective(out, cfg, "eval")
    (out / "pairs").mkdir(exist_ok=True)
    dirs = pair_dirs(root, args.split if args.split is not None else ev["split"])
    results, failures = evaluate_dataset(model, dirs, ev["threshold"], ev["T_key"], out / "pairs")
    report = build_report(results, bins, ev["taxonomy_ratio"], ev["exclude_empty"], failures)
    report["threshold"] = ev["threshold"]
    write_report(report, out, results)
    print(f"mean F1 {report['mean_f1']:.4f} over {report['frames']} frames of {len(results)} pairs -> {out}")
    if failures:
        print(f"{len(failures)} pair(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


ABLATIONS = {
    "full": {},
    "no_at": {"use_at": False},
    "no_csp": {"use_csp": False},
    "no_cf": {"use_cf": False},
    "no_cf_csp": {"use_cf": False, "use_csp": False},
}
TRAIN_KEYS = {"T_key"}


def sweep_runs(grid: dict, ablations: bool) -> list[tuple[str, dict]]:
    """One-at-a-time variants: each run changes a single key (or one toggle set)."""
    runs = [("default", {})]
    for key, values in grid.items():
        for v in values:
            runs.append((f"{key}={json.dumps(v)}", {key: v}))
    if ablations:
        runs += [(name, patch) for name, patch in ABLATIONS.items() if patch]
    return runs


def _sweep_one(job) -> dict:
    name, patch, cfg, root, out = job
    cfg = copy.deepcopy(cfg)
    for key, val in patch.items():
        if key in TRAIN_KEYS:
            cfg["train"][key] = cfg["eval"][key] = val
        elif key in cfg["model"]:
            cfg["model"][key] = val
        elif key in cfg["train"]:
            cfg["train"][key] = val
        else:
            raise UsageError(f"sweep key {key!r} is neither a model nor a training key")
    _, model_cfg, tr, _ = build_configs(cfg)
    model_cfg = with_dataset_norm(model_cfg, Path(root))
    run_dir = Path(out) / "runs" / name.replace("/", "_")
    write_effective(run_dir, cfg, "sweep")
    train_pairs = [load_pair(d) for d in select_pairs(Path(root), "train")]
    torch.manual_seed(tr.seed)
    model = VSCDNet(model_cfg)
    ckpt = train(train_pairs, model, tr, log_path=run_dir / "train_log.jsonl")
    save_checkpoint(run_dir / "model.ckpt", ckpt)
    model.eval()
    test = pair_dirs(Path(root), "test") or pair_dirs(Path(root))
    results, failures = evaluate_dataset(model, test, cfg["eval"]["threshold"], cfg["eval"]["T_key"])
    f1 = mean_f1([s for r in results for s in r.scores])
    return {"run": name, "change": patch, "mean_f1": f1, "frames": sum(len(r.scores) for r in results),
            "failures": failures}


def cmd_sweep(args, cfg: dict) -> int:
    root = data_root(args)
    build_configs(cfg)
    grid = {}
    if args.grid:
        text = Path(args.grid).read_text() if Path(args.grid).is_file() else args.grid
        try:
            grid = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--grid: {exc}") from exc
        if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
            raise UsageError("--grid must map keys to lists of values")
    out = Path(args.out)
    write_effective(out, cfg, "sweep")
    jobs = [(name, patch, cfg, str(root), str(out)) for name, patch in sweep_runs(grid, args.ablations)]
    for _, patch, *_ in jobs:  # fail fast on bad keys before any training
        for key in patch:
            if key not in TRAIN_KEYS and key not in cfg["model"] and key not in cfg["train"]:
                raise UsageError(f"sweep key {key!r} is neither a model nor a training key")
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    (out / "sweep.json").write_text(json.dumps(rows, indent=1))
    lines = ["| Run | Mean F1 | Frames |", "|---|---|---|"]
    lines += [f"| {r['run']} | {100 * r['mean_f1']:.1f} | {r['frames']} |" for r in rows]
    (out / "sweep.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_RUNTIME if any(r["failures"] for r in rows) else EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    src = Path(args.eval_dir)
    files = sorted((src / "pairs").glob("*.npz"))
    if not files:
        raise UsageError(f"{src} holds no evaluation outputs (pairs/*.npz)")
    *_, bins = build_configs(cfg)
    ev = cfg["eval"]
    out = Path(args.out)
    write_effective(out, cfg, "report")
    results = [load_result(f, ev["threshold"]) for f in files]

    taus = np.round(np.linspace(0.05, 0.95, 19), 4)
    curve = [(float(t), mean_f1([s for r in results for s in score_probabilities(r, float(t))])) for t in taus]
    with open(out / "f1_vs_threshold.csv", "w") as fh:
        fh.write("threshold,mean_f1\n")
        fh.writelines(f"{t},{f:.6f}\n" for t, f in curve)

    anomaly_dir = out / "anomaly"
    anomaly_dir.mkdir(exist_ok=True)
    for r in results:
        with open(anomaly_dir / f"{r.pair_id}.csv", "w") as fh:
            fh.write("keyframe,query_frame,score,gt_fraction\n")
            for i, q in enumerate(r.query_indices):
                fh.write(f"{i},{q},{float(r.probs[i].mean()):.6f},{float(r.gt[i].mean()):.6f}\n")

    report = build_report(results, bins, ev["taxonomy_ratio"], ev["exclude_empty"])
    report["threshold"] = ev["threshold"]
    write_report(report, out, results)
    _plot(curve, results, out)
    print(f"report for {len(results)} pairs -> {out}")
    return EXIT_OK


def _plot(curve, results, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([c[0] for c in curve], [c[1] for c in curve], marker="o")
    ax.set_xlabel("threshold")
    ax.set_ylabel("mean frame F1")
    fig.tight_layout()
    fig.savefig(out / "f1_vs_threshold.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3))
    for r in results:
        ax.plot(r.query_indices, r.probs.reshape(len(r.probs), -1).mean(1), label=r.pair_id)
    ax.set_xlabel("query frame")
    ax.set_ylabel("anomaly score")
    if len(results) <= 10:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "anomaly_scores.png", dpi=100)
    plt.close(fig)


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with gen/model/train/eval sections")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. model.k=7")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vscd", description="Video scene change detection toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="render a synthetic dataset")
    g.add_argument("--layouts", type=int)
    g.add_argument("--scenes", type=int)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--data", help="dataset root (default: $VSCD_DATA_ROOT)")
    t.add_argument("--split", default="train")
    t.add_argument("--epochs", type=int)
    t.add_argument("--tkey", type=int)

    i = sub.add_parser("infer", parents=[common], help="write change masks for one pair")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--pair", required=True)
    i.add_argument("--threshold", type=float)
    i.add_argument("--tkey", type=int)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split")
    e.add_argument("--threshold", type=float)
    e.add_argument("--tkey", type=int)

    s = sub.add_parser("sweep", parents=[common], help="one-at-a-time hyper-parameter and ablation runs")
    s.add_argument("--data")
    s.add_argument("--grid", help='JSON object or file, e.g. {"k": [3, 5, 7]}')
    s.add_argument("--ablations", action="store_true", help="add the module-toggle variants")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--tkey", type=int)
    s.add_argument("--threshold", type=float)

    r = sub.add_parser("report", parents=[common], help="curves, anomaly series and tables from eval outputs")
    r.add_argument("--eval-dir", required=True)
    r.add_argument("--threshold", type=float)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
