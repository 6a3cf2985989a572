"""``uavlab`` command line: synth, extract, train, sweep, kfold, report.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from .config import SYNTH_DEFAULTS, ConfigError, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment (or sweep) YAML file")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweep/kfold")
    p.add_argument("--resume", action="store_true", help="skip runs/folds that already finished")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="uavlab", description="UAV audio classification experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labelled WAV corpus")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--snr-db", type=float)

    p = sub.add_parser("extract", parents=[common], help="cache spectrogram features for a dataset")
    p.add_argument("dataset", nargs="?", type=Path)
    p.add_argument("--kind", choices=("cnn", "ast"))
    p.add_argument("--frames", type=int)

    sub.add_parser("train", parents=[common], help="one training run")
    sub.add_parser("sweep", parents=[common], help="hyper-parameter sweep from a sweep spec")
    sub.add_parser("kfold", parents=[common], help="k-fold validation campaign")

    p = sub.add_parser("report", parents=[common], help="plots and tables for a run, sweep or k-fold directory")
    p.add_argument("directory", type=Path)
    p.add_argument("--wav", type=Path, help="also draw the waveform/spectrogram panel for this file")
    return parser


def _overrides(args) -> dict[str, Any]:
    return {"seed": args.seed} if args.seed is not None else {}


def _require_config(args) -> dict[str, Any]:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    return load_config(args.config, _overrides(args))


def _out(args, doc: dict[str, Any], suffix: str = "") -> Path:
    if args.out is not None:
        return args.out
    return Path(doc["output_dir"]) / f"{doc['run_name']}{suffix}"


def cmd_synth(args) -> int:
    from .experiments import synthesize
    params = dict(SYNTH_DEFAULTS)
    out = args.out
    if args.config is not None:
        doc = load_config(args.config)
        params.update(doc["dataset"].get("synth", {}))
        out = out or (Path(doc["dataset"]["path"]) if "path" in doc["dataset"] else None)
    if args.n_per_class is not None:
        params["n_per_class"] = args.n_per_class
    if args.snr_db is not None:
        params["snr_db"] = args.snr_db
    if args.seed is not None:
        params["seed"] = args.seed
    if params["n_per_class"] < 1:
        raise ConfigError("n_per_class must be >= 1", "dataset.synth.n_per_class")
    out = out or Path("data/synth")
    rows = synthesize(out, params["n_per_class"], params["seed"], params["snr_db"])
    print(f"wrote {len(rows)} samples to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .experiments import extract_to_cache
    kind, frames, dataset = args.kind, args.frames, args.dataset
    if args.config is not None:
        doc = load_config(args.config, _overrides(args))
        kind = kind or doc["model"]["kind"]
        frames = frames or doc["model"]["ast"]["n_frames"]
        dataset = dataset or (Path(doc["dataset"]["path"]) if "path" in doc["dataset"] else None)
    if dataset is None:
        raise ConfigError("no dataset directory given (positional argument or dataset.path)")
    kind = kind or "cnn"
    path = extract_to_cache(dataset, kind, frames or 1024)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import run_train
    doc = _require_config(args)
    out = _out(args, doc)
    result = run_train(doc, out)
    summary = {k: result[k] for k in ("best_epoch", "epochs_run", "trainable_params")}
    if "test" in result:
        summary["test_accuracy"] = result["test"]["accuracy"]
        summary["test_f1"] = result["test"]["macro_f1"]
    print(json.dumps({"run_dir": str(out), **summary}))
    return EXIT_OK


def cmd_kfold(args) -> int:
    from .experiments import run_kfold_campaign
    doc = _require_config(args)
    out = _out(args, doc, "-kfold")
    agg = run_kfold_campaign(doc, out, jobs=args.jobs, resume=args.resume)
    print(json.dumps({"kfold_dir": str(out), **agg["summary"], "recomputed_folds": agg["recomputed_folds"]}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiments import expand_sweep, load_sweep, run_sweep
    if args.config is None:
        raise ConfigError("--config is required for this command")
    try:
        spec = yaml.safe_load(args.config.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read sweep spec: {exc}") from exc
    if not isinstance(spec, dict):
        raise ConfigError("sweep spec must be a mapping", "<root>")
    base, axes, strategy = load_sweep(spec, args.config.parent)
    runs = expand_sweep(base, axes, strategy, _overrides(args))
    out = args.out or Path(runs[0][2]["output_dir"]) / "sweep"
    rows = run_sweep(runs, out, jobs=args.jobs, resume=args.resume)
    print(json.dumps({"sweep_dir": str(out), "completed": len(rows), "total": len(runs)}))
    return EXIT_OK if rows else EXIT_RUNTIME


def cmd_report(args) -> int:
    from .report import make_report
    for p in make_report(args.directory, args.wav):
        print(p)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "sweep": cmd_sweep,
            "kfold": cmd_kfold, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
