"""Experiment pipeline behind the command line: data, runs, k-fold campaigns, sweeps."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .audio import StandardWaveform, list_dataset, load_dataset, synth_dataset, write_dataset
from .augment import inflate
from .config import ConfigError, Experiment, dump_config, resolve, schema_has_path, set_path, validate
from .container import read_tensors, write_tensors
from .features import AST_FRAMES, extract_batch
from .models import build_ast, build_cnn, save_weights
from .nn import Module
from .peft import InjectionReport, apply_adapter
from .trainkit import (FeatureSet, FoldResult, KFoldReport, MetricsReport, RunLog, evaluate, make_folds,
                       run_fold, stratified_split, train)


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, default=float) + "\n")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text())


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# data

def synthesize(root: str | Path, n_per_class: int, seed: int, snr_db: float) -> list[tuple[str, int, int]]:
    """Write a synthetic corpus plus ``manifest.csv``; returns the manifest rows."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = write_dataset(root, synth_dataset(n_per_class, seed=seed, snr_db=snr_db))
    manifest = [(rel, label, int(prov.split(":", 1)[1])) for rel, label, prov in rows]
    write_csv(root / "manifest.csv", ("path", "class", "seed"), manifest)
    return manifest


def feature_cache_name(kind: str, n_frames: int = AST_FRAMES) -> str:
    return "features-cnn.uvtc" if kind == "cnn" else f"features-ast-{n_frames}.uvtc"


def extract_to_cache(root: str | Path, kind: str, n_frames: int = AST_FRAMES) -> Path:
    root = Path(root)
    entries = list_dataset(root)
    waves = load_dataset(root)
    feats = extract_batch(waves, kind, n_frames)
    path = root / feature_cache_name(kind, n_frames)
    write_tensors(path, {rel: f for (rel, _), f in zip(entries, feats)})
    return path


def load_waveforms(exp: Experiment) -> list[StandardWaveform]:
    ds = exp.doc["dataset"]
    if "path" in ds:
        return load_dataset(ds["path"])
    s = ds["synth"]
    return synth_dataset(s["n_per_class"], seed=s["seed"], snr_db=s["snr_db"])


def _kind_frames(exp: Experiment) -> tuple[str, int]:
    return exp.model_kind, (exp.n_frames if exp.model_kind == "ast" else AST_FRAMES)


def clean_features(exp: Experiment, waves: Sequence[StandardWaveform]) -> np.ndarray:
    """Features of the original samples, read from the dataset's cache when one exists."""
    kind, frames = _kind_frames(exp)
    ds = exp.doc["dataset"]
    if "path" in ds:
        cache = Path(ds["path"]) / feature_cache_name(kind, frames)
        if cache.exists():
            stored = read_tensors(cache)
            names = [rel for rel, _ in list_dataset(ds["path"])]
            if set(names) == set(stored):
                return np.stack([stored[n] for n in names])
    return extract_batch(waves, kind, frames)


class Dataset:
    """Original waveforms with their clean features; augmented subsets on demand."""

    def __init__(self, exp: Experiment, waves: Sequence[StandardWaveform] | None = None):
        self.exp = exp
        self.waves = list(waves) if waves is not None else load_waveforms(exp)
        self.kind, self.frames = _kind_frames(exp)
        self.clean = FeatureSet(clean_features(exp, self.waves), [w.label for w in self.waves],
                                [w.is_augmented for w in self.waves])

    def subset(self, idx: np.ndarray, augment_stream: int | None = None) -> FeatureSet:
        """Clean features for ``idx``; with a stream id, augmented copies per the config too."""
        aug = self.exp.inflation_config()
        if augment_stream is None or aug.k_per_sample == 0:
            return self.clean.subset(idx)
        seed = int(np.random.SeedSequence([self.exp.seed, 7, augment_stream]).generate_state(1)[0])
        copies = inflate([self.waves[i] for i in idx], replace(aug, keep_original=False), seed)
        parts = [self.clean.subset(idx)] if aug.keep_original else []
        parts.append(FeatureSet(extract_batch(copies, self.kind, self.frames), [w.label for w in copies],
                                [True] * len(copies)))
        return FeatureSet.concat(parts)


# ---------------------------------------------------------------------------
# models

def build_model(exp: Experiment, stream: int = 0) -> tuple[Module, InjectionReport]:
    seed = exp.seed if stream == 0 else int(np.random.SeedSequence([exp.seed, stream]).generate_state(1)[0])
    cfg = exp.model_config()
    model = build_cnn(cfg, seed=seed) if exp.model_kind == "cnn" else build_ast(cfg, seed=seed)
    report = apply_adapter(model, exp.adapter_config())
    return model, report


# ---------------------------------------------------------------------------
# single run

def _metrics_at(log: RunLog, split: str, epoch: int) -> dict[str, Any] | None:
    for r in log.records:
        if r["split"] == split and r["epoch"] == epoch:
            return r
    return None


def run_train(doc: Mapping[str, Any], run_dir: str | Path, data: Dataset | None = None) -> dict[str, Any]:
    """Train once and write every run artifact into ``run_dir``."""
    t0 = time.perf_counter()
    exp = Experiment(dict(doc))
    data = data or Dataset(exp)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(exp.doc, run_dir / "config.yaml")

    split = stratified_split(data.clean.labels, exp.split_spec())
    train_set = data.subset(split.train, augment_stream=1)
    val_set = data.subset(split.train_val, augment_stream=2) if len(split.train_val) else None

    model, report = build_model(exp)
    write_json(run_dir / "injection.json", report.to_dict())

    log_path = run_dir / "runlog.jsonl"
    log_path.write_text("")

    def append(records):
        with open(log_path, "a") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")

    log = train(model, train_set, val_set, exp.train_config(), on_epoch=append)
    save_weights(model, run_dir / "weights.uvtc")

    result: dict[str, Any] = {
        "run_name": exp.run_name,
        "best_epoch": log.best_epoch,
        "epochs_run": max((r["epoch"] for r in log.records), default=0),
        "stopped_early": log.stopped_early,
        "optimizer_steps": log.optimizer_steps,
        "n_train": len(train_set),
        "n_train_val": len(val_set) if val_set is not None else 0,
        "trainable_params": report.trainable_count,
    }
    best_val = _metrics_at(log, "val", log.best_epoch)
    if best_val is not None:
        result["val"] = {k: best_val[k] for k in ("loss", "accuracy", "precision", "recall", "f1")}
    test_report: MetricsReport | None = None
    if len(split.test):
        test_report = evaluate(model, data.subset(split.test))
        result["test"] = test_report.to_dict()
    if len(split.test_val):
        result["test_val"] = evaluate(model, data.subset(split.test_val)).to_dict()
    if test_report is not None:
        n = test_report.confusion.shape[0]
        write_csv(run_dir / "confusion.csv", ["true\\pred"] + [str(i) for i in range(n)],
                  [[i] + row for i, row in enumerate(test_report.confusion.tolist())])
    result["wall_ms"] = (time.perf_counter() - t0) * 1e3
    write_json(run_dir / "metrics.json", result)
    return result


# ---------------------------------------------------------------------------
# k-fold campaign

KFOLD_HEADER = ("fold", "accuracy", "f1", "time_ms")


def _fold_result_from_dir(d: Path) -> FoldResult:
    m = read_json(d / "metrics.json")
    t = m["test"]
    report = MetricsReport(t["accuracy"], t["macro_precision"], t["macro_recall"], t["macro_f1"],
                           np.array(t["confusion"]), t["loss"])
    return FoldResult(m["fold"], report, m["time_ms"])


def run_kfold_campaign(doc: Mapping[str, Any], out_dir: str | Path, jobs: int = 1,
                       resume: bool = False) -> dict[str, Any]:
    exp = Experiment(dict(doc))
    data = Dataset(exp)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(exp.doc, out_dir / "config.yaml")
    k = exp.doc["dataset"]["kfold"]["k"]
    cfg = exp.train_config()
    plan = make_folds(data.clean.labels, k, exp.seed)

    def fold_dir(i: int) -> Path:
        return out_dir / f"fold-{i}"

    todo = [i for i in range(k) if not (resume and (fold_dir(i) / "metrics.json").exists())]

    def one(i: int) -> FoldResult:
        d = fold_dir(i)
        d.mkdir(parents=True, exist_ok=True)
        res = run_fold(lambda f: build_model(exp, stream=100 + f)[0], data.clean, plan, i, cfg,
                       train_transform=lambda idx, f: data.subset(idx, augment_stream=100 + f))
        res.log.write_jsonl(d / "runlog.jsonl")
        write_json(d / "metrics.json", {"fold": i, "time_ms": res.time_ms, "accuracy": res.metrics.accuracy,
                                        "f1": res.metrics.macro_f1, "test": res.metrics.to_dict()})
        return res

    if jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, todo))
    else:
        for i in todo:
            one(i)
    return write_kfold_aggregate(out_dir, k, recomputed=todo)


def write_kfold_aggregate(out_dir: Path, k: int, recomputed: Sequence[int] = ()) -> dict[str, Any]:
    report = KFoldReport([_fold_result_from_dir(out_dir / f"fold-{i}") for i in range(k)])
    summary = report.summary()
    rows = [[r["fold"], r["accuracy"], r["f1"], r["time_ms"]] for r in report.rows()]
    placement = {"accuracy": 1, "f1": 2, "time_ms": 3}
    for name, value in summary.items():
        row: list[Any] = [name, "", "", ""]
        col = "time_ms" if name.endswith("time_ms") else ("f1" if name.endswith("f1") else "accuracy")
        row[placement[col]] = value
        rows.append(row)
    write_csv(out_dir / "aggregate.csv", KFOLD_HEADER, rows)
    agg = {"k": k, "folds": report.rows(), "summary": summary, "std_accuracy": report.std_accuracy(),
           "recomputed_folds": list(recomputed)}
    write_json(out_dir / "aggregate.json", agg)
    return agg


# ---------------------------------------------------------------------------
# sweeps

def load_sweep(doc: Mapping[str, Any], base_dir: Path | None = None) -> tuple[dict[str, Any], dict[str, list], dict]:
    validate(doc, "sweep")
    base = doc["base"]
    if isinstance(base, str):
        path = Path(base) if base_dir is None or Path(base).is_absolute() else base_dir / base
        try:
            base = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read base config: {exc}", "base") from exc
    axes = {k: list(v) for k, v in doc["axes"].items()}
    for key in axes:
        if not schema_has_path(key):
            raise ConfigError(f"sweep axis {key!r} is not a config field", f"axes.{key}")
    strategy = dict(doc.get("strategy", {"kind": "grid"}))
    if strategy["kind"] == "random" and "n" not in strategy:
        raise ConfigError("random strategy needs n", "strategy.n")
    return base, axes, strategy


def expand_sweep(base: Mapping[str, Any], axes: Mapping[str, list], strategy: Mapping[str, Any],
                 overrides: Mapping[str, Any] | None = None) -> list[tuple[str, dict[str, Any], dict[str, Any]]]:
    """``(run id, swept values, resolved config)`` for every configuration to run."""
    keys = list(axes)
    combos = list(itertools.product(*(axes[k] for k in keys)))
    if strategy["kind"] == "random":
        rng = np.random.default_rng(strategy.get("seed", 0))
        n = min(strategy["n"], len(combos))
        combos = [combos[i] for i in sorted(rng.choice(len(combos), size=n, replace=False))]
    out = []
    for i, combo in enumerate(combos):
        values = dict(zip(keys, combo))
        doc = copy.deepcopy(dict(base))
        for k, v in values.items():
            set_path(doc, k, v)
        doc.setdefault("run_name", "sweep")
        doc["run_name"] = f"{doc['run_name']}-{i:03d}"
        try:
            resolved = resolve(doc, overrides)
        except ConfigError as exc:
            raise ConfigError(f"configuration {i} {values}: {exc}") from exc
        out.append((f"run-{i:03d}", values, resolved))
    return out


def run_sweep(runs: Sequence[tuple[str, dict[str, Any], dict[str, Any]]], out_dir: str | Path,
              jobs: int = 1, resume: bool = False) -> list[dict[str, Any]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "sweep.json", {"axes": sorted({k for _, v, _ in runs for k in v}),
                                        "runs": [{"run_id": r, "values": v} for r, v, _ in runs]})
    data_cache: dict[str, Dataset] = {}

    def dataset_for(doc) -> Dataset:
        exp = Experiment(doc)
        key = json.dumps([doc["dataset"], doc["model"], doc["augmentation"], doc["seed"]], sort_keys=True)
        if key not in data_cache:
            data_cache[key] = Dataset(exp)
        return data_cache[key]

    def one(item):
        run_id, values, doc = item
        d = out_dir / run_id
        if resume and (d / "metrics.json").exists():
            return
        d.mkdir(parents=True, exist_ok=True)
        (d / "error.txt").unlink(missing_ok=True)
        write_json(d / "values.json", values)
        try:
            run_train(doc, d, dataset_for(doc))
        except Exception as exc:  # a failed run is recorded; the sweep goes on
            (d / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, runs))
    else:
        for item in runs:
            one(item)
    return summarize_sweep(out_dir)


def summarize_sweep(out_dir: str | Path) -> list[dict[str, Any]]:
    """Rebuild ``sweep_summary.csv`` and ``best_config.yaml`` from the run directories."""
    out_dir = Path(out_dir)
    meta = read_json(out_dir / "sweep.json")
    axes = meta["axes"]
    rows, failures = [], []
    for entry in meta["runs"]:
        d = out_dir / entry["run_id"]
        if (d / "metrics.json").exists() and not (d / "error.txt").exists():
            m = read_json(d / "metrics.json")
            val = m.get("val") or {}
            rows.append({"run_id": entry["run_id"], **{a: entry["values"].get(a) for a in axes},
                         "accuracy": val.get("accuracy", math.nan), "f1": val.get("f1", math.nan),
                         "wall_ms": m["wall_ms"]})
        else:
            err = (d / "error.txt").read_text().strip() if (d / "error.txt").exists() else "missing"
            failures.append([entry["run_id"], err])
    rows.sort(key=lambda r: (-(r["accuracy"] if not math.isnan(r["accuracy"]) else -1.0), r["run_id"]))
    header = ["run_id", *axes, "accuracy", "f1", "wall_ms"]
    write_csv(out_dir / "sweep_summary.csv", header, [[r[h] for h in header] for r in rows])
    write_csv(out_dir / "failures.csv", ["run_id", "error"], failures)
    if rows:
        best = out_dir / rows[0]["run_id"] / "config.yaml"
        (out_dir / "best_config.yaml").write_text(best.read_text())
    return rows
