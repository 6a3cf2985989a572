"""SVG plots and their backing CSV tables for run, sweep and k-fold directories."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .audio import load_wav, standardize  # noqa: E402
from .experiments import read_csv, read_json, write_csv  # noqa: E402
from .features import melspec_cnn  # noqa: E402
from .trainkit import RunLog  # noqa: E402


class ReportError(RuntimeError):
    pass


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def run_curves(run_dir: Path) -> list[Path]:
    log_path = run_dir / "runlog.jsonl"
    records = RunLog.read_jsonl(log_path)
    if not records:
        raise ReportError(f"{log_path} holds no epochs")
    epochs = sorted({r["epoch"] for r in records})
    by = {(r["epoch"], r["split"]): r for r in records}

    def col(split, key):
        return [by[(e, split)][key] if (e, split) in by else "" for e in epochs]

    tl, vl, ta, va = col("train", "loss"), col("val", "loss"), col("train", "accuracy"), col("val", "accuracy")
    write_csv(run_dir / "loss_curve.csv", ["epoch", "train_loss", "val_loss", "train_accuracy", "val_accuracy"],
              list(zip(epochs, tl, vl, ta, va)))
    out = []
    for name, series, ylabel in (("loss_curve", (tl, vl), "cross-entropy"),
                                 ("accuracy_curve", (ta, va), "accuracy")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, ys in zip(("train", "val"), series):
            pts = [(e, y) for e, y in zip(epochs, ys) if y != ""]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        out.append(_save(fig, run_dir / f"{name}.svg"))
    return out


def confusion_heatmap(run_dir: Path) -> Path | None:
    path = run_dir / "confusion.csv"
    if not path.exists():
        return None
    rows = read_csv(path)
    m = np.array([[int(v) for k, v in r.items() if k != "true\\pred"] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(m, cmap="Blues")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax)
    return _save(fig, run_dir / "confusion.svg")


def sweep_plot(sweep_dir: Path) -> Path:
    rows = read_csv(sweep_dir / "sweep_summary.csv")
    if not rows:
        raise ReportError(f"{sweep_dir} has no completed runs")
    axes = [k for k in rows[0] if k not in ("run_id", "accuracy", "f1", "wall_ms")] + ["accuracy"]
    cols = []
    for a in axes:
        raw = [r[a] for r in rows]
        try:
            vals = np.array([float(v) for v in raw])
        except ValueError:
            cats = sorted(set(raw))
            vals = np.array([cats.index(v) for v in raw], dtype=float)
        span = vals.max() - vals.min()
        cols.append((vals - vals.min()) / span if span else np.full(len(vals), 0.5))
    data = np.stack(cols, axis=1)
    acc = np.array([float(r["accuracy"]) for r in rows])
    fig, ax = plt.subplots(figsize=(1.6 * len(axes) + 2, 4))
    cmap = plt.get_cmap("viridis")
    for line, a in zip(data, acc):
        ax.plot(range(len(axes)), line, color=cmap(a), alpha=0.8)
    ax.set_xticks(range(len(axes)))
    ax.set_xticklabels(axes, rotation=20)
    ax.set_yticks([])
    write_csv(sweep_dir / "parallel_coordinates.csv", ["run_id", *axes],
              [[r["run_id"], *[r[a] for a in axes]] for r in rows])
    return _save(fig, sweep_dir / "parallel_coordinates.svg")


def kfold_plot(kfold_dir: Path) -> Path:
    agg = read_json(kfold_dir / "aggregate.json")
    folds = agg["folds"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(folds))
    ax.bar(x - 0.2, [f["accuracy"] for f in folds], width=0.4, label="accuracy")
    ax.bar(x + 0.2, [f["f1"] for f in folds], width=0.4, label="macro F1")
    ax.set_xticks(x)
    ax.set_xticklabels([f"fold {f['fold']}" for f in folds])
    ax.set_ylim(0, 1.05)
    ax.legend()
    return _save(fig, kfold_dir / "kfold.svg")


def audio_panel(wav: Path, out_dir: Path) -> Path:
    """Waveform over time above its log-mel spectrogram."""
    w = standardize(load_wav(wav))
    spec = melspec_cnn(w).values
    t = np.arange(len(w.samples)) / w.sample_rate
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    a0.plot(t, w.samples, linewidth=0.4)
    a0.set_ylabel("amplitude")
    a1.imshow(spec, origin="lower", aspect="auto", extent=(0, t[-1], 0, spec.shape[0]), cmap="magma")
    a1.set_xlabel("time (s)")
    a1.set_ylabel("mel band")
    step = max(1, len(w.samples) // 4000)
    write_csv(out_dir / "audio_panel.csv", ["time_s", "amplitude"], list(zip(t[::step], w.samples[::step])))
    return _save(fig, out_dir / "audio_panel.svg")


def make_report(directory: str | Path, wav: str | Path | None = None) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ReportError(f"{d} is not a directory")
    out: list[Path] = []
    if (d / "sweep.json").exists():
        out.append(sweep_plot(d))
    elif (d / "aggregate.json").exists():
        out.append(kfold_plot(d))
        for f in sorted(d.glob("fold-*")):
            if (f / "runlog.jsonl").exists():
                out.extend(run_curves(f))
    elif (d / "runlog.jsonl").exists():
        out.extend(run_curves(d))
        cm = confusion_heatmap(d)
        if cm is not None:
            out.append(cm)
    elif wav is None:
        raise ReportError(f"{d} holds no run log, sweep summary or k-fold aggregate")
    if wav is not None:
        out.append(audio_panel(Path(wav), d))
    return out
