"""Splits, k-fold protocol, the training loop, and classification metrics."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .audio import N_CLASSES, StandardWaveform
from .augment import InflationConfig
from .autodiff import Adam, no_grad
from .autodiff import functional as F
from .features import extract_batch
from .nn import Module


class SplitError(ValueError):
    pass


class TrainError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """An augmented sample reached evaluation."""


# ---------------------------------------------------------------------------
# data containers

@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    augmented: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.augmented = np.asarray(self.augmented, dtype=bool)
        if not len(self.features) == len(self.labels) == len(self.augmented):
            raise ValueError("features, labels and augmented flags differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.features[idx], self.labels[idx], self.augmented[idx])

    @classmethod
    def concat(cls, sets: Sequence["FeatureSet"]) -> "FeatureSet":
        return cls(np.concatenate([s.features for s in sets]), np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.augmented for s in sets]))

    @classmethod
    def from_waveforms(cls, samples: Sequence[StandardWaveform], kind: str = "cnn", **kw) -> "FeatureSet":
        if any(s.label is None for s in samples):
            raise ValueError("every waveform needs a label")
        return cls(extract_batch(samples, kind, **kw), [s.label for s in samples], [s.is_augmented for s in samples])


def _labels(dataset) -> np.ndarray:
    if isinstance(dataset, FeatureSet):
        return dataset.labels
    if len(dataset) and isinstance(dataset[0], StandardWaveform):
        return np.array([s.label for s in dataset], dtype=np.int64)
    return np.asarray(dataset, dtype=np.int64)


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float, float] = (0.6, 0.2, 0.1, 0.1)
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != 4:
            raise SplitError("need four fractions: train, test, train_val, test_val")
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise SplitError(f"fractions {fr} must be non-negative and sum to 1")


@dataclass
class Split:
    train: np.ndarray
    test: np.ndarray
    train_val: np.ndarray
    test_val: np.ndarray

    def parts(self) -> tuple[np.ndarray, ...]:
        return self.train, self.test, self.train_val, self.test_val


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    # largest remainder: every count is within one of n * f
    exact = [n * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(dataset, spec: SplitSpec = SplitSpec()) -> Split:
    labels = _labels(dataset)
    rng = np.random.default_rng(spec.seed)
    need = sum(f > 0 for f in spec.fractions)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if spec.stratified else [np.arange(len(labels))]
    parts: list[list[np.ndarray]] = [[], [], [], []]
    for c, idx in zip(np.unique(labels) if spec.stratified else [None], groups):
        if len(idx) < need:
            who = f"class {c}" if c is not None else "dataset"
            raise SplitError(f"{who} has {len(idx)} samples; need at least {need}")
        idx = rng.permutation(idx)
        start = 0
        for k, n in enumerate(_apportion(len(idx), spec.fractions)):
            parts[k].append(idx[start:start + n])
            start += n
    out = [np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts]
    return Split(*out)


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def fold(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Training and held-out indices for fold ``i``."""
        held = self.assignments == i
        return np.flatnonzero(~held), np.flatnonzero(held)


def make_folds(dataset, k: int = 5, seed: int = 0) -> FoldPlan:
    if k < 2:
        raise SplitError(f"k-fold needs k >= 2, got {k}")
    labels = _labels(dataset)
    rng = np.random.default_rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < k:
            raise SplitError(f"class {c} has {len(idx)} samples; need at least {k}")
        # rotate the starting fold per class so total fold sizes also stay balanced
        assign[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return FoldPlan(k, assign, seed)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    loss: float = float("nan")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def compute_metrics(y_true, y_pred, n_classes: int = N_CLASSES, loss: float = float("nan")) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_n = conf.sum(axis=0)
    true_n = conf.sum(axis=1)
    precision = np.divide(tp, pred_n, out=np.zeros(n_classes), where=pred_n > 0)
    recall = np.divide(tp, true_n, out=np.zeros(n_classes), where=true_n > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    total = conf.sum()
    return MetricsReport(
        accuracy=float(tp.sum() / total) if total else 0.0,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=conf,
        loss=float(loss),
    )


def _n_outputs(model: Module) -> int:
    head = dict(model.named_parameters())
    weights = [p for n, p in head.items() if n.startswith(model.head_prefix) and n.endswith("weight")]
    return weights[-1].shape[0] if weights else N_CLASSES


def predict(model: Module, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for a feature array."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(features), batch_size):
            out.append(model(features[s:s + batch_size]).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.empty((0, _n_outputs(model)), np.float32)


def _score(model: Module, data: FeatureSet, batch_size: int = 32) -> MetricsReport:
    logits = predict(model, data.features, batch_size)
    loss = F.cross_entropy(logits.astype(np.float64), data.labels).item() if len(data) else float("nan")
    return compute_metrics(data.labels, logits.argmax(axis=1), logits.shape[1], loss)


def evaluate(model: Module, eval_set: FeatureSet, batch_size: int = 32) -> MetricsReport:
    if len(eval_set) == 0:
        raise TrainError("evaluation set is empty")
    if eval_set.augmented.any():
        n = int(eval_set.augmented.sum())
        raise ProtocolError(f"{n} augmented sample(s) in an evaluation set; only clean data may be evaluated")
    return _score(model, eval_set, batch_size)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    accumulation_steps: int = 2
    epochs: int = 20
    early_stop_patience: int = 5
    seed: int = 0
    augmentation: InflationConfig | None = None
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise TrainError("batch_size and accumulation_steps must be >= 1")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.lr < 0:
            raise TrainError("learning rate must be non-negative")


@dataclass
class RunLog:
    records: list[dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False
    optimizer_steps: int = 0

    def add(self, epoch: int, split: str, m: MetricsReport, wall_ms: float) -> dict[str, Any]:
        rec = {"epoch": epoch, "split": split, "loss": m.loss, "accuracy": m.accuracy,
               "precision": m.macro_precision, "recall": m.macro_recall, "f1": m.macro_f1, "wall_ms": wall_ms}
        self.records.append(rec)
        return rec

    def series(self, split: str, key: str) -> list[float]:
        return [r[key] for r in self.records if r["split"] == split]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def train(model: Module, train_set: FeatureSet, val_set: FeatureSet | None, cfg: TrainConfig,
          on_epoch: Callable[[list[dict[str, Any]]], None] | None = None) -> RunLog:
    """Adam on mean cross-entropy with gradient accumulation.

    Early stopping and best-weight retention track validation accuracy; with no
    validation set they track training accuracy and early stopping is off.
    The validation set may hold augmented samples.
    """
    if len(train_set) == 0:
        raise TrainError("training split is empty")
    if val_set is not None and len(val_set) == 0:
        raise TrainError("validation split is empty; pass None to train without one")

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    model.set_rng(np.random.default_rng(seeds[1]))
    opt = Adam(model.parameters(), lr=cfg.lr)
    has_trainable = bool(opt.params)
    controller = getattr(model, "peft_controller", None)

    n = len(train_set)
    n_micro = math.ceil(n / cfg.batch_size)
    steps_per_epoch = math.ceil(n_micro / cfg.accumulation_steps)
    if controller is not None:
        controller.configure(cfg.epochs * steps_per_epoch)

    log = RunLog()
    best_acc, best_state, stale = -1.0, None, 0
    n_classes = _n_outputs(model)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        perm = order_rng.permutation(n)
        preds = np.empty(n, dtype=np.int64)
        loss_sum = 0.0
        for g in range(steps_per_epoch):
            first = g * cfg.accumulation_steps
            group = range(first, min(first + cfg.accumulation_steps, n_micro))
            for mb in group:
                idx = perm[mb * cfg.batch_size:(mb + 1) * cfg.batch_size]
                x, y = train_set.features[idx], train_set.labels[idx]
                if not has_trainable:
                    with no_grad():
                        logits = model(x)
                    loss = F.cross_entropy(logits, y)
                else:
                    logits = model(x)
                    loss = F.cross_entropy(logits, y)
                    total = loss
                    if controller is not None:
                        reg = controller.regularization()
                        if reg is not None:
                            total = total + reg
                    (total * (1.0 / len(group))).backward()
                loss_sum += loss.item() * len(idx)
                preds[mb * cfg.batch_size:mb * cfg.batch_size + len(idx)] = logits.data.argmax(axis=1)
            if has_trainable:
                log.optimizer_steps += 1
                if controller is not None:
                    controller.step(log.optimizer_steps)
                opt.step()
                opt.zero_grad()
        train_m = compute_metrics(train_set.labels[perm], preds, n_classes, loss_sum / n)
        val_m = _score(model, val_set, cfg.eval_batch_size) if val_set is not None else None
        wall = (time.perf_counter() - t0) * 1e3
        new = [log.add(epoch, "train", train_m, wall)]
        if val_m is not None:
            new.append(log.add(epoch, "val", val_m, wall))
        if on_epoch is not None:
            on_epoch(new)

        track = val_m.accuracy if val_m is not None else train_m.accuracy
        if track > best_acc:
            best_acc, best_state, stale = track, model.state_dict(), 0
            log.best_epoch = epoch
        else:
            stale += 1
            if val_set is not None and stale >= cfg.early_stop_patience:
                log.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    log.best_val_accuracy = best_acc if val_set is not None else float("nan")
    return log


# ---------------------------------------------------------------------------
# k-fold

@dataclass
class FoldResult:
    fold: int
    metrics: MetricsReport
    time_ms: float
    log: RunLog | None = None


@dataclass
class KFoldReport:
    folds: list[FoldResult]

    def _col(self, name: str) -> np.ndarray:
        if name == "time_ms":
            return np.array([f.time_ms for f in self.folds])
        return np.array([getattr(f.metrics, name) for f in self.folds])

    def summary(self) -> dict[str, float]:
        acc, f1, t = self._col("accuracy"), self._col("macro_f1"), self._col("time_ms")
        return {
            "best_accuracy": float(acc.max()),
            "mean_accuracy": float(sum(acc.tolist()) / len(acc)),
            "best_f1": float(f1.max()),
            "mean_f1": float(sum(f1.tolist()) / len(f1)),
            "worst_time_ms": float(t.max()),
            "best_time_ms": float(t.min()),
            "mean_time_ms": float(sum(t.tolist()) / len(t)),
        }

    def std_accuracy(self) -> float:
        return float(self._col("accuracy").std())

    def rows(self) -> list[dict[str, Any]]:
        return [{"fold": f.fold, "accuracy": f.metrics.accuracy, "f1": f.metrics.macro_f1, "time_ms": f.time_ms}
                for f in self.folds]


TrainTransform = Callable[[np.ndarray, int], FeatureSet]


def run_fold(model_factory: Callable[[int], Module], dataset: FeatureSet, plan: FoldPlan, i: int,
             cfg: TrainConfig, train_transform: TrainTransform | None = None) -> FoldResult:
    """Train a fresh model on every fold but ``i`` and evaluate it on fold ``i``.

    ``train_transform(train_indices, fold)`` may replace the training subset,
    e.g. to add augmented copies; the held-out fold is always the clean subset.
    """
    t0 = time.perf_counter()
    tr_idx, te_idx = plan.fold(i)
    train_part = train_transform(tr_idx, i) if train_transform is not None else dataset.subset(tr_idx)
    model = model_factory(i)
    log = train(model, train_part, None, cfg)
    metrics = evaluate(model, dataset.subset(te_idx), cfg.eval_batch_size)
    return FoldResult(i, metrics, (time.perf_counter() - t0) * 1e3, log)


def run_kfold(model_factory: Callable[[int], Module], dataset: FeatureSet, k: int, cfg: TrainConfig,
              jobs: int = 1, train_transform: TrainTransform | None = None) -> KFoldReport:
    plan = make_folds(dataset, k, cfg.seed)
    args = [(model_factory, dataset, plan, i, cfg, train_transform) for i in range(k)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda a: run_fold(*a), args))
    else:
        results = [run_fold(*a) for a in args]
    return KFoldReport(results)
