"""Experiment configuration: YAML in, schema-validated, defaults filled, typed views out."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .augment import AugmentationSpec, InflationConfig
from .models import AstConfig, CnnConfig
from .peft import AdapterConfig
from .trainkit import SplitSpec, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@lru_cache(maxsize=None)
def load_schema(name: str = "experiment") -> dict[str, Any]:
    text = resources.files("uavlab").joinpath("schema", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc: Any, name: str = "experiment") -> None:
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(e.message, path)


_AST_DEFAULT = AstConfig()
_ADAPTER_DEFAULT = AdapterConfig(method="full")

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "run_name": "run",
    "seed": 0,
    "output_dir": "runs",
    "dataset": {
        "split": {"fractions": [0.6, 0.2, 0.1, 0.1], "stratified": True},
        "kfold": {"k": 5},
    },
    "model": {
        "kind": "cnn",
        "cnn": {"channels": [16, 32, 64], "fc_hidden": 256, "dropout_p": 0.5},
        "ast": {k: getattr(_AST_DEFAULT, k) for k in
                ("hidden", "layers", "heads", "intermediate", "patch", "stride", "n_frames", "dropout_p")},
    },
    "adapter": {k: v for k, v in _ADAPTER_DEFAULT.to_dict().items() if k != "seed"},
    "augmentation": {"k_per_sample": 0, "keep_original": True, "pool": []},
    "training": {"lr": 1e-3, "batch_size": 8, "accumulation_steps": 2, "epochs": 20, "early_stop_patience": 5},
}
SYNTH_DEFAULTS = {"n_per_class": 100, "snr_db": 20.0, "seed": 0}


def _merge(base: Mapping[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def get_path(doc: Mapping[str, Any], dotted: str) -> Any:
    node: Any = doc
    for part in dotted.split("."):
        node = node[part]
    return node


def set_path(doc: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = doc
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def schema_has_path(dotted: str, name: str = "experiment") -> bool:
    node = load_schema(name)
    for part in dotted.split("."):
        props = node.get("properties", {})
        if part not in props:
            return False
        node = props[part]
    return True


def resolve(doc: Mapping[str, Any], overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Validate ``doc``, apply dotted-path ``overrides``, fill defaults and re-validate."""
    validate(doc)
    raw = copy.deepcopy(dict(doc))
    for k, v in (overrides or {}).items():
        set_path(raw, k, v)
    full = _merge(DEFAULTS, raw)
    ds = full["dataset"]
    if "path" not in ds:
        ds["synth"] = _merge(SYNTH_DEFAULTS, ds.get("synth", {}))
    ds["split"].setdefault("seed", full["seed"])
    validate(full)
    Experiment(full)  # semantic checks
    return full


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping", "<root>")
    return resolve(doc, overrides)


def dump_config(doc: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(dict(doc), sort_keys=False))


@dataclass
class Experiment:
    """Typed view over a resolved config document."""

    doc: dict[str, Any]

    def __post_init__(self):
        # construct every typed view once so bad values surface as config errors
        for section, build in (("dataset.split", lambda: self.split_spec()),
                               ("model", lambda: self.model_config()),
                               ("adapter", lambda: self.adapter_config()),
                               ("augmentation", lambda: self.inflation_config()),
                               ("training", lambda: self.train_config())):
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), section) from exc
        if self.model_kind == "cnn" and self.adapter_config().method not in ("full", "classifier"):
            raise ConfigError("adapters target transformer linear layers; use an AST model", "adapter.method")

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def run_name(self) -> str:
        return self.doc["run_name"]

    @property
    def model_kind(self) -> str:
        return self.doc["model"]["kind"]

    @property
    def n_frames(self) -> int:
        return self.doc["model"]["ast"]["n_frames"]

    def split_spec(self) -> SplitSpec:
        s = self.doc["dataset"]["split"]
        return SplitSpec(tuple(s["fractions"]), s["stratified"], s.get("seed", self.seed))

    def model_config(self) -> CnnConfig | AstConfig:
        m = self.doc["model"]
        if m["kind"] == "cnn":
            c = m["cnn"]
            base = CnnConfig(channels=tuple(c["channels"]), fc_hidden=c["fc_hidden"], dropout_p=c["dropout_p"])
            return CnnConfig(channels=base.channels, fc_hidden=base.fc_hidden, dropout_p=base.dropout_p,
                             flatten_dim=base.computed_flatten())
        a = m["ast"]
        cfg = AstConfig(**a)
        if cfg.hidden % cfg.heads:
            raise ConfigError(f"hidden {cfg.hidden} not divisible by heads {cfg.heads}", "model.ast.heads")
        if cfg.patch > cfg.n_frames or cfg.patch > cfg.n_mels:
            raise ConfigError("patch larger than the input", "model.ast.patch")
        return cfg

    def adapter_config(self) -> AdapterConfig:
        a = dict(self.doc["adapter"])
        a["targets"] = tuple(a.get("targets", ()))
        return AdapterConfig(seed=self.seed, **a)

    def inflation_config(self) -> InflationConfig:
        a = self.doc["augmentation"]
        pool = []
        for spec in a["pool"]:
            if "low" in spec or "high" in spec:
                low = spec.get("low", spec.get("high"))
                pool.append(AugmentationSpec(spec["kind"], low, spec.get("high", low)))
            else:
                pool.append(AugmentationSpec.default(spec["kind"]))
        return InflationConfig(a["k_per_sample"], tuple(pool), a["keep_original"])

    def train_config(self) -> TrainConfig:
        t = self.doc["training"]
        aug = self.inflation_config()
        return TrainConfig(lr=float(t["lr"]), batch_size=t["batch_size"], accumulation_steps=t["accumulation_steps"],
                           epochs=t["epochs"], early_stop_patience=t["early_stop_patience"], seed=self.seed,
                           augmentation=aug if aug.k_per_sample else None)
