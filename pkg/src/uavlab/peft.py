"""Parameter-efficient fine-tuning: freeze modes and five adapter injections.

Adapters wrap the targeted :class:`~uavlab.nn.Linear` layers in place. A
wrapper re-exposes the frozen ``weight``/``bias`` under their original names,
so adapter leaves show up next to them (``...query.lora_A``). The classifier
head stays trainable for every method.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .models import count_params
from .nn import Linear, Module, Parameter, uniform

ROLES = ("query", "key", "value", "attn_output", "intermediate", "mlp_output")
ALL_ROLES = frozenset(ROLES)
METHODS = ("full", "classifier", "lora", "adalora", "ia3", "oft", "fourierft")


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    method: str = "lora"
    r: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("query", "value")
    # adalora
    init_rank: int = 100
    target_rank: int = 16
    tinit: int = 0
    tfinal: int = 0
    total_steps: int | None = None
    delta_t: int = 1
    beta: float = 0.85
    orth_reg_weight: float = 1e-4
    # fourierft
    n_coeffs: int = 3000
    scaling: float = 100.0
    location_seed: int = 2024
    # oft
    n_blocks: int = 16
    oft_parameterization: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InjectionError(f"unknown adapter method {self.method!r}; choose from {METHODS}")
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.method in ("full", "classifier"):
            return
        if not self.targets:
            raise InjectionError(f"{self.method} needs at least one target role")
        unknown = set(self.targets) - ALL_ROLES
        if unknown:
            raise InjectionError(f"targets {sorted(unknown)} are not linear-layer roles {ROLES}")
        if self.method == "lora" and self.r < 1:
            raise InjectionError("LoRA rank must be >= 1")
        if self.method == "adalora" and not self.init_rank >= self.target_rank >= 1:
            raise InjectionError("AdaLoRA needs init_rank >= target_rank >= 1")
        if self.method == "oft" and self.oft_parameterization not in ("full", "triangular"):
            raise InjectionError("oft_parameterization must be 'full' or 'triangular'")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


@dataclass
class InjectionReport:
    method: str
    trainable_count: int
    frozen_count: int
    added_leaves: list[str] = field(default_factory=list)
    per_target: dict[str, int] = field(default_factory=dict)
    location_seed: int | None = None

    @property
    def added_count(self) -> int:
        return sum(self.per_target.values())

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# adapter wrappers

class _Wrapped(Module):
    def __init__(self, base: Linear):
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.role = base.role
        self.weight = base.weight
        self.bias = base.bias

    def adapter_leaves(self) -> list[str]:
        return [n for n, p in vars(self).items() if isinstance(p, Parameter) and n not in ("weight", "bias")]

    def extra_repr(self):
        return f"{self.in_features}, {self.out_features}"


class LoraLinear(_Wrapped):
    def __init__(self, base: Linear, r: int, alpha: float, rng: np.random.Generator):
        super().__init__(base)
        dtype = base.weight.dtype
        self.scaling = alpha / r
        self.lora_A = Parameter(uniform(rng, (r, self.in_features), 1.0 / math.sqrt(self.in_features), dtype))
        self.lora_B = Parameter(np.zeros((self.out_features, r), dtype=dtype))

    def forward(self, x):
        base = F.linear(x, self.weight, self.bias)
        return base + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scaling


class AdaLoraLinear(_Wrapped):
    """W x + (alpha / r) P diag(lambda * mask) Q x with lambda zero at init."""

    def __init__(self, base: Linear, r: int, alpha: float, rng: np.random.Generator):
        super().__init__(base)
        dtype = base.weight.dtype
        self.rank = r
        self.scaling = alpha / r
        self.lora_P = Parameter((rng.standard_normal((self.out_features, r)) * 0.02).astype(dtype))
        self.lora_E = Parameter(np.zeros(r, dtype=dtype))
        self.lora_Q = Parameter((rng.standard_normal((r, self.in_features)) * 0.02).astype(dtype))
        self.register_buffer("rank_mask", np.ones(r, dtype=dtype))

    def forward(self, x):
        base = F.linear(x, self.weight, self.bias)
        lam = self.lora_E * self._buffers["rank_mask"]
        return base + F.linear(F.linear(x, self.lora_Q) * lam, self.lora_P) * self.scaling

    def orthogonality(self) -> Tensor:
        eye = np.eye(self.rank, dtype=self.weight.dtype)
        pp = F.matmul(self.lora_P.T, self.lora_P) - eye
        qq = F.matmul(self.lora_Q, self.lora_Q.T) - eye
        return (pp * pp).sum() + (qq * qq).sum()


class IA3Linear(_Wrapped):
    def __init__(self, base: Linear):
        super().__init__(base)
        self.ia3_l = Parameter(np.ones(self.out_features, dtype=base.weight.dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias) * self.ia3_l


class OFTLinear(_Wrapped):
    """R (W x) + b with R block-diagonal, R_i = (I + S_i)(I - S_i)^-1, S_i skew-symmetric.

    ``full`` stores a free b x b generator per block and uses its skew part;
    ``triangular`` stores only the b(b-1)/2 strictly-upper entries.
    """

    def __init__(self, base: Linear, n_blocks: int, parameterization: str = "full"):
        super().__init__(base)
        if self.out_features % n_blocks:
            raise InjectionError(f"OFT: out_features {self.out_features} not divisible by {n_blocks} blocks")
        dtype = base.weight.dtype
        self.n_blocks = n_blocks
        self.block = b = self.out_features // n_blocks
        self.parameterization = parameterization
        if parameterization == "full":
            self.oft_S = Parameter(np.zeros((n_blocks, b, b), dtype=dtype))
        else:
            self._iu = np.triu_indices(b, 1)
            self.oft_S = Parameter(np.zeros((n_blocks, len(self._iu[0])), dtype=dtype))

    def skew(self) -> Tensor:
        if self.parameterization == "full":
            return (self.oft_S - self.oft_S.swapaxes(1, 2)) * 0.5
        b = self.block
        rows, cols = self._iu
        flat_idx = rows * b + cols
        scatter = np.zeros((len(flat_idx), b * b), dtype=self.oft_S.dtype)
        scatter[np.arange(len(flat_idx)), flat_idx] = 1.0
        upper = F.matmul(self.oft_S, scatter).reshape(self.n_blocks, b, b)
        return upper - upper.swapaxes(1, 2)

    def rotation(self) -> Tensor:
        s = self.skew()
        eye = np.eye(self.block, dtype=self.weight.dtype)
        return F.matmul(s + eye, F.inv(eye - s))

    def forward(self, x):
        r = self.rotation()
        w = F.matmul(r, self.weight.reshape(self.n_blocks, self.block, self.in_features))
        return F.linear(x, w.reshape(self.out_features, self.in_features), self.bias)


class FourierFTLinear(_Wrapped):
    def __init__(self, base: Linear, n_coeffs: int, scaling: float, seed: int):
        super().__init__(base)
        m, n = self.out_features, self.in_features
        if n_coeffs > m * n:
            raise InjectionError(f"FourierFT: {n_coeffs} coefficients exceed the {m}x{n} weight")
        loc = np.random.default_rng(seed).choice(m * n, size=n_coeffs, replace=False)
        self.rows, self.cols = np.divmod(loc, n)
        self.scaling = scaling
        self.spectrum = Parameter(np.zeros(n_coeffs, dtype=base.weight.dtype))

    def delta_weight(self) -> Tensor:
        return F.spectral_delta(self.spectrum, self.rows, self.cols,
                                (self.out_features, self.in_features), self.scaling)

    def forward(self, x):
        return F.linear(x, self.weight + self.delta_weight(), self.bias)


# ---------------------------------------------------------------------------
# AdaLoRA rank allocation

class RankAllocator:
    """Budgeted pruning of AdaLoRA singular components.

    Importance of component i is an EMA (``beta``) of |lambda_i * dL/dlambda_i|.
    The global budget decays cubically from ``init_rank * n_targets`` to
    ``target_rank * n_targets`` between ``tinit`` and ``total_steps - tfinal``;
    every ``delta_t`` steps only the top-budget components stay unmasked.
    """

    def __init__(self, layers: dict[str, AdaLoraLinear], cfg: AdapterConfig):
        self.layers = layers
        self.cfg = cfg
        self.total_steps = cfg.total_steps
        self.importance = {name: np.zeros(m.rank) for name, m in layers.items()}
        self.init_budget = cfg.init_rank * len(layers)
        self.target_budget = cfg.target_rank * len(layers)
        self.history: list[int] = []
        if self.total_steps is not None:
            self._validate(self.total_steps)

    def _validate(self, total_steps: int) -> None:
        if total_steps <= self.cfg.tinit + self.cfg.tfinal:
            raise InjectionError(
                f"AdaLoRA schedule of {total_steps} steps is not longer than warmup {self.cfg.tinit} "
                f"+ final {self.cfg.tfinal}"
            )

    def configure(self, total_steps: int) -> None:
        if self.cfg.total_steps is None:
            self._validate(total_steps)
            self.total_steps = total_steps

    def budget(self, step: int) -> int:
        tinit, tfinal = self.cfg.tinit, self.cfg.tfinal
        if step <= tinit:
            return self.init_budget
        if step > self.total_steps - tfinal:
            return self.target_budget
        progress = 1.0 - (step - tinit) / (self.total_steps - tfinal - tinit)
        return int(self.target_budget + (self.init_budget - self.target_budget) * progress**3)

    def active_count(self) -> int:
        return int(sum(m._buffers["rank_mask"].sum() for m in self.layers.values()))

    def regularization(self) -> Tensor | None:
        if self.cfg.orth_reg_weight == 0 or not self.layers:
            return None
        total = None
        for m in self.layers.values():
            term = m.orthogonality()
            total = term if total is None else total + term
        return total * self.cfg.orth_reg_weight

    def update_importance(self) -> None:
        b = self.cfg.beta
        for name, m in self.layers.items():
            g = m.lora_E.grad
            if g is None:
                continue
            score = np.abs(m.lora_E.data.astype(np.float64) * g)
            self.importance[name] = b * self.importance[name] + (1 - b) * score

    def reallocate(self, budget: int) -> None:
        names = list(self.layers)
        scores = np.concatenate([self.importance[n] for n in names])
        owner = np.concatenate([[i] * self.layers[n].rank for i, n in enumerate(names)])
        keep = np.zeros(len(scores), dtype=bool)
        keep[np.argsort(-scores, kind="stable")[:budget]] = True
        for i, n in enumerate(names):
            m = self.layers[n]
            mask = keep[owner == i].astype(m.lora_E.dtype)
            m._buffers["rank_mask"] = mask
            m.lora_E.data = m.lora_E.data * mask

    def step(self, step: int) -> None:
        """Call after backward, before the optimizer update, with a 1-based step count."""
        if self.total_steps is None:
            raise InjectionError("AdaLoRA schedule length unknown; call configure(total_steps) first")
        self.update_importance()
        tinit, tfinal = self.cfg.tinit, self.cfg.tfinal
        if step <= tinit:
            return
        if step > self.total_steps - tfinal:
            # final phase: mask frozen once the target budget is reached
            if self.active_count() > self.target_budget:
                self.reallocate(self.target_budget)
                self.history.append(self.target_budget)
            return
        if (step - tinit) % self.cfg.delta_t == 0:
            budget = self.budget(step)
            self.reallocate(budget)
            self.history.append(budget)


# ---------------------------------------------------------------------------
# injection

def _freeze_all(model: Module) -> None:
    for p in model.parameters():
        p.trainable = False


def _unfreeze_head(model: Module) -> None:
    prefix = model.head_prefix
    for name, p in model.named_parameters():
        if name == prefix or name.startswith(prefix + "."):
            p.trainable = True


def _find_targets(model: Module, roles) -> list[tuple[Module, str, str, Linear]]:
    found = []
    for path, mod in model.named_modules():
        for attr, child in list(mod.children()):
            if type(child) is Linear and child.role in roles:
                found.append((mod, attr, f"{path}.{attr}" if path else attr, child))
    if not found:
        raise InjectionError(f"no linear layers with roles {sorted(roles)} in {type(model).__name__}")
    return found


def _report(model: Module, method: str, wrapped: dict[str, Module], seed: int | None = None) -> InjectionReport:
    trainable = count_params(model, trainable_only=True)
    total = count_params(model)
    added, per_target = [], {}
    for path, w in wrapped.items():
        names = w.adapter_leaves()
        added.extend(f"{path}.{n}" for n in names)
        per_target[path] = sum(getattr(w, n).size for n in names)
    return InjectionReport(method, trainable, total - trainable, added, per_target, seed)


def apply_freeze_mode(model: Module, mode: str) -> InjectionReport:
    if mode == "full":
        for p in model.parameters():
            p.trainable = True
    elif mode == "classifier":
        _freeze_all(model)
        _unfreeze_head(model)
    else:
        raise InjectionError(f"freeze mode must be 'full' or 'classifier', got {mode!r}")
    return _report(model, mode, {})


def _inject(model: Module, cfg: AdapterConfig, make) -> dict[str, Module]:
    if getattr(model, "peft_method", None):
        raise InjectionError(f"model already carries a {model.peft_method} adapter")
    targets = _find_targets(model, set(cfg.targets))
    _freeze_all(model)
    wrapped = {}
    for i, (parent, attr, path, base) in enumerate(targets):
        w = make(base, i)
        setattr(parent, attr, w)
        wrapped[path] = w
    _unfreeze_head(model)
    model.peft_method = cfg.method
    return wrapped


def apply_lora(model: Module, cfg: AdapterConfig) -> InjectionReport:
    rng = np.random.default_rng(cfg.seed)
    wrapped = _inject(model, cfg, lambda base, i: LoraLinear(base, cfg.r, cfg.alpha, rng))
    return _report(model, "lora", wrapped)


def apply_adalora(model: Module, cfg: AdapterConfig) -> InjectionReport:
    rng = np.random.default_rng(cfg.seed)
    if cfg.total_steps is not None and cfg.total_steps <= cfg.tinit + cfg.tfinal:
        raise InjectionError(f"AdaLoRA schedule of {cfg.total_steps} steps shorter than warmup/final phases")
    wrapped = _inject(model, cfg, lambda base, i: AdaLoraLinear(base, cfg.init_rank, cfg.alpha, rng))
    model.peft_controller = RankAllocator(wrapped, cfg)
    return _report(model, "adalora", wrapped)


def apply_ia3(model: Module, cfg: AdapterConfig) -> InjectionReport:
    wrapped = _inject(model, cfg, lambda base, i: IA3Linear(base))
    return _report(model, "ia3", wrapped)


def apply_oft(model: Module, cfg: AdapterConfig) -> InjectionReport:
    for _, _, path, base in _find_targets(model, set(cfg.targets)):
        if base.out_features % cfg.n_blocks:
            raise InjectionError(f"OFT: {path} has {base.out_features} outputs, not divisible by {cfg.n_blocks}")
    wrapped = _inject(model, cfg, lambda base, i: OFTLinear(base, cfg.n_blocks, cfg.oft_parameterization))
    return _report(model, "oft", wrapped)


def apply_fourierft(model: Module, cfg: AdapterConfig) -> InjectionReport:
    for _, _, path, base in _find_targets(model, set(cfg.targets)):
        if cfg.n_coeffs > base.out_features * base.in_features:
            raise InjectionError(f"FourierFT: {cfg.n_coeffs} coefficients exceed {path}'s weight size")
    wrapped = _inject(model, cfg, lambda base, i: FourierFTLinear(
        base, cfg.n_coeffs, cfg.scaling, int(np.random.SeedSequence([cfg.location_seed, i]).generate_state(1)[0])))
    return _report(model, "fourierft", wrapped, seed=cfg.location_seed)


def apply_adapter(model: Module, cfg: AdapterConfig) -> InjectionReport:
    if cfg.method in ("full", "classifier"):
        return apply_freeze_mode(model, cfg.method)
    return {
        "lora": apply_lora,
        "adalora": apply_adalora,
        "ia3": apply_ia3,
        "oft": apply_oft,
        "fourierft": apply_fourierft,
    }[cfg.method](model, cfg)
