"""CustomCNN and the AST-shaped transformer, plus parameter accounting and weight files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .container import read_tensors, write_tensors
from .nn import (
    BatchNorm2d, Conv2d, Dropout, GELU, LayerNorm, Linear, MaxPool2d, Module, ModuleList, Parameter, ReLU,
    Sequential, trunc_normal,
)


class ModelConfigError(ValueError):
    pass


class WeightMismatchError(ValueError):
    pass


def _floor_halvings(n: int, times: int) -> int:
    for _ in range(times):
        n //= 2
    return n


@dataclass(frozen=True)
class CnnConfig:
    in_mels: int = 128
    in_frames: int = 157
    channels: tuple[int, ...] = (16, 32, 64)
    fc_hidden: int = 256
    dropout_p: float = 0.5
    n_classes: int = 9
    flatten_dim: int = 19456

    def computed_flatten(self) -> int:
        k = len(self.channels)
        return self.channels[-1] * _floor_halvings(self.in_mels, k) * _floor_halvings(self.in_frames, k)


@dataclass(frozen=True)
class AstConfig:
    hidden: int = 768
    layers: int = 12
    heads: int = 12
    intermediate: int = 3072
    patch: int = 16
    stride: int = 10
    n_mels: int = 128
    n_frames: int = 1024
    n_classes: int = 9
    dropout_p: float = 0.1
    layer_norm_eps: float = 1e-12

    @property
    def grid(self) -> tuple[int, int]:
        return ((self.n_mels - self.patch) // self.stride + 1, (self.n_frames - self.patch) // self.stride + 1)

    @property
    def n_patches(self) -> int:
        f, t = self.grid
        return f * t

    @property
    def seq_len(self) -> int:
        return self.n_patches + 2


TOY_AST = AstConfig(hidden=64, layers=2, heads=4, intermediate=256, n_frames=128)


# ---------------------------------------------------------------------------
# CNN

class CustomCNN(Module):
    head_prefix = "fc2"

    def __init__(self, cfg: CnnConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = cfg
        chans = (1, *cfg.channels)
        for i in range(len(cfg.channels)):
            block = Sequential([
                Conv2d(chans[i], chans[i + 1], 3, padding=1, rng=rng, dtype=dtype),
                ReLU(),
                MaxPool2d(2),
                BatchNorm2d(chans[i + 1], dtype=dtype),
            ])
            setattr(self, f"conv{i + 1}", block)
        self.fc1 = Linear(cfg.flatten_dim, cfg.fc_hidden, role="fc", rng=rng, dtype=dtype)
        self.dropout = Dropout(cfg.dropout_p)
        self.fc2 = Linear(cfg.fc_hidden, cfg.n_classes, role="head", rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = F.as_tensor(x)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        for i in range(len(self.config.channels)):
            x = getattr(self, f"conv{i + 1}")(x)
        x = x.reshape(x.shape[0], -1)
        x = self.dropout(F.relu(self.fc1(x)))
        return self.fc2(x)


def build_cnn(cfg: CnnConfig = CnnConfig(), seed: int = 0, dtype=np.float32) -> CustomCNN:
    got = cfg.computed_flatten()
    if got != cfg.flatten_dim:
        raise ModelConfigError(
            f"flatten dim mismatch: {cfg.channels[-1]} channels x {cfg.in_mels}x{cfg.in_frames} input after "
            f"{len(cfg.channels)} pools gives {got}, config declares {cfg.flatten_dim}"
        )
    return CustomCNN(cfg, np.random.default_rng(seed), dtype)


# ---------------------------------------------------------------------------
# AST

class ASTPatchEmbeddings(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.projection = Conv2d(1, cfg.hidden, cfg.patch, stride=cfg.stride, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        x = self.projection(x.reshape(b, 1, *x.shape[1:]))  # (B, hidden, F', T')
        return x.reshape(b, x.shape[1], -1).swapaxes(1, 2)


class ASTEmbeddings(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, cfg.hidden), 0.02, dtype))
        self.distillation_token = Parameter(trunc_normal(rng, (1, 1, cfg.hidden), 0.02, dtype))
        self.position_embeddings = Parameter(trunc_normal(rng, (1, cfg.seq_len, cfg.hidden), 0.02, dtype))
        self.patch_embeddings = ASTPatchEmbeddings(cfg, rng, dtype)
        self.dropout = Dropout(cfg.dropout_p)

    def forward(self, x: Tensor) -> Tensor:
        patches = self.patch_embeddings(x)
        b, _, d = patches.shape
        cls = F.broadcast_to(self.cls_token, (b, 1, d))
        dist = F.broadcast_to(self.distillation_token, (b, 1, d))
        h = F.concat([cls, dist, patches], axis=1) + self.position_embeddings
        return self.dropout(h)


class ASTSelfAttention(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.heads = cfg.heads
        self.query = Linear(cfg.hidden, cfg.hidden, role="query", rng=rng, dtype=dtype)
        self.key = Linear(cfg.hidden, cfg.hidden, role="key", rng=rng, dtype=dtype)
        self.value = Linear(cfg.hidden, cfg.hidden, role="value", rng=rng, dtype=dtype)
        self.dropout = Dropout(cfg.dropout_p)
        self.keep_weights = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).swapaxes(1, 2)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        out, weights = F.scaled_dot_product_attention(q, k, v, self.dropout.p, self.training, self.dropout.rng)
        if self.keep_weights:
            self.last_weights = weights.data
        b, h, t, dh = out.shape
        return out.swapaxes(1, 2).reshape(b, t, h * dh)


class ASTSelfOutput(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.dense = Linear(cfg.hidden, cfg.hidden, role="attn_output", rng=rng, dtype=dtype)
        self.dropout = Dropout(cfg.dropout_p)

    def forward(self, x):
        return self.dropout(self.dense(x))


class ASTAttention(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.attention = ASTSelfAttention(cfg, rng, dtype)
        self.output = ASTSelfOutput(cfg, rng, dtype)

    def forward(self, x):
        return self.output(self.attention(x))


class ASTIntermediate(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.dense = Linear(cfg.hidden, cfg.intermediate, role="intermediate", rng=rng, dtype=dtype)
        self.intermediate_act_fn = GELU()

    def forward(self, x):
        return self.intermediate_act_fn(self.dense(x))


class ASTOutput(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.dense = Linear(cfg.intermediate, cfg.hidden, role="mlp_output", rng=rng, dtype=dtype)
        self.dropout = Dropout(cfg.dropout_p)

    def forward(self, x):
        return self.dropout(self.dense(x))


class ASTLayer(Module):
    """Pre-norm block: x + attn(LN(x)), then h + mlp(LN(h))."""

    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.attention = ASTAttention(cfg, rng, dtype)
        self.intermediate = ASTIntermediate(cfg, rng, dtype)
        self.output = ASTOutput(cfg, rng, dtype)
        self.layernorm_before = LayerNorm(cfg.hidden, cfg.layer_norm_eps, dtype)
        self.layernorm_after = LayerNorm(cfg.hidden, cfg.layer_norm_eps, dtype)

    def forward(self, x):
        h = x + self.attention(self.layernorm_before(x))
        return h + self.output(self.intermediate(self.layernorm_after(h)))


class ASTEncoder(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.layer = ModuleList([ASTLayer(cfg, rng, dtype) for _ in range(cfg.layers)])

    def forward(self, x):
        for block in self.layer:
            x = block(x)
        return x


class ASTModel(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.embeddings = ASTEmbeddings(cfg, rng, dtype)
        self.encoder = ASTEncoder(cfg, rng, dtype)
        self.layernorm = LayerNorm(cfg.hidden, cfg.layer_norm_eps, dtype)

    def forward(self, x):
        return self.layernorm(self.encoder(self.embeddings(x)))


class ASTMLPHead(Module):
    def __init__(self, cfg: AstConfig, rng, dtype):
        super().__init__()
        self.layernorm = LayerNorm(cfg.hidden, cfg.layer_norm_eps, dtype)
        self.dense = Linear(cfg.hidden, cfg.n_classes, role="head", rng=rng, dtype=dtype)

    def forward(self, x):
        return self.dense(self.layernorm(x))


class AST(Module):
    head_prefix = "classifier"

    def __init__(self, cfg: AstConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = cfg
        self.audio_spectrogram_transformer = ASTModel(cfg, rng, dtype)
        self.classifier = ASTMLPHead(cfg, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = F.as_tensor(x)
        cfg = self.config
        if x.shape[1:] != (cfg.n_mels, cfg.n_frames):
            raise ModelConfigError(f"AST expects input (B, {cfg.n_mels}, {cfg.n_frames}), got {x.shape}")
        h = self.audio_spectrogram_transformer(x)
        pooled = (h[:, 0] + h[:, 1]) * 0.5
        return self.classifier(pooled)

    def attention_modules(self) -> list[ASTSelfAttention]:
        return [m for _, m in self.named_modules() if isinstance(m, ASTSelfAttention)]


def build_ast(cfg: AstConfig = AstConfig(), seed: int = 0, dtype=np.float32) -> AST:
    if cfg.hidden % cfg.heads:
        raise ModelConfigError(f"hidden size {cfg.hidden} not divisible by {cfg.heads} heads")
    if cfg.n_mels < cfg.patch or cfg.n_frames < cfg.patch:
        raise ModelConfigError(f"input {cfg.n_mels}x{cfg.n_frames} smaller than a {cfg.patch}x{cfg.patch} patch")
    return AST(cfg, np.random.default_rng(seed), dtype)


# ---------------------------------------------------------------------------
# Accounting, weights, summary

def param_tree(model: Module) -> dict[str, Parameter]:
    return dict(model.named_parameters())


def count_params(tree: Module | Mapping[str, Tensor], trainable_only: bool = False) -> int:
    items = tree.named_parameters() if isinstance(tree, Module) else tree.items()
    return sum(p.size for _, p in items if p.requires_grad or not trainable_only)


def subtotal(model: Module, prefix: str) -> int:
    return sum(p.size for n, p in model.named_parameters() if n == prefix or n.startswith(prefix + "."))


def save_weights(model: Module, path: str | Path) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    tensors.update(dict(model.named_buffers()))
    write_tensors(path, tensors)


def load_weights(model: Module, path: str | Path) -> None:
    stored = read_tensors(path)
    stored_names = list(stored)
    expected = {name: p.shape for name, p in model.named_parameters()}
    expected.update({name: b.shape for name, b in model.named_buffers()})
    for i, (name, shape) in enumerate(expected.items()):
        if name not in stored:
            found = stored_names[i] if i < len(stored_names) else "end of file"
            raise WeightMismatchError(f"missing leaf {name!r}; first divergence at entry {i}: file has {found!r}")
        if tuple(stored[name].shape) != tuple(shape):
            raise WeightMismatchError(
                f"shape mismatch for {name!r}: model {tuple(shape)}, file {stored[name].shape}")
    extra = [n for n in stored_names if n not in expected]
    if extra:
        raise WeightMismatchError(f"unexpected leaf {extra[0]!r} in file ({len(extra)} extra)")
    model.load_state_dict(stored)


def summary(model: Module) -> str:
    """Indented module tree with per-leaf parameter counts and the total."""
    lines = [f"Total params: {count_params(model):,}", f"Trainable params: {count_params(model, True):,}", ""]

    def walk(mod: Module, name: str, depth: int):
        pad = "  " * depth
        own = [(n, p) for n, p in vars(mod).items() if isinstance(p, Parameter)]
        extra = mod.extra_repr()
        label = f"({name}): " if name else ""
        kids = list(mod.children())
        head = f"{pad}{label}{type(mod).__name__}({extra})"
        if not kids and not own:
            lines.append(head)
            return
        if not kids:
            counts = ", ".join(f"{n}={p.size:,}" for n, p in own)
            lines.append(f"{head}  [{counts}]")
            return
        lines.append(f"{pad}{label}{type(mod).__name__}(")
        for n, p in own:
            lines.append(f"{pad}  ({n}): Parameter{tuple(p.shape)}  [{p.size:,}]")
        for cname, child in kids:
            walk(child, cname, depth + 1)
        lines.append(f"{pad})")

    walk(model, "", 0)
    return "\n".join(lines)
