"""Module tree with named parameters, built on the autodiff Tensor."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None


class Module:
    """Attributes that are Parameters, Modules or (via ``register_buffer``)
    arrays form the named tree, in assignment order."""

    head_prefix = ""  # parameter-name prefix of the classification head

    def __init__(self):
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        *mods, leaf = path.split(".")
        m = self
        for part in mods:
            m = getattr(m, part)
        if leaf not in m._buffers:
            raise KeyError(path)
        m._buffers[leaf] = value

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype).reshape(p.shape)
        for name, b in self.named_buffers():
            self.set_buffer(name, np.array(state[name], dtype=b.dtype).reshape(b.shape))

    def set_rng(self, rng: np.random.Generator) -> None:
        """Share one generator among all dropout layers."""
        for _, m in self.named_modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def extra_repr(self) -> str:
        return ""


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return (m for _, m in self.children())

    def __len__(self):
        return sum(1 for _ in self.children())

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(i))


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # torch's default layer init: kaiming_uniform with a = sqrt(5), i.e. bound 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return uniform(rng, shape, bound, dtype)


def uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    u = rng.random(shape, dtype=np.float32 if np.dtype(dtype) == np.float32 else np.float64)
    u *= 2.0 * bound
    u -= bound
    return u


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *, role: str | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.role = role
        self.weight = Parameter(_kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(uniform(rng, (out_features,), 1.0 / math.sqrt(in_features), dtype)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self):
        return f"{self.in_features}, {self.out_features}"


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0,
                 *, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(_kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(uniform(rng, (out_channels,), 1.0 / math.sqrt(fan_in), dtype))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def extra_repr(self):
        return f"{self.in_channels}, {self.out_channels}"


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        out, mean, var = F.batchnorm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                                       self._buffers["running_var"], self.training, self.momentum, self.eps)
        if self.training:
            self._buffers["running_mean"] = mean.astype(self.weight.dtype)
            self._buffers["running_var"] = var.astype(self.weight.dtype)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return F.layernorm(x, self.weight, self.bias, self.eps)

    def extra_repr(self):
        return f"({self.dim},)"


class Dropout(Module):
    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability {p} outside [0, 1)")
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class GELU(Module):
    def forward(self, x):
        return F.gelu(x)


class MaxPool2d(Module):
    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x):
        return F.maxpool2d(x, self.kernel)
