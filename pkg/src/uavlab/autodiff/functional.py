"""Differentiable ops. Every function takes Tensors (or array-likes) and never
mutates its inputs."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import GraphError, Tensor, make_node


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return a, b


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make_node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return make_node(out, (a, b), back, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return make_node(a.data ** exponent, (a,),
                     lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)
    return make_node(out, (a,), back, "gelu")


# -- reductions and shape ----------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_node(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise GraphError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(a_ % a.ndim for a_ in axes)
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_node(np.broadcast_to(a.data, shape), (a,),
                     lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Slicing and integer-array gathers (embedding lookups)."""
    out = a.data[index]
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)
    return make_node(np.array(out, copy=True), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise GraphError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# -- linear algebra -------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError(f"matmul needs >= 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise GraphError(f"matmul: cannot broadcast batch dims of {a.shape} @ {b.shape}") from None

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b with W of shape (out, in); x may carry any leading dims."""
    if x.shape[-1] != weight.shape[1]:
        raise GraphError(f"linear: input features {x.shape[-1]} != weight in_features {weight.shape[1]} "
                         f"(input {x.shape}, weight {weight.shape})")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, x.shape[-1])) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads
    return make_node(out, parents, back, "linear")


def inv(a: Tensor) -> Tensor:
    """Batched matrix inverse over the last two axes."""
    out = np.linalg.inv(a.data)

    def back(g):
        ot = np.swapaxes(out, -1, -2)
        return (-(ot @ g @ ot),)
    return make_node(out, (a,), back, "inv")


def spectral_delta(coeffs: Tensor, rows: np.ndarray, cols: np.ndarray,
                   shape: tuple[int, int], scaling: float) -> Tensor:
    """scaling * Re(ifft2(F)) where F is zero except F[rows, cols] = coeffs.

    ``ifft2`` carries the 1/(m n) normalization, so a single coefficient c at
    frequency (0, 0) yields the constant matrix scaling * c / (m n).
    """
    dense = np.zeros(shape, dtype=np.complex128)
    dense[rows, cols] = coeffs.data
    out = (np.fft.ifft2(dense).real * scaling).astype(coeffs.dtype)

    def back(g):
        # d/dc_k = scaling * Re(ifft2(G))[rows_k, cols_k] for real G
        return ((np.fft.ifft2(g).real[rows, cols] * scaling).astype(coeffs.dtype),)
    return make_node(out, (coeffs,), back, "spectral_delta")


# -- convolution and pooling -------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, x (B, C, H, W), weight (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise GraphError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    o, c, kh, kw = weight.shape
    b = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise GraphError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads
    return make_node(out, parents, back, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling (stride k, floor); ties go to the first index."""
    b, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho == 0 or wo == 0:
        raise GraphError(f"maxpool2d: input {x.shape} smaller than kernel {kernel}")
    crop = x.data[:, :, :ho * kernel, :wo * kernel]
    blocks = crop.reshape(b, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = (np.arange(kernel * kernel) == arg[..., None]) * g[..., None]
        spread = onehot.reshape(b, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros_like(x.data)
        full[:, :, :ho * kernel, :wo * kernel] = spread.reshape(b, c, ho * kernel, wo * kernel)
        return (full,)
    return make_node(out, (x,), back, "maxpool2d")


# -- normalization ---------------------------------------------------------------------

def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes, n: int) -> np.ndarray:
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * x_hat).sum(axis=axes, keepdims=True)
    return inv_std * (g_hat - s1 / n - x_hat * s2 / n)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Returns ``(out, new_running_mean, new_running_var)``; buffers are not touched."""
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise GraphError(f"batchnorm2d: input {x.shape} does not match {gamma.shape[0]} channels")
    shape = (1, -1, 1, 1)
    g_ = gamma.data.reshape(shape)
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = (g_ * inv_std.reshape(shape)).astype(x.dtype)
        x_hat = (x.data - running_mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape).astype(x.dtype)
        out = x.data * scale + (beta.data - running_mean * gamma.data * inv_std).reshape(shape).astype(x.dtype)

        def back_eval(g):
            return (g * scale,
                    (g * x_hat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))
        return make_node(out, (x, gamma, beta), back_eval, "batchnorm2d"), running_mean, running_var

    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out = x_hat * g_ + beta.data.reshape(shape)
    unbiased = var.reshape(-1) * (n / max(n - 1, 1))
    new_mean = (1 - momentum) * running_mean + momentum * mu.reshape(-1)
    new_var = (1 - momentum) * running_var + momentum * unbiased

    def back(g):
        gx = _normalize_backward(g * g_, x_hat, inv_std, axes, n) if x.requires_grad else None
        return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)
    return make_node(out, (x, gamma, beta), back, "batchnorm2d"), new_mean, new_var


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise GraphError(f"layernorm: normalized dim {d} != gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out = x_hat * gamma.data + beta.data

    def back(g):
        gx = _normalize_backward(g * gamma.data, x_hat, inv_std, -1, d) if x.requires_grad else None
        lead = tuple(range(g.ndim - 1))
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)
    return make_node(out, (x, gamma, beta), back, "layernorm")


# -- probabilities and losses --------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_node(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)
    return make_node(out, (x,), back, "log_softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise GraphError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), targets].mean()

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(b), targets] -= 1.0
        return (grad * (g / b),)
    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise GraphError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, dropout_p: float = 0.0,
                                 training: bool = False, rng: np.random.Generator | None = None):
    """softmax(q k^T / sqrt(d)) v over the last two axes. Returns (output, attention weights)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise GraphError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return matmul(dropout(weights, dropout_p, training, rng), v), weights
