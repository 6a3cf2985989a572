"""Finite-difference cases: every autodiff op plus one adapter leaf per PEFT method."""
from __future__ import annotations

import numpy as np

from uavlab.autodiff import Tensor, no_grad
from uavlab.autodiff import functional as F
from uavlab.models import build_ast
from uavlab.peft import AdapterConfig, apply_adapter

from helpers import GRAD_AST, gradcheck, rel_err

R = np.random.default_rng(42)


def r(*shape, lo=None):
    x = R.standard_normal(shape)
    return np.abs(x) + lo if lo is not None else x


def spaced(*shape):
    # distinct, well-separated values so max/relu never sit on a tie or kink
    n = int(np.prod(shape))
    v = (R.permutation(n) - n / 2 + 0.5) * 0.37
    return v.reshape(shape)


def _bn_train(x, g, b):
    return F.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True)[0]


def _bn_eval(x, g, b):
    return F.batchnorm2d(x, g, b, np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 2.0]), False)[0]


def _dropout(x):
    return F.dropout(x, 0.3, True, np.random.default_rng(7))


def _attention(q, k, v):
    return F.scaled_dot_product_attention(q, k, v)[0]


def _ce(z):
    return F.cross_entropy(z, np.array([0, 2, 1, 2]))


_ROWS, _COLS = np.array([0, 1, 3, 2, 0]), np.array([0, 2, 1, 4, 3])

OP_CASES = {
    "add": (F.add, [r(3, 4), r(4)]),
    "sub": (F.sub, [r(3, 4), r(3, 1)]),
    "mul": (F.mul, [r(2, 3), r(2, 3)]),
    "div": (F.div, [r(2, 3), r(2, 3, lo=0.5)]),
    "power": (lambda a: F.power(a, 3.0), [r(2, 3)]),
    "exp": (F.exp, [r(3, 3)]),
    "log": (F.log, [r(3, 3, lo=0.2)]),
    "tanh": (F.tanh, [r(3, 4)]),
    "relu": (F.relu, [spaced(3, 4)]),
    "gelu": (F.gelu, [r(3, 4)]),
    "sum": (lambda a: F.sum(a, axis=1, keepdims=True), [r(3, 4)]),
    "mean": (lambda a: F.mean(a, axis=0), [r(3, 4)]),
    "reshape": (lambda a: F.reshape(a, (4, 3)), [r(3, 4)]),
    "transpose": (lambda a: F.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
    "broadcast_to": (lambda a: F.broadcast_to(a, (3, 2, 4)), [r(2, 1)]),
    "getitem_slice": (lambda a: F.getitem(a, (slice(None), slice(1, 3))), [r(3, 4)]),
    "getitem_fancy": (lambda a: F.getitem(a, np.array([0, 2, 0])), [r(3, 4)]),
    "concat": (lambda a, b: F.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
    "matmul": (F.matmul, [r(3, 4), r(4, 2)]),
    "matmul_batched": (F.matmul, [r(2, 3, 4), r(4, 2)]),
    "linear": (F.linear, [r(2, 3, 4), r(2, 4), r(2)]),
    "linear_nobias": (lambda x, w: F.linear(x, w), [r(3, 4), r(2, 4)]),
    "inv": (F.inv, [np.eye(3) * 2 + r(2, 3, 3) * 0.2]),
    "spectral_delta": (lambda c: F.spectral_delta(c, _ROWS, _COLS, (4, 5), 3.0), [r(5)]),
    "conv2d_pad1": (lambda x, w, b: F.conv2d(x, w, b, 1, 1), [r(2, 2, 4, 4), r(3, 2, 3, 3), r(3)]),
    "conv2d_stride2": (lambda x, w, b: F.conv2d(x, w, b, 2, 0), [r(1, 2, 4, 4), r(2, 2, 2, 2), r(2)]),
    "maxpool2d": (F.maxpool2d, [spaced(2, 2, 4, 5)]),
    "batchnorm2d_train": (_bn_train, [r(3, 3, 2, 2), r(3), r(3)]),
    "batchnorm2d_eval": (_bn_eval, [r(2, 3, 2, 2), r(3), r(3)]),
    "layernorm": (lambda x, g, b: F.layernorm(x, g, b, 1e-12), [r(3, 4), r(4), r(4)]),
    "softmax": (F.softmax, [r(3, 4)]),
    "log_softmax": (F.log_softmax, [r(3, 4)]),
    "cross_entropy": (_ce, [r(4, 3)]),
    "dropout": (_dropout, [r(3, 4)]),
    "attention": (_attention, [r(2, 3, 4), r(2, 3, 4), r(2, 3, 4)]),
}


def check_op(name: str) -> float:
    f, arrays = OP_CASES[name]
    return gradcheck(f, *[a.copy() for a in arrays])


ADAPTERS = {
    "lora": (AdapterConfig("lora", r=2, alpha=4, targets=("query", "value")), "lora_B"),
    "adalora": (AdapterConfig("adalora", init_rank=3, target_rank=1, targets=("query", "value"), total_steps=10),
                "lora_E"),
    "ia3": (AdapterConfig("ia3", targets=("key", "intermediate")), "ia3_l"),
    "oft": (AdapterConfig("oft", n_blocks=4, targets=("query", "attn_output")), "oft_S"),
    "fourierft": (AdapterConfig("fourierft", n_coeffs=20, scaling=10.0, targets=("value",)), "spectrum"),
}


def check_adapter(method: str, n_coords: int = 12) -> float:
    """Finite-difference check of one adapter leaf inside a tiny f64 transformer."""
    cfg, leaf = ADAPTERS[method]
    model = build_ast(GRAD_AST, seed=1, dtype=np.float64)
    apply_adapter(model, cfg)
    model.eval()
    name, p = next((n, p) for n, p in model.named_parameters() if n.endswith(leaf))
    rng = np.random.default_rng(3)
    if method != "lora":
        # move away from the identity point so every path through the leaf is exercised
        p.data = p.data + rng.standard_normal(p.shape) * 0.1
    x = rng.standard_normal((2, GRAD_AST.n_mels, GRAD_AST.n_frames))
    y = np.array([0, 2])

    def loss_of(arr):
        old = p.data
        p.data = arr
        with no_grad():
            v = F.cross_entropy(model(x), y).item()
        p.data = old
        return v

    loss = F.cross_entropy(model(x), y)
    loss.backward()
    analytic = p.grad.reshape(-1)
    coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
    num = np.empty(len(coords))
    base = p.data.copy()
    for k, j in enumerate(coords):
        hi, lo = base.copy(), base.copy()
        hi.reshape(-1)[j] += 1e-5
        lo.reshape(-1)[j] -= 1e-5
        num[k] = (loss_of(hi) - loss_of(lo)) / 2e-5
    return rel_err(analytic[coords], num)
