"""Shared test utilities: finite-difference gradient checks and signal fixtures."""
from __future__ import annotations

import numpy as np

from uavlab.audio import N_SAMPLES, SAMPLE_RATE, StandardWaveform
from uavlab.autodiff import Tensor
from uavlab.models import AstConfig

# tiny f64 transformer for gradient checks
GRAD_AST = AstConfig(hidden=16, layers=1, heads=2, intermediate=32, n_mels=32, n_frames=32, n_classes=3,
                     dropout_p=0.0)


def sine(freq: float, n: int = N_SAMPLES, sr: int = SAMPLE_RATE, amp: float = 1.0) -> np.ndarray:
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / sr)


def wave(x: np.ndarray, label: int | None = None) -> StandardWaveform:
    return StandardWaveform(np.asarray(x, dtype=np.float32), SAMPLE_RATE, label, "original")


def peak_hz(x: np.ndarray, sr: int = SAMPLE_RATE) -> float:
    spec = np.abs(np.fft.rfft(x))
    return np.argmax(spec) * sr / len(x)


def bin_hz(n: int = N_SAMPLES, sr: int = SAMPLE_RATE) -> float:
    return sr / n


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


def numeric_grad(f, arrays: list[np.ndarray], i: int, weight: np.ndarray, eps: float = 1e-5,
                 coords=None) -> np.ndarray:
    """Central differences of sum(f(arrays) * weight) w.r.t. arrays[i]."""
    x = arrays[i]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for j in idx:
        old = flat[j]
        flat[j] = old + eps
        hi = float((f(*[Tensor(a) for a in arrays]).data * weight).sum())
        flat[j] = old - eps
        lo = float((f(*[Tensor(a) for a in arrays]).data * weight).sum())
        flat[j] = old
        g.reshape(-1)[j] = (hi - lo) / (2 * eps)
    return g


def gradcheck(f, *arrays: np.ndarray, seed: int = 0, check=None) -> float:
    """Worst relative error between backward and central differences over all inputs in ``check``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    weight = rng.standard_normal(out.shape)
    (out * weight).sum().backward()
    worst = 0.0
    for i in (range(len(arrays)) if check is None else check):
        num = numeric_grad(f, arrays, i, weight)
        worst = max(worst, rel_err(leaves[i].grad, num))
    return worst
