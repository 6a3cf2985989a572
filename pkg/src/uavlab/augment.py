"""Waveform augmentations and dataset inflation.

All transforms map a :class:`StandardWaveform` to another one of the same
length; they run on raw audio, before any feature extraction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .audio import N_SAMPLES, SAMPLE_RATE, StandardWaveform, fix_length, resample
from .features import StftConfig, istft, stft

VOCODER_STFT = StftConfig(n_fft=2048, hop_length=512, window="hann", center=True)


class AugmentConfigError(ValueError):
    pass


# legal parameter bounds per kind; a spec's sampling range must sit inside
LEGAL_BOUNDS: dict[str, tuple[float, float]] = {
    "polarity_inversion": (0.0, 0.0),
    "gaussian_noise": (0.001, 0.05),
    "time_stretch": (0.8, 1.25),
    "pitch_shift": (-4.0, 4.0),
    "tanh_distortion": (1.0, 20.0),
    "sin_distortion": (1.0, 20.0),
}

DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "polarity_inversion": (0.0, 0.0),
    "gaussian_noise": (0.001, 0.015),
    "time_stretch": (0.8, 1.25),
    "pitch_shift": (-2.0, 2.0),
    "tanh_distortion": (1.0, 10.0),
    "sin_distortion": (1.0, 4.0),
}


def _check(kind: str, value: float) -> None:
    lo, hi = LEGAL_BOUNDS[kind]
    if not lo <= value <= hi:
        raise AugmentConfigError(f"{kind} parameter {value} outside [{lo}, {hi}]")


def _wrap(w: StandardWaveform, y: np.ndarray) -> StandardWaveform:
    return w.with_samples(np.asarray(y, dtype=np.float32))


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def polarity_inversion(w: StandardWaveform) -> StandardWaveform:
    return _wrap(w, -w.samples)


def gaussian_noise(w: StandardWaveform, amplitude: float, rng: np.random.Generator) -> StandardWaveform:
    _check("gaussian_noise", amplitude)
    y = w.samples.astype(np.float64) + amplitude * rng.standard_normal(len(w.samples))
    return _wrap(w, y)


def phase_vocoder(x: np.ndarray, rate: float, cfg: StftConfig = VOCODER_STFT) -> np.ndarray:
    """Stretch ``x`` to ``len(x) / rate`` samples keeping its pitch."""
    spec = stft(x, cfg)
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    padded = np.pad(spec, ((0, 0), (0, 2)))
    idx = steps.astype(int)
    frac = steps - idx
    left, right = padded[:, idx], padded[:, idx + 1]
    mag = (1 - frac) * np.abs(left) + frac * np.abs(right)

    # expected per-hop phase advance of each bin, plus the wrapped deviation
    advance = np.linspace(0, np.pi * cfg.hop_length, n_bins)[:, None]
    dphase = np.angle(right) - np.angle(left) - advance
    dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
    increments = advance + dphase
    phase = np.angle(spec[:, :1]) + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(increments[:, :-1], axis=1)], axis=1
    )
    return istft(mag * np.exp(1j * phase), cfg, length=int(round(len(x) / rate)))


def time_stretch(w: StandardWaveform, rate: float) -> StandardWaveform:
    _check("time_stretch", rate)
    y = phase_vocoder(w.samples.astype(np.float64), rate)
    return _wrap(w, fix_length(y, N_SAMPLES))


def pitch_shift(w: StandardWaveform, semitones: float, limit: float | None = 4.0) -> StandardWaveform:
    """Shift by ``semitones``: stretch by 2**(s/12), then resample back.

    ``limit=None`` lifts the +-4 semitone range (used for octave fixtures).
    """
    if limit is not None and abs(semitones) > limit:
        raise AugmentConfigError(f"pitch_shift of {semitones} semitones outside +-{limit}")
    if semitones == 0:
        rate = 1.0
    else:
        rate = 2.0 ** (-semitones / 12.0)
    stretched = phase_vocoder(w.samples.astype(np.float64), rate)
    y = resample(stretched, SAMPLE_RATE / rate, SAMPLE_RATE)
    return _wrap(w, fix_length(y, N_SAMPLES))


def _rms_match(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    target, got = _rms(x), _rms(y)
    if target == 0 or got == 0:
        return np.zeros_like(y)
    return y * (target / got)


def tanh_distortion(w: StandardWaveform, drive: float, renormalize: bool = True) -> StandardWaveform:
    _check("tanh_distortion", drive)
    x = w.samples.astype(np.float64)
    y = np.tanh(drive * x)
    return _wrap(w, _rms_match(y, x) if renormalize else y)


def sin_distortion(w: StandardWaveform, drive: float, renormalize: bool = True) -> StandardWaveform:
    """y = sin(pi/2 * drive * x): unity drive maps +-1 onto +-1, higher drive folds."""
    _check("sin_distortion", drive)
    x = w.samples.astype(np.float64)
    y = np.sin(0.5 * np.pi * drive * x)
    return _wrap(w, _rms_match(y, x) if renormalize else y)


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.kind not in LEGAL_BOUNDS:
            raise AugmentConfigError(f"unknown augmentation {self.kind!r}")
        lo, hi = LEGAL_BOUNDS[self.kind]
        if not (lo <= self.low <= self.high <= hi):
            raise AugmentConfigError(
                f"{self.kind} range [{self.low}, {self.high}] not inside legal [{lo}, {hi}]"
            )

    @classmethod
    def default(cls, kind: str) -> "AugmentationSpec":
        if kind not in DEFAULT_RANGES:
            raise AugmentConfigError(f"unknown augmentation {kind!r}")
        return cls(kind, *DEFAULT_RANGES[kind])

    def apply(self, w: StandardWaveform, rng: np.random.Generator) -> StandardWaveform:
        value = rng.uniform(self.low, self.high) if self.high > self.low else self.low
        if self.kind == "polarity_inversion":
            return polarity_inversion(w)
        if self.kind == "gaussian_noise":
            return gaussian_noise(w, value, rng)
        return _PARAMETRIC[self.kind](w, value)


_PARAMETRIC: dict[str, Callable[[StandardWaveform, float], StandardWaveform]] = {
    "time_stretch": time_stretch,
    "pitch_shift": pitch_shift,
    "tanh_distortion": tanh_distortion,
    "sin_distortion": sin_distortion,
}


@dataclass(frozen=True)
class InflationConfig:
    k_per_sample: int = 0
    pool: tuple[AugmentationSpec, ...] = field(default_factory=tuple)
    keep_original: bool = True

    def __post_init__(self):
        if self.k_per_sample < 0:
            raise AugmentConfigError("k_per_sample must be >= 0")
        if self.k_per_sample > 0 and not self.pool:
            raise AugmentConfigError("augmentation pool is empty but k_per_sample > 0")


def augment_copy(w: StandardWaveform, pool: Sequence[AugmentationSpec], rng: np.random.Generator) -> StandardWaveform:
    """Apply every spec in ``pool`` in order, each with a fresh parameter draw."""
    y = w
    for spec in pool:
        y = spec.apply(y, rng)
    tag = "+".join(s.kind for s in pool)
    return y.with_samples(y.samples, provenance=f"augmented:{tag}")


def inflate(dataset: Sequence[StandardWaveform], cfg: InflationConfig,
            rng: np.random.Generator | int = 0) -> list[StandardWaveform]:
    """Originals (if kept) plus ``k_per_sample`` augmented copies of each sample.

    Sample ``i`` draws from its own stream spawned from the root seed, so the
    result does not depend on processing order.
    """
    if not dataset:
        raise AugmentConfigError("cannot inflate an empty dataset")
    if cfg.k_per_sample == 0:
        return list(dataset) if cfg.keep_original else []
    root = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    out: list[StandardWaveform] = []
    for i, w in enumerate(dataset):
        if cfg.keep_original:
            out.append(w)
        stream = np.random.default_rng([root, i])
        for _ in range(cfg.k_per_sample):
            out.append(augment_copy(w, cfg.pool, stream))
    return out
