"""Audio I/O, standardization to 16 kHz mono 5 s buffers, and the synthetic UAV corpus."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
DURATION_S = 5
N_SAMPLES = SAMPLE_RATE * DURATION_S
N_CLASSES = 9

# resampler quality floor
KAISER_BETA = 8.6
ZERO_CROSSINGS = 64


class AudioFormatError(ValueError):
    """Malformed or truncated audio file."""


class UnsupportedAudioError(ValueError):
    """Well-formed file in an encoding we do not read."""


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class RawWaveform:
    channels: np.ndarray  # (n_channels, n_samples)
    sample_rate: int

    def __post_init__(self):
        if self.channels.ndim != 2:
            raise ValueError("channels must be a 2-D (n_channels, n_samples) array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def duration_s(self) -> float:
        return self.channels.shape[1] / self.sample_rate


@dataclass(frozen=True)
class StandardWaveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: int | None = None
    provenance: str = "original"

    def __post_init__(self):
        if self.samples.shape != (N_SAMPLES,):
            raise ValueError(f"standard waveform must hold {N_SAMPLES} samples, got {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"standard waveform sample rate is {SAMPLE_RATE}")
        if self.label is not None and not 0 <= self.label < N_CLASSES:
            raise ValueError(f"label {self.label} outside [0, {N_CLASSES})")

    @property
    def is_augmented(self) -> bool:
        return self.provenance.startswith("augmented")

    def with_samples(self, samples: np.ndarray, provenance: str | None = None) -> "StandardWaveform":
        return replace(self, samples=samples, provenance=self.provenance if provenance is None else provenance)


# ---------------------------------------------------------------------------
# WAV I/O

def load_wav(path: str | Path) -> RawWaveform:
    """Read a RIFF WAV (PCM 8/16/24/32-bit or float) as floats in [-1, 1]."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            # scipy only warns on a short data chunk; we refuse partial results
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except wavfile.WavFileWarning as exc:
        raise AudioFormatError(f"{path}: {exc}") from None
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg:
            raise UnsupportedAudioError(f"{path}: {msg}") from None
        raise AudioFormatError(f"{path}: {msg}") from None
    except Exception as exc:  # struct.error and friends on short headers
        raise AudioFormatError(f"{path}: {exc}") from None

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit PCM arrives left-justified in int32, so one scale fits both
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise UnsupportedAudioError(f"{path}: unsupported sample type {data.dtype}")
    x = x.reshape(len(x), -1).T
    return RawWaveform(np.ascontiguousarray(x), int(rate))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write PCM16. ``samples`` is (n,) or (n_channels, n)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x.T
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate, pcm)


# ---------------------------------------------------------------------------
# Resampling

@lru_cache(maxsize=32)
def _sinc_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass at the narrower Nyquist, designed at rate ``sr * up``."""
    factor = max(up, down)
    half = ZERO_CROSSINGS * factor
    n = np.arange(-half, half + 1, dtype=np.float64)
    h = np.sinc(n / factor) / factor
    h *= np.kaiser(len(n), KAISER_BETA)
    return h


def resample(x: np.ndarray, orig_sr: int, target_sr: int | float) -> np.ndarray:
    """Polyphase windowed-sinc resampling along the last axis.

    Non-integer ratios are approximated by the nearest fraction with a
    denominator below 1000.
    """
    if orig_sr == target_sr:
        return np.array(x, dtype=np.float64)
    ratio = Fraction(target_sr / orig_sr).limit_denominator(1000) if not (
        float(orig_sr).is_integer() and float(target_sr).is_integer()
    ) else Fraction(int(target_sr), int(orig_sr))
    up, down = ratio.numerator, ratio.denominator
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, axis=-1, window=_sinc_filter(up, down))


def fix_length(x: np.ndarray, n: int = N_SAMPLES) -> np.ndarray:
    """Trailing zero-pad or keep the head."""
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - len(x), dtype=x.dtype)])


def standardize(raw: RawWaveform, label: int | None = None, provenance: str = "original") -> StandardWaveform:
    if raw.channels.shape[1] == 0:
        raise EmptyInputError("cannot standardize a zero-length waveform")
    mono = raw.channels.mean(axis=0)
    if raw.sample_rate != SAMPLE_RATE:
        mono = resample(mono, raw.sample_rate, SAMPLE_RATE)
    return StandardWaveform(fix_length(mono).astype(np.float32), SAMPLE_RATE, label, provenance)


def as_raw(w: StandardWaveform) -> RawWaveform:
    return RawWaveform(np.asarray(w.samples, dtype=np.float64)[None, :], w.sample_rate)


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass(frozen=True)
class SynthClassParams:
    class_id: int
    fundamental_hz: float
    n_harmonics: int = 8
    harmonic_decay: float = 0.7
    am_rate_hz: float = 20.0
    noise_snr_db: float = 20.0
    am_depth: float = 0.5

    def __post_init__(self):
        if not 0 <= self.class_id < N_CLASSES:
            raise ValueError(f"class_id {self.class_id} outside [0, {N_CLASSES})")
        if not 80.0 <= self.fundamental_hz <= 500.0:
            raise ValueError(f"fundamental {self.fundamental_hz} Hz outside [80, 500]")
        if self.n_harmonics < 3:
            raise ValueError("need at least 3 harmonics")


CLASS_FUNDAMENTALS = (110, 150, 190, 230, 270, 310, 350, 390, 430)
CLASS_AM_RATES = (10, 15, 20, 25, 30, 35, 40, 45, 50)
CLASS_NAMES = tuple(f"synth{f}hz" for f in CLASS_FUNDAMENTALS)


def default_class_params(snr_db: float = 20.0) -> list[SynthClassParams]:
    return [
        SynthClassParams(c, float(f), 8, 0.7, float(am), snr_db)
        for c, (f, am) in enumerate(zip(CLASS_FUNDAMENTALS, CLASS_AM_RATES))
    ]


def _harmonic_signal(params: SynthClassParams, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(N_SAMPLES) / SAMPLE_RATE
    phases = rng.uniform(0, 2 * np.pi, params.n_harmonics)
    sig = np.zeros(N_SAMPLES)
    for k in range(1, params.n_harmonics + 1):
        f = k * params.fundamental_hz
        if f >= SAMPLE_RATE / 2:
            break
        sig += params.harmonic_decay ** (k - 1) * np.sin(2 * np.pi * f * t + phases[k - 1])
    am_phase = rng.uniform(0, 2 * np.pi)
    return sig * (1.0 + params.am_depth * np.sin(2 * np.pi * params.am_rate_hz * t + am_phase))


def harmonic_reference(params: SynthClassParams, seed: int) -> np.ndarray:
    """The noise-free component of :func:`synth_sample`, peak-normalized to 0.9."""
    sig = _harmonic_signal(params, np.random.default_rng(seed))
    return 0.9 * sig / np.max(np.abs(sig))


def synth_sample(params: SynthClassParams, seed: int) -> StandardWaveform:
    rng = np.random.default_rng(seed)
    sig = _harmonic_signal(params, rng)
    if math.isfinite(params.noise_snr_db):
        noise_power = np.mean(sig**2) / 10 ** (params.noise_snr_db / 10)
        sig = sig + rng.standard_normal(N_SAMPLES) * np.sqrt(noise_power)
    sig = 0.9 * sig / np.max(np.abs(sig))
    return StandardWaveform(sig.astype(np.float32), SAMPLE_RATE, params.class_id, f"synthetic:{seed}")


def sample_seed(root_seed: int, class_id: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, class_id, index]).generate_state(1)[0])


def synth_dataset(n_per_class: int, seed: int = 0, snr_db: float = 20.0,
                  classes: Sequence[SynthClassParams] | None = None) -> list[StandardWaveform]:
    """Labelled synthetic corpus, ``n_per_class`` samples for each of the nine classes."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    classes = list(classes) if classes is not None else default_class_params(snr_db)
    out = []
    for params in classes:
        for i in range(n_per_class):
            out.append(synth_sample(params, sample_seed(seed, params.class_id, i)))
    return out


# ---------------------------------------------------------------------------
# Dataset directory layout: <root>/<class_index>_<class_name>/<sample_id>.wav

def class_dir_name(label: int, names: Sequence[str] = CLASS_NAMES) -> str:
    return f"{label}_{names[label]}"


def write_dataset(root: str | Path, samples: Sequence[StandardWaveform],
                  names: Sequence[str] = CLASS_NAMES) -> list[tuple[str, int, str]]:
    """Write WAVs and return manifest rows ``(relative path, class, provenance)``."""
    root = Path(root)
    rows = []
    counters: dict[int, int] = {}
    for w in samples:
        if w.label is None:
            raise ValueError("cannot place an unlabelled sample in the class layout")
        idx = counters.get(w.label, 0)
        counters[w.label] = idx + 1
        rel = Path(class_dir_name(w.label, names)) / f"{idx:05d}.wav"
        write_wav(root / rel, w.samples)
        rows.append((rel.as_posix(), w.label, w.provenance))
    return rows


def list_dataset(root: str | Path) -> list[tuple[str, int]]:
    """``(relative path, class)`` for every WAV in the class layout, in load order."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyInputError(f"dataset directory {root} does not exist")
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        head = d.name.split("_", 1)[0]
        if not head.isdigit():
            continue
        out.extend((f.relative_to(root).as_posix(), int(head)) for f in sorted(d.glob("*.wav")))
    if not out:
        raise EmptyInputError(f"no class directories with WAV files under {root}")
    return out


def load_dataset(root: str | Path) -> list[StandardWaveform]:
    root = Path(root)
    return [standardize(load_wav(root / rel), label=label, provenance="original")
            for rel, label in list_dataset(root)]
