"""STFT, mel filterbank and the two log-mel front-ends (CNN and AST)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .audio import SAMPLE_RATE, StandardWaveform
from .container import read_tensors, write_tensors

LOG_FLOOR = 1e-10

# CNN front-end: 80,000 samples -> 128 x 157, the only natural setting that
# yields the 19,456-wide flatten of the CNN after three 2x2 pools.
CNN_N_FFT = 1024
CNN_HOP = 512
N_MELS = 128

# AST front-end, constants from the checkpoint's feature extractor
AST_WIN = 400
AST_HOP = 160
AST_N_FFT = 512
AST_FMIN = 20.0
AST_FRAMES = 1024
AST_MEAN = -4.2677393
AST_STD = 4.5689974
PCM16_SCALE = 32768.0


class FeatureConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    win_length: int | None = None
    hop_length: int = 512
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.win_length is not None and self.win_length > self.n_fft:
            raise FeatureConfigError("win_length must not exceed n_fft")
        if self.hop_length < 1:
            raise FeatureConfigError("hop_length must be >= 1")

    @property
    def win(self) -> int:
        return self.win_length or self.n_fft


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (n_mels, n_frames)
    scale: str = "log-mel"

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@lru_cache(maxsize=16)
def _padded_window(kind: str, win_length: int, n_fft: int) -> np.ndarray:
    name = "boxcar" if kind in ("rect", "rectangular", "boxcar") else kind
    w = get_window(name, win_length, fftbins=True)
    left = (n_fft - win_length) // 2
    return np.pad(w, (left, n_fft - win_length - left))


def frame_count(n: int, cfg: StftConfig) -> int:
    if cfg.center:
        return 1 + n // cfg.hop_length
    return 1 + (n - cfg.n_fft) // cfg.hop_length


def stft(x: np.ndarray | StandardWaveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex spectrogram of shape (n_fft // 2 + 1, n_frames)."""
    if isinstance(x, StandardWaveform):
        x = x.samples
    x = np.asarray(x, dtype=np.float64)
    if cfg.center:
        x = np.pad(x, cfg.n_fft // 2, mode="reflect")
    frames = sliding_window_view(x, cfg.n_fft)[:: cfg.hop_length]
    window = _padded_window(cfg.window, cfg.win, cfg.n_fft)
    return np.fft.rfft(frames * window, axis=-1).T


def istft(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    window = _padded_window(cfg.window, cfg.win, cfg.n_fft)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=-1) * window
    n_frames = frames.shape[0]
    total = cfg.n_fft + cfg.hop_length * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    wsq = window**2
    for i in range(n_frames):
        s = i * cfg.hop_length
        y[s:s + cfg.n_fft] += frames[i]
        norm[s:s + cfg.n_fft] += wsq
    nz = norm > 1e-11
    y[nz] /= norm[nz]
    if cfg.center:
        y = y[cfg.n_fft // 2:]
    if length is not None:
        y = y[:length] if len(y) >= length else np.pad(y, (0, length - len(y)))
    return y


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = CNN_N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK filters, peak 1, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    if fmax > sr / 2:
        raise FeatureConfigError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    if not 0 <= fmin < fmax:
        raise FeatureConfigError("need 0 <= fmin < fmax")
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS, sr: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float | None = None):
    fmax = sr / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def _samples(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, StandardWaveform) else w, dtype=np.float64)


CNN_STFT = StftConfig(n_fft=CNN_N_FFT, hop_length=CNN_HOP, window="hann", center=True)
AST_STFT = StftConfig(n_fft=AST_N_FFT, win_length=AST_WIN, hop_length=AST_HOP, window="hann", center=False)


def melspec_cnn(w: StandardWaveform | np.ndarray) -> FeatureMap:
    power = np.abs(stft(_samples(w), CNN_STFT)) ** 2
    mel = mel_filterbank(N_MELS, CNN_N_FFT, SAMPLE_RATE) @ power
    return FeatureMap(np.log(mel + LOG_FLOOR).astype(np.float32), "log-mel")


def melspec_ast(w: StandardWaveform | np.ndarray, n_frames: int = AST_FRAMES) -> FeatureMap:
    """Normalized log-mel, zero-padded (before normalization) or cut to ``n_frames``.

    The waveform is scaled to the int16 range first, matching the checkpoint's
    extractor, so its normalization constants apply.
    """
    x = _samples(w) * PCM16_SCALE
    power = np.abs(stft(x, AST_STFT)) ** 2
    fb = mel_filterbank(N_MELS, AST_N_FFT, SAMPLE_RATE, AST_FMIN, SAMPLE_RATE / 2)
    logmel = np.log(fb @ power + LOG_FLOOR)
    if logmel.shape[1] < n_frames:
        logmel = np.pad(logmel, ((0, 0), (0, n_frames - logmel.shape[1])))
    else:
        logmel = logmel[:, :n_frames]
    return FeatureMap(((logmel - AST_MEAN) / (2 * AST_STD)).astype(np.float32), "normalized-log-mel")


def extract_batch(samples, kind: str = "cnn", n_frames: int = AST_FRAMES) -> np.ndarray:
    """Stack features for a sequence of waveforms into (N, n_mels, n_frames)."""
    if kind == "cnn":
        maps = [melspec_cnn(w).values for w in samples]
    elif kind == "ast":
        maps = [melspec_ast(w, n_frames).values for w in samples]
    else:
        raise FeatureConfigError(f"unknown feature kind {kind!r}")
    return np.stack(maps)


def save_features(path: str | Path, maps: Mapping[str, FeatureMap | np.ndarray]) -> None:
    write_tensors(path, {k: (v.values if isinstance(v, FeatureMap) else v) for k, v in maps.items()})


def load_features(path: str | Path) -> dict[str, np.ndarray]:
    grids = read_tensors(path)
    for name, g in grids.items():
        if g.ndim != 2:
            raise FeatureConfigError(f"{path}: entry {name!r} is not a 2-D grid")
    return grids
