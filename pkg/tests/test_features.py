import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavlab.audio import N_SAMPLES, synth_dataset
from uavlab.features import (AST_MEAN, AST_STD, AST_STFT, CNN_STFT, LOG_FLOOR, FeatureConfigError, StftConfig,
                             extract_batch, frame_count, hz_to_mel, istft, mel_centers, mel_filterbank,
                             mel_to_hz, melspec_ast, melspec_cnn, stft)
from uavlab.models import CnnConfig

from helpers import sine, wave


def test_cnn_frame_count():
    assert frame_count(N_SAMPLES, CNN_STFT) == 157
    assert stft(np.zeros(N_SAMPLES), CNN_STFT).shape == (513, 157)


def test_sine_peaks_at_expected_bin():
    s = np.abs(stft(sine(1000.0), StftConfig(n_fft=1024, hop_length=512)))
    assert np.all(s.argmax(axis=0)[2:-2] == 64)


def test_parseval_rect_hop_equals_win():
    x = np.random.default_rng(0).standard_normal(N_SAMPLES)
    cfg = StftConfig(n_fft=400, win_length=400, hop_length=400, window="rect", center=False)
    s = stft(x, cfg)
    # one-sided spectrum: interior bins count twice; energy per frame is sum|X|^2 / n_fft
    energy = (np.abs(s[0]) ** 2 + np.abs(s[-1]) ** 2 + 2 * (np.abs(s[1:-1]) ** 2).sum(axis=0)).sum() / 400
    assert abs(energy - (x**2).sum()) / (x**2).sum() < 1e-6


def test_istft_inverts_stft():
    x = np.random.default_rng(1).standard_normal(8000)
    cfg = StftConfig(n_fft=512, hop_length=128)
    np.testing.assert_allclose(istft(stft(x, cfg), cfg, length=len(x)), x, atol=1e-8)


def test_stft_config_validation():
    with pytest.raises(FeatureConfigError):
        StftConfig(n_fft=256, win_length=512)
    with pytest.raises(FeatureConfigError):
        StftConfig(hop_length=0)


def test_mel_filterbank_shape_and_rows():
    fb = mel_filterbank(128, 1024, 16000, 0.0, 8000.0)
    assert fb.shape == (128, 513)
    assert np.all(fb >= 0) and np.all(fb.sum(axis=1) > 0)
    for row in fb:
        nz = np.flatnonzero(row)
        assert np.all(np.diff(nz) == 1), "support must be contiguous"
    assert np.all(np.diff(mel_centers(128)) > 0)


def test_mel_scale_closed_form():
    assert abs(hz_to_mel(1000.0) - 2595 * np.log10(1 + 1000 / 700)) < 1e-9
    assert abs(hz_to_mel(1000.0) - 999.99) < 0.01
    assert abs(mel_to_hz(hz_to_mel(3210.0)) - 3210.0) < 1e-9


def test_filterbank_rejects_fmax_above_nyquist():
    with pytest.raises(FeatureConfigError):
        mel_filterbank(128, 1024, 16000, 0.0, 9000.0)


def test_melspec_cnn_shape_and_flatten_derivation():
    fm = melspec_cnn(wave(sine(440) * 0.5))
    assert fm.values.shape == (128, 157) and fm.scale == "log-mel"
    cfg = CnnConfig()
    assert cfg.computed_flatten() == 64 * (128 // 8) * (((157 // 2) // 2) // 2) == 19456 == cfg.flatten_dim


def test_melspec_cnn_zero_input_is_floor():
    v = melspec_cnn(wave(np.zeros(N_SAMPLES))).values
    assert np.all(v == np.float32(np.log(LOG_FLOOR)))


def test_melspec_cnn_440_lands_in_its_band():
    v = melspec_cnn(wave(sine(440) * 0.5)).values
    row = v.mean(axis=1).argmax()
    fb = mel_filterbank(128, 1024, 16000, 0.0, 8000.0)
    assert fb[row, round(440 / (16000 / 1024))] > 0


def test_melspec_ast_shape_padding_and_normalization():
    fm = melspec_ast(wave(sine(440) * 0.5))
    assert fm.values.shape == (128, 1024) and fm.scale == "normalized-log-mel"
    n = frame_count(N_SAMPLES, AST_STFT)
    assert 495 <= n <= 500
    pad = fm.values[:, n:]
    np.testing.assert_allclose(pad, (0 - AST_MEAN) / (2 * AST_STD), atol=1e-6)


def test_ast_feature_mean_envelope():
    feats = extract_batch(synth_dataset(2, seed=0), "ast")
    assert abs(float(feats.mean())) <= 3


@pytest.mark.parametrize("w", [np.zeros(N_SAMPLES), np.ones(N_SAMPLES), sine(7999.0)])
def test_features_finite(w):
    assert np.all(np.isfinite(melspec_cnn(wave(w)).values))
    assert np.all(np.isfinite(melspec_ast(wave(w)).values))


def test_time_shift_covariance():
    period = 512 // 4  # 125 Hz at 16 kHz is periodic with period 128, which divides the hop
    x = sine(16000 / period, N_SAMPLES + 512) * 0.5
    a = melspec_cnn(wave(x[512:])).values
    b = melspec_cnn(wave(x[:N_SAMPLES])).values
    np.testing.assert_allclose(a[:, 2:-3], b[:, 3:-2], atol=1e-4)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_feature_shapes_constant(seed, amp):
    x = np.random.default_rng(seed).uniform(-1, 1, N_SAMPLES) * amp
    assert melspec_cnn(wave(x)).values.shape == (128, 157)
    assert melspec_ast(wave(x)).values.shape == (128, 1024)
