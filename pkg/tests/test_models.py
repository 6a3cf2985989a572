import dataclasses

import numpy as np
import pytest

from uavlab.autodiff import no_grad
from uavlab.models import (TOY_AST, AstConfig, CnnConfig, ModelConfigError, WeightMismatchError, build_ast,
                           build_cnn, count_params, load_weights, save_weights, subtotal, summary)
from uavlab.trainkit import FeatureSet, TrainConfig, evaluate, train

SMALL_CNN = CnnConfig(in_mels=16, in_frames=16, channels=(4, 8), fc_hidden=16, n_classes=2, dropout_p=0.0,
                      flatten_dim=8 * 4 * 4)


def ast_formula(c: AstConfig) -> int:
    """Closed-form parameter count for an AST configuration."""
    h, i = c.hidden, c.intermediate
    emb = c.patch * c.patch * h + h + 2 * h + c.seq_len * h
    block = 4 * (h * h + h) + 2 * h * i + i + h + 4 * h
    return emb + c.layers * block + 2 * h + 2 * h + h * c.n_classes + c.n_classes


@pytest.fixture(scope="module")
def full_ast():
    return build_ast()


def test_cnn_count():
    assert count_params(build_cnn()) == 5_006_825


def test_cnn_flatten_mismatch_is_reported():
    with pytest.raises(ModelConfigError, match="19456"):
        build_cnn(dataclasses.replace(CnnConfig(), flatten_dim=1000))


def test_ast_count_and_subtotals(full_ast):
    assert count_params(full_ast) == 86_195_721
    assert subtotal(full_ast, "audio_spectrogram_transformer.embeddings") == 1_131_264
    assert subtotal(full_ast, "audio_spectrogram_transformer.encoder.layer.0") == 7_087_872
    assert subtotal(full_ast, "audio_spectrogram_transformer.layernorm") == 1_536
    assert subtotal(full_ast, "classifier") == 8_457


@pytest.mark.parametrize("cfg", [TOY_AST, AstConfig(hidden=32, layers=3, heads=4, intermediate=48, n_frames=64,
                                                    n_classes=5, patch=8, stride=8)])
def test_ast_count_matches_formula(cfg):
    assert count_params(build_ast(cfg)) == ast_formula(cfg)


def test_class_count_changes_only_head(full_ast):
    two = build_ast(dataclasses.replace(AstConfig(), n_classes=2))
    assert count_params(full_ast) - count_params(two) == 7 * 768 + 7
    cnn2 = build_cnn(dataclasses.replace(CnnConfig(), n_classes=2))
    assert count_params(build_cnn()) - count_params(cnn2) == 7 * 256 + 7


def test_forward_shapes():
    cnn = build_cnn().eval()
    with no_grad():
        assert cnn(np.zeros((2, 128, 157), np.float32)).shape == (2, 9)
    toy = build_ast(TOY_AST).eval()
    with no_grad():
        assert toy(np.zeros((3, 128, 128), np.float32)).shape == (3, 9)
    with pytest.raises(ModelConfigError):
        toy(np.zeros((1, 128, 100), np.float32))


def test_bad_ast_configs():
    with pytest.raises(ModelConfigError):
        build_ast(dataclasses.replace(TOY_AST, heads=5))
    with pytest.raises(ModelConfigError):
        build_ast(dataclasses.replace(TOY_AST, n_frames=8))


def test_summary_lists_total():
    s = summary(build_cnn())
    assert "Total params: 5,006,825" in s
    assert "fc1" in s and "conv3" in s


def test_weights_roundtrip(tmp_path):
    a, b = build_ast(TOY_AST, seed=1), build_ast(TOY_AST, seed=2)
    save_weights(a, tmp_path / "w.uvtc")
    load_weights(b, tmp_path / "w.uvtc")
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    x = np.random.default_rng(0).standard_normal((2, 128, 128)).astype(np.float32)
    with no_grad():
        assert np.array_equal(a.eval()(x).data, b.eval()(x).data)


def test_weights_missing_leaf_and_wrong_architecture(tmp_path):
    from uavlab.container import read_tensors, write_tensors
    cnn = build_cnn(SMALL_CNN)
    save_weights(cnn, tmp_path / "c.uvtc")
    stored = read_tensors(tmp_path / "c.uvtc")
    del stored["fc1.bias"]
    write_tensors(tmp_path / "broken.uvtc", stored)
    with pytest.raises(WeightMismatchError, match="fc1.bias"):
        load_weights(build_cnn(SMALL_CNN), tmp_path / "broken.uvtc")
    with pytest.raises(WeightMismatchError):
        load_weights(build_ast(TOY_AST), tmp_path / "c.uvtc")


def test_attention_rows_are_stochastic():
    m = build_ast(TOY_AST).eval()
    for att in m.attention_modules():
        att.keep_weights = True
    with no_grad():
        m(np.random.default_rng(0).standard_normal((2, 128, 128)).astype(np.float32))
    for att in m.attention_modules():
        probs = att.last_weights
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
        assert np.all(probs >= 0)


def test_eval_mode_is_deterministic():
    m = build_ast(TOY_AST).eval()
    x = np.random.default_rng(0).standard_normal((2, 128, 128)).astype(np.float32)
    with no_grad():
        assert np.array_equal(m(x).data, m(x).data)


def separable(n, shape, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, *shape)).astype(np.float32) * 0.5
    x[y == 1, : shape[0] // 2] += 1.5
    return FeatureSet(x, y, np.zeros(n, bool))


def test_cnn_learns_separable_toy():
    data = separable(64, (16, 16))
    m = build_cnn(SMALL_CNN, seed=0)
    train(m, data, None, TrainConfig(lr=3e-3, batch_size=8, accumulation_steps=1, epochs=5))
    assert evaluate(m, separable(32, (16, 16), seed=1)).accuracy >= 0.9


def test_ast_learns_separable_toy():
    cfg = AstConfig(hidden=32, layers=1, heads=2, intermediate=64, n_mels=32, n_frames=32, patch=8, stride=8,
                    n_classes=2, dropout_p=0.0)
    m = build_ast(cfg, seed=0)
    train(m, separable(64, (32, 32)), None, TrainConfig(lr=1e-3, batch_size=8, accumulation_steps=1, epochs=8))
    assert evaluate(m, separable(32, (32, 32), seed=1)).accuracy >= 0.9
