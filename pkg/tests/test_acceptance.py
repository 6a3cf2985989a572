"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line."""
import json
import time

import numpy as np
import pytest
import yaml

from uavlab.audio import N_SAMPLES, resample
from uavlab.augment import gaussian_noise, pitch_shift, polarity_inversion, time_stretch
from uavlab.autodiff import no_grad
from uavlab.cli import EXIT_OK, main
from uavlab.features import StftConfig, melspec_cnn, stft
from uavlab.models import TOY_AST, AstConfig, CnnConfig, build_ast, build_cnn, count_params, subtotal
from uavlab.peft import ROLES, AdapterConfig, apply_adapter
from uavlab.trainkit import (FeatureSet, ProtocolError, SplitSpec, TrainConfig, compute_metrics, evaluate,
                             make_folds, run_kfold, stratified_split)
from uavlab.trainkit import RunLog

from gradcases import ADAPTERS, OP_CASES, check_adapter, check_op
from helpers import bin_hz, peak_hz, sine, wave


def verdict(capsys, n, title, ok, detail=""):
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}")
    assert ok, detail


def lora_formula(c: AstConfig, r: int, roles) -> int:
    dims = {"query": (c.hidden, c.hidden), "key": (c.hidden, c.hidden), "value": (c.hidden, c.hidden),
            "attn_output": (c.hidden, c.hidden), "intermediate": (c.hidden, c.intermediate),
            "mlp_output": (c.intermediate, c.hidden)}
    return c.layers * sum(r * (i + o) for i, o in (dims[x] for x in roles))


def ia3_formula(c: AstConfig, roles) -> int:
    out = {"query": c.hidden, "key": c.hidden, "value": c.hidden, "attn_output": c.hidden,
           "intermediate": c.intermediate, "mlp_output": c.hidden}
    return c.layers * sum(out[x] for x in roles)


HEAD = 2 * 768 + 768 * 9 + 9  # classifier layer norm and linear


def test_criterion_01_cnn_parameter_count(capsys):
    t = time.perf_counter()
    n = count_params(build_cnn())
    dt = time.perf_counter() - t
    verdict(capsys, 1, "CNN parameter count", n == 5_006_825 and dt < 1, f"{n:,} in {dt:.2f}s")


def test_criterion_02_ast_parameter_count(capsys):
    t = time.perf_counter()
    m = build_ast()
    parts = {
        "total": (count_params(m), 86_195_721),
        "embeddings": (subtotal(m, "audio_spectrogram_transformer.embeddings"), 1_131_264),
        "final norm": (subtotal(m, "audio_spectrogram_transformer.layernorm"), 1_536),
        "head": (subtotal(m, "classifier"), 8_457),
    }
    for i in range(12):
        parts[f"block {i}"] = (subtotal(m, f"audio_spectrogram_transformer.encoder.layer.{i}"), 7_087_872)
    dt = time.perf_counter() - t
    bad = {k: v for k, v in parts.items() if v[0] != v[1]}
    verdict(capsys, 2, "AST parameter count and sub-totals", not bad and dt < 1,
            f"{parts['total'][0]:,} in {dt:.2f}s {bad or ''}")


def test_criterion_03_flatten_dimension(capsys):
    feats = melspec_cnn(wave(sine(440) * 0.5)).values
    cnn = build_cnn().eval()
    x = feats[None, None]
    with no_grad():
        for i in range(3):
            x = getattr(cnn, f"conv{i + 1}")(x)
    flat = int(np.prod(x.shape[1:]))
    ok = feats.shape == (128, 157) and flat == 19_456 == cnn.fc1.in_features and CnnConfig().computed_flatten() == flat
    verdict(capsys, 3, "CNN flatten dimension", ok, f"features {feats.shape}, conv output {x.shape[1:]} -> {flat}")


def test_criterion_04_peft_count_anchors(capsys):
    c = AstConfig()
    checks = []

    def count(cfg):
        return apply_adapter(build_ast(), cfg).trainable_count

    n = count(AdapterConfig("fourierft", n_coeffs=3000, targets=ROLES))
    checks.append(("fourierft", n, abs(n - 220_000) / 220_000 <= 0.10))
    n = count(AdapterConfig("adalora", init_rank=100, target_rank=16, targets=ROLES))
    checks.append(("adalora", n, abs(n - 16_673_800) / 16_673_800 <= 0.05))
    n = count(AdapterConfig("oft", n_blocks=16, targets=ROLES))
    checks.append(("oft", n, abs(n - 9_000_000) / 9_000_000 <= 0.25))
    for roles in (("query", "value"), ROLES):
        n = count(AdapterConfig("lora", r=8, targets=roles))
        checks.append((f"lora{len(roles)}", n, n == lora_formula(c, 8, roles) + HEAD))
    for roles in (("query", "key", "value", "attn_output"), ("query", "key", "value", "attn_output", "intermediate"),
                  ROLES):
        n = count(AdapterConfig("ia3", targets=roles))
        checks.append((f"ia3-{len(roles)}", n, n == ia3_formula(c, roles) + HEAD))
    detail = ", ".join(f"{name}={n:,}{'' if ok else '!'}" for name, n, ok in checks)
    verdict(capsys, 4, "PEFT trainable-count anchors", all(ok for *_, ok in checks), detail)


def test_criterion_05_identity_at_init(capsys):
    t = time.perf_counter()
    cfgs = [AdapterConfig("lora", targets=ROLES), AdapterConfig("adalora", targets=ROLES),
            AdapterConfig("ia3", targets=ROLES), AdapterConfig("oft", n_blocks=16, targets=ROLES),
            AdapterConfig("fourierft", n_coeffs=200, targets=ROLES)]
    x = np.random.default_rng(0).standard_normal((2, 128, 128)).astype(np.float32)
    worst = {}
    for cfg in cfgs:
        m = build_ast(TOY_AST, seed=1).eval()
        with no_grad():
            ref = m(x).data
        apply_adapter(m, cfg)
        with no_grad():
            worst[cfg.method] = float(np.abs(m.eval()(x).data - ref).max())
    dt = time.perf_counter() - t
    ok = max(worst.values()) <= 1e-5 and dt < 10
    verdict(capsys, 5, "identity at injection", ok, f"max |dlogits| {max(worst.values()):.1e} in {dt:.1f}s")


def test_criterion_06_gradient_checks(capsys):
    t = time.perf_counter()
    errs = {name: check_op(name) for name in OP_CASES}
    errs.update({f"adapter:{m}": check_adapter(m) for m in ADAPTERS})
    dt = time.perf_counter() - t
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and dt < 120
    verdict(capsys, 6, "finite-difference gradients", ok,
            f"{len(errs)} checks, worst {worst} {errs[worst]:.1e}, {dt:.1f}s")


def test_criterion_07_dsp_oracles(capsys):
    t = time.perf_counter()
    results = {}
    y = resample(sine(440.0, 5 * 44100, 44100), 44100, 16000)
    results["resample"] = abs(peak_hz(y) - 440.0) <= bin_hz(len(y))
    x = np.random.default_rng(0).standard_normal(N_SAMPLES)
    s = stft(x, StftConfig(n_fft=400, win_length=400, hop_length=400, window="rect", center=False))
    energy = (np.abs(s[0]) ** 2 + np.abs(s[-1]) ** 2 + 2 * (np.abs(s[1:-1]) ** 2).sum(axis=0)).sum() / 400
    results["parseval"] = abs(energy - (x**2).sum()) / (x**2).sum() <= 1e-6
    up = pitch_shift(wave(sine(440) * 0.5), 12, limit=None).samples
    down = pitch_shift(wave(sine(880) * 0.5), -12, limit=None).samples
    results["pitch"] = abs(peak_hz(up) - 880) <= bin_hz() and abs(peak_hz(down) - 440) <= bin_hz()
    ref = sine(440) * 0.5
    ts = time_stretch(wave(ref), 1.0).samples
    results["stretch"] = np.linalg.norm(ts - ref) / np.linalg.norm(ref) < 0.05
    w = wave(np.random.default_rng(1).uniform(-1, 1, N_SAMPLES))
    results["polarity"] = np.array_equal(polarity_inversion(polarity_inversion(w)).samples, w.samples)
    nz = gaussian_noise(wave(np.zeros(N_SAMPLES)), 0.01, np.random.default_rng(2)).samples
    results["noise"] = abs(np.var(nz) - 1e-4) / 1e-4 <= 0.05
    dt = time.perf_counter() - t
    verdict(capsys, 7, "DSP oracles", all(results.values()) and dt < 60,
            f"{[k for k, v in results.items() if not v] or 'all ok'}, {dt:.1f}s")


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth900")
    assert main(["synth", "--n-per-class", "100", "--seed", "0", "--out", str(root)]) == EXIT_OK
    return root


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.mark.slow
def test_criterion_08_cnn_end_to_end(capsys, synth_dir, tmp_path):
    cfg = write_config(tmp_path / "cnn.yaml", {
        "schema_version": 1, "run_name": "cnn", "seed": 0, "dataset": {"path": str(synth_dir)},
        "model": {"kind": "cnn"},
        "training": {"lr": 0.001, "batch_size": 8, "accumulation_steps": 2, "epochs": 20},
    })
    t = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    dt = time.perf_counter() - t
    m = json.loads((tmp_path / "run" / "metrics.json").read_text())
    acc = m["test"]["accuracy"]
    verdict(capsys, 8, "synthetic CNN experiment", acc >= 0.95 and m["epochs_run"] <= 20 and dt <= 600,
            f"test accuracy {acc:.4f} after {m['epochs_run']} epochs, {dt:.0f}s")


@pytest.mark.slow
def test_criterion_09_toy_ast_lora(capsys, synth_dir, tmp_path):
    cfg = write_config(tmp_path / "ast.yaml", {
        "schema_version": 1, "run_name": "ast", "seed": 0, "dataset": {"path": str(synth_dir)},
        "model": {"kind": "ast", "ast": {"hidden": 64, "layers": 2, "heads": 4, "intermediate": 256,
                                         "n_frames": 128}},
        "adapter": {"method": "lora", "r": 8, "alpha": 16, "targets": ["query", "value"]},
        "training": {"lr": 0.001, "batch_size": 8, "accumulation_steps": 2, "epochs": 20},
    })
    t = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    dt = time.perf_counter() - t
    m = json.loads((tmp_path / "run" / "metrics.json").read_text())
    acc = m["test"]["accuracy"]
    verdict(capsys, 9, "toy AST with LoRA", acc >= 0.90 and dt <= 900,
            f"test accuracy {acc:.4f}, {m['trainable_params']:,} trainable, {dt:.0f}s")


def test_criterion_10_protocol_properties(capsys):
    labels = np.repeat(np.arange(9), 100)
    s = stratified_split(labels, SplitSpec((0.6, 0.2, 0.1, 0.1), seed=0))
    sizes = [len(p) for p in s.parts()]
    per_class = [sorted(set(np.bincount(labels[p], minlength=9))) for p in s.parts()]
    split_ok = sizes == [540, 180, 90, 90] and per_class == [[60], [20], [10], [10]]
    plan = make_folds(labels, 5, seed=0)
    cover = np.zeros(900, int)
    fold_ok = True
    for i in range(5):
        _, te = plan.fold(i)
        cover[te] += 1
        fold_ok &= bool(np.all(np.bincount(labels[te], minlength=9) == 20))
    fold_ok &= bool(np.all(cover == 1))
    data = FeatureSet(np.zeros((4, 3)), [0, 1, 0, 1], [False, False, True, False])
    try:
        evaluate(build_ast(AstConfig(hidden=8, layers=1, heads=2, intermediate=8, n_mels=16, n_frames=16,
                                     patch=16)), data)
        guard_ok = False
    except ProtocolError:
        guard_ok = True
    verdict(capsys, 10, "split, fold and augmentation-isolation protocol", split_ok and fold_ok and guard_ok,
            f"split {sizes}, folds ok={fold_ok}, guard ok={guard_ok}")


def test_criterion_11_metrics_oracle_and_chance_level(capsys, synth900_cnn):
    m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], n_classes=2)
    oracle_ok = m.macro_f1 == pytest.approx(11 / 15, abs=1e-15) and m.accuracy == 0.75

    def frozen(i):
        model = build_cnn(seed=100 + i)
        for p in model.parameters():
            p.trainable = False
        return model

    rep = run_kfold(frozen, synth900_cnn, 5, TrainConfig(epochs=1))
    mean = rep.summary()["mean_accuracy"]
    verdict(capsys, 11, "metrics oracle and frozen-model chance level",
            oracle_ok and abs(mean - 1 / 9) <= 0.05,
            f"F1 {m.macro_f1:.6f}, acc {m.accuracy}, frozen mean accuracy {mean:.4f} "
            f"(folds {[round(f.metrics.accuracy, 3) for f in rep.folds]})")


def test_criterion_12_reproducible_runs(capsys, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--n-per-class", "6", "--seed", "5", "--out", str(data)]) == EXIT_OK
    cfgs = {
        "cnn": {"model": {"kind": "cnn"}},
        "ast-adalora": {"model": {"kind": "ast", "ast": {"hidden": 32, "layers": 1, "heads": 2, "intermediate": 64,
                                                         "n_frames": 64}},
                        "adapter": {"method": "adalora", "init_rank": 4, "target_rank": 2,
                                    "targets": ["query", "value"]},
                        "augmentation": {"k_per_sample": 1, "pool": [{"kind": "time_stretch"},
                                                                     {"kind": "gaussian_noise"}]}},
    }
    same = {}
    for name, part in cfgs.items():
        doc = {"schema_version": 1, "run_name": name, "seed": 11, "dataset": {"path": str(data)},
               "training": {"epochs": 3, "batch_size": 4}, **part}
        cfg = write_config(tmp_path / f"{name}.yaml", doc)
        logs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
            logs.append([{k: v for k, v in r.items() if k != "wall_ms"}
                         for r in RunLog.read_jsonl(out / "runlog.jsonl")])
        same[name] = logs[0] == logs[1] and len(logs[0]) > 0
    verdict(capsys, 12, "identical config and seed give identical metric logs", all(same.values()), str(same))
