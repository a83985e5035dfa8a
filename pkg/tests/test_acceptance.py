"""End-to-end acceptance checks for the latent-feedback toolkit.

Each test prints one PASS line on success; `pytest -v` reports one
pass/fail line per criterion. The heavier tests share session fixtures
(training corpus, trained models) and assert their own wall-clock budgets.
"""

import filecmp
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from latentloop import inference as inf
from latentloop.cli import main as cli_main
from latentloop.data import (SPECIAL_TOKENS, SyntheticTaskConfig,
                             TrainingExample, ResponseSegments,
                             assign_supervision, default_vocab,
                             gen_synthetic_task, image_hash, leakage_audit,
                             parse_response, serialize_response, strip_latent,
                             text_hash)
from latentloop.model import DecoderParams, ModelConfig, init_latent_head
from latentloop.norm_diag import (TEXT, EmaState, accumulation_report,
                                  ema_init, ema_rescale, ema_update,
                                  profile_norms)
from latentloop.numerics import Rng
from latentloop.pca import fit, fit_components, rel_mse, rel_mse_spectral
from latentloop.training import TrainConfig, grad_check, train_model

torch.set_num_threads(1)

VOCAB = default_vocab()
DESK = ModelConfig()  # d_model=64, 4 layers, vocab 64, k=16
TASK = SyntheticTaskConfig()  # d=64, budget 16


@pytest.fixture(scope="session")
def corpus():
    """Training/eval splits plus the PCA basis fit on the training targets."""
    train = gen_synthetic_task(Rng(1000), 2000, TASK, VOCAB)
    eval_task = SyntheticTaskConfig(text_only_fraction=0.0)
    eval_set = gen_synthetic_task(Rng(2000), 500, eval_task, VOCAB)
    targets = np.concatenate([np.stack(e.segments.latent_span.targets)
                              for e in train if e.segments.latent_span])
    basis = fit_components(targets, DESK.latent_k)
    return train, eval_set, basis


@pytest.fixture(scope="session")
def trained(corpus):
    """Three independently seeded trained desk-scale models + train wall time."""
    train, _, basis = corpus
    models = []
    t0 = time.monotonic()
    for seed in (1, 2, 3):
        params = DecoderParams(ModelConfig(init_seed=12345 + seed))
        init_latent_head(params, basis, perturb_scale=1e-3, seed=seed)
        tc = TrainConfig(epochs=2, batch_size=8, base_lr=3e-3,
                         latent_head_lr=3e-3, seed=seed)
        params, _ = train_model(params, basis, train, VOCAB, tc)
        models.append(params)
    return models, time.monotonic() - t0


def test_01_pca_relmse_identity_and_target():
    t0 = time.monotonic()
    rng = Rng(41)
    samples = rng.gaussian((4096, 64)) * np.linspace(5.0, 0.05, 64) + 0.7
    for k in (1, 16, 32, 64):
        basis = fit_components(samples, k)
        gap = abs(rel_mse(basis, samples) - rel_mse_spectral(basis))
        assert gap < 1e-6, f"k={k}: residual vs spectral RelMSE gap {gap:.3e}"
    basis95 = fit(samples, 0.95)
    r = rel_mse(basis95, samples)
    assert r <= 0.05 + 1e-9, f"fit at 0.95 left relmse {r}"
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    print(f"PASS criterion 1: RelMSE forms agree, fit@0.95 relmse={r:.4f} "
          f"(k={basis95.k}) in {elapsed:.1f}s")


def test_02_reconstruction_feedback_containment(corpus, trained):
    t0 = time.monotonic()
    _, eval_set, basis = corpus
    params = trained[0][0]
    p = basis.components
    n_events = 0
    worst = 0.0
    for i, ex in enumerate(eval_set):
        t = inf.decode(params, basis, list(ex.query_tokens), 16, inf.CLEAN,
                       Rng(i), 50, VOCAB, force_span_at=1)
        for e in t.latent_events():
            centered = e.injected - basis.mean
            resid = np.linalg.norm(centered - p @ (p.T @ centered))
            worst = max(worst, resid)
            n_events += 1
        if n_events >= 1000:
            break
    elapsed = time.monotonic() - t0
    assert n_events >= 1000
    assert worst < 1e-8, f"containment violated: {worst:.3e}"
    assert elapsed < 60.0
    print(f"PASS criterion 2: {n_events} latent events, max out-of-subspace "
          f"residual {worst:.2e} in {elapsed:.1f}s")


def test_03_gradient_fidelity():
    t0 = time.monotonic()
    params = DecoderParams(DESK)
    task = SyntheticTaskConfig(budget=4, text_only_fraction=0.0)
    examples = gen_synthetic_task(Rng(77), 3, task, VOCAB)
    targets = np.concatenate([np.stack(e.segments.latent_span.targets)
                              for e in examples])
    basis = fit_components(targets, DESK.latent_k)
    init_latent_head(params, basis, perturb_scale=1e-3)
    report = grad_check(params, basis, examples, VOCAB, coords_per_group=8)
    elapsed = time.monotonic() - t0
    assert set(report["per_group"]) == {n for n, _ in params.param_groups()}
    assert report["max_rel_error"] < 1e-4, report["per_group"]
    assert elapsed < 300.0
    print(f"PASS criterion 3: max relative gradient error "
          f"{report['max_rel_error']:.2e} over 3 examples in {elapsed:.1f}s")


def test_04_norm_accumulation_deep_stack():
    params = DecoderParams(ModelConfig(n_layers=8))
    rng = Rng(55)
    batch = [[int(t) for t in rng.integers(0, DESK.vocab_size, 64)]
             for _ in range(4)]
    report = accumulation_report(params, batch)
    assert report["n_positions"] >= 256
    assert report["per_step_identity_max_err"] < 1e-9
    assert report["relative_gap"] < 0.10, report
    profile = profile_norms(params, [(slots, [TEXT] * len(slots))
                                     for slots in batch])
    assert profile.mean_log(8, TEXT) > profile.mean_log(0, TEXT)
    print(f"PASS criterion 4: identity err {report['per_step_identity_max_err']:.1e}, "
          f"accumulation gap {report['relative_gap']:.3f} over "
          f"{report['n_positions']} positions")


def test_05_ema_calibration_contract(corpus):
    _, eval_set, basis = corpus
    state = ema_init([7.5, 8.5], decay=0.9)
    rng = Rng(66)
    worst = 0.0
    for _ in range(1000):
        c = rng.gaussian(basis.k) * np.sqrt(np.maximum(basis.eigenvalues[:basis.k], 0))
        v_hat = inf.apply_intervention(inf.CLEAN, c, basis, None)
        state = ema_update(state, float(np.linalg.norm(v_hat)))
        injected = ema_rescale(state, v_hat)
        worst = max(worst, abs(np.linalg.norm(injected) - state.mean_norm))
    assert worst < 1e-10, f"injected norm deviates from running mean by {worst:.2e}"
    v = rng.gaussian(64).astype(np.float32).astype(np.float64)
    a = ema_rescale(state, v)
    b = ema_rescale(state, 10.0 * v)
    assert np.array_equal(a, b), "rescale not bitwise scale-invariant"
    print(f"PASS criterion 5: 1000 calibrated norms within {worst:.1e} of the "
          f"running mean; rescale bitwise scale-invariant")


def test_06_difficulty_pipeline():
    # planted accuracies with a known split at tau = 0
    planted = [Fraction(i % 5, 8) for i in range(200)]
    modes = [assign_supervision(a, 0.0) for a in planted]
    expect_latent = sum(1 for a in planted if a == 0)
    assert modes.count("latent") == expect_latent
    assert modes.count("text-only") == len(planted) - expect_latent

    examples = gen_synthetic_task(Rng(88), 1000, TASK, VOCAB)
    special_ids = {VOCAB.id(t) for t in SPECIAL_TOKENS}
    for ex in examples:
        tokens = serialize_response(ex.segments, VOCAB)
        parsed = parse_response(tokens, VOCAB)
        assert serialize_response(parsed, VOCAB) == tokens
        if ex.segments.latent_span is not None:
            stripped = strip_latent(ex)
            assert not special_ids.intersection(
                serialize_response(stripped.segments, VOCAB))
    print(f"PASS criterion 6: split {expect_latent}/{len(planted) - expect_latent} "
          f"exact at tau=0; 1000 round-trips bit-exact; stripped examples clean")


def test_07_intervention_ordering(corpus, trained):
    t0 = time.monotonic()
    _, eval_set, basis = corpus
    models, train_time = trained
    accs = {"clean": [], "noise": [], "zero_latent": []}
    for params in models:
        for name, mode, b in (("clean", inf.CLEAN, 16),
                              ("noise", inf.noise_mode(), 16),
                              ("zero_latent", inf.ZERO_LATENT, 1)):
            accs[name].append(inf.evaluate(params, basis, eval_set, VOCAB,
                                           mode, b, seed=0, max_tokens=50))
    mean = {k: float(np.mean(v)) for k, v in accs.items()}
    elapsed = train_time + (time.monotonic() - t0)
    assert mean["clean"] - mean["noise"] >= 0.02, (mean, accs)
    assert mean["clean"] - mean["zero_latent"] >= 0.02, (mean, accs)
    assert elapsed < 900.0
    print(f"PASS criterion 7: clean {mean['clean']:.3f} > noise "
          f"{mean['noise']:.3f} and > zero_latent {mean['zero_latent']:.3f} "
          f"over 3 seeds (2000 train / 500 eval, {elapsed:.0f}s incl. training)")


def test_08_budget_sweep_harness(corpus, trained):
    _, eval_set, basis = corpus
    params = trained[0][0]
    subset = eval_set[:30]
    rows, summary = inf.budget_sweep(params, basis, subset, VOCAB,
                                     [0, 4, 16, 36], [0, 1, 2], max_tokens=70)
    csv_text = inf.sweep_csv(rows)
    lines = csv_text.strip().split("\n")
    assert lines[0] == "budget,seed,accuracy,n_examples"
    assert len(lines) == 1 + 4 * 3
    for line in lines[1:]:
        b, s, acc, n = line.split(",")
        assert int(b) in (0, 4, 16, 36) and int(s) in (0, 1, 2)
        assert 0.0 <= float(acc) <= 1.0 and int(n) == len(subset)
    assert {s["budget"] for s in summary} == {0, 4, 16, 36}
    assert all("mean_accuracy" in s and "std_accuracy" in s for s in summary)
    with pytest.raises(ValueError, match="perfect square"):
        inf.budget_sweep(params, basis, subset, VOCAB, [5], [0])
    pretty = ", ".join(f"{s['budget']}: {s['mean_accuracy']:.2f}"
                       f"+/-{s['std_accuracy']:.2f}" for s in summary)
    print(f"PASS criterion 8: sweep {pretty}; budget 5 rejected; CSV schema OK")


def _audit_example(i, payload):
    return TrainingExample(
        query_tokens=[1], segments=ResponseSegments(
            think_prefix=[], latent_span=None, parser_text=[],
            think_suffix=[], answer=[2]),
        accuracy=Fraction(1, 1), supervision_mode="text-only",
        meta={"source_id": f"ex-{i}", "image_hash": image_hash(payload),
              "text_hash": text_hash(payload.decode())})


def test_09_leakage_audit_at_scale():
    t0 = time.monotonic()
    train = [_audit_example(i, f"train sample {i}".encode()) for i in range(10_000)]
    eval_ex = [_audit_example(20_000 + i, f"eval sample {i}".encode())
               for i in range(400)]
    planted = [_audit_example(30_000 + i, f"train sample {i * 97}".encode())
               for i in range(100)]
    report = leakage_audit(train, eval_ex + planted)
    elapsed = time.monotonic() - t0
    found = {c["hash"] for c in report["image_collisions"]}
    expected = {image_hash(f"train sample {i * 97}".encode()) for i in range(100)}
    assert found == expected, "false positives or missed duplicates"
    assert len(report["text_collisions"]) == 100
    assert elapsed < 10.0
    print(f"PASS criterion 9: 100/100 planted duplicates found, 0 false "
          f"positives among 10400 examples in {elapsed:.1f}s")


def test_10_determinism_across_workers(tmp_path):
    d = str(tmp_path)
    assert cli_main(["build-data", "--out", f"{d}/data", "--seed", "9",
                     "--set", "count=60", "--set", "budget=4"]) == 0
    assert cli_main(["pca-fit", "--out", f"{d}/pca",
                     "--set", f"samples={d}/data/targets.bin",
                     "--set", "k=16"]) == 0
    pairs = []
    for run, workers in (("a", "1"), ("b", "8")):
        assert cli_main(["train", "--out", f"{d}/train_{run}", "--seed", "4",
                         "--workers", workers,
                         "--set", f"dataset={d}/data/dataset.bin",
                         "--set", f"basis={d}/pca/basis.bin",
                         "--set", "epochs=1"]) == 0
        assert cli_main(["intervene", "--out", f"{d}/int_{run}", "--seed", "4",
                         "--workers", workers,
                         "--set", f"checkpoint={d}/train_a/checkpoint.bin",
                         "--set", f"dataset={d}/data/dataset.bin",
                         "--set", f"basis={d}/pca/basis.bin",
                         "--set", "budget=4", "--set", "max_examples=6"]) == 0
        assert cli_main(["sweep", "--out", f"{d}/sweep_{run}", "--seed", "4",
                         "--workers", workers,
                         "--set", f"checkpoint={d}/train_a/checkpoint.bin",
                         "--set", f"dataset={d}/data/dataset.bin",
                         "--set", f"basis={d}/pca/basis.bin",
                         "--set", "budgets=0,4", "--set", "seeds=0,1",
                         "--set", "max_examples=5"]) == 0
    for name in ("train/checkpoint.bin", "train/training_log.csv",
                 "int/transcripts.jsonl", "int/accuracy.json",
                 "sweep/sweep.csv", "sweep/summary.json"):
        sub, fname = name.split("/")
        a = f"{d}/{sub}_a/{fname}"
        b = f"{d}/{sub}_b/{fname}"
        assert filecmp.cmp(a, b, shallow=False), f"{name} differs across workers"
    print("PASS criterion 10: train/decode/sweep artifacts bitwise identical "
          "across --workers 1 and 8")
