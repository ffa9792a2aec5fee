"""Acceptance criteria, one test each. Every test records a pass/fail line
that is printed in the terminal summary."""

import inspect
import math
import time

import numpy as np
import pytest

from vkd.data import GenSpec, generate, ground_truth, split
from vkd.distributions import DiagonalGaussian, kl_divergence, mc_kl_estimate
from vkd.gradcheck import TOLERANCE, run_suite
from vkd.inference import auc, evaluate, predict
from vkd.model import ModelConfig, init_params
from vkd.gradcheck import DESK_CONFIG, desk_batch
from vkd.objectives import AnnealSchedule, beta_at, cvi_loss, vkd_loss
from vkd.trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train_from_scratch

SEEDS = (0, 1, 2, 3, 4)
FRACTIONS = (4000 / 6000, 1000 / 6000, 1000 / 6000)


@pytest.fixture
def record(acceptance_log):
    def _record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"
        acceptance_log.append(line)
        print(line)
        return passed
    return _record


def test_gradient_correctness(record):
    start = time.perf_counter()
    results = run_suite(trials=20, objective_trials=3, h=1e-5, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.family for r in results}
    ok = worst.max_rel_error < TOLERANCE and elapsed < 30 and {"vkd_loss", "cvi_loss"} <= names
    record(1, "gradient correctness", ok,
           f"{len(results)} families, worst {worst.family} {worst.max_rel_error:.2e}, {elapsed:.1f}s")
    assert ok


def test_kl_oracle(record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(50):
        dim = int(rng.integers(1, 5))
        q = DiagonalGaussian(rng.normal(0, 1, dim), rng.normal(0, 1, dim))
        p = DiagonalGaussian(rng.normal(0, 1, dim), rng.normal(0, 1, dim))
        est, se = mc_kl_estimate(q, p, 100_000, seed=i)
        worst = max(worst, abs(est - kl_divergence(q, p).item()) / se)
    elapsed = time.perf_counter() - start
    ok = worst < 3 and elapsed < 10
    record(2, "KL oracle", ok, f"worst deviation {worst:.2f} s.e. over 50 pairs, {elapsed:.1f}s")
    assert ok


def test_annealing_golden_table(record):
    s = AnnealSchedule(T=100, C=4, R=0.5)
    golden = {1: 0.0, 13: 0.96, 14: 1.0, 26: 0.0}
    exact = all(beta_at(s, t) == v for t, v in golden.items())
    values = [beta_at(s, t) for t in range(1, 10_001)]
    bounded = all(0.0 <= b <= 1.0 for b in values)
    periodic = all(values[i] == values[i + s.period] for i in range(len(values) - s.period))
    ok = exact and bounded and periodic
    record(3, "annealing golden table", ok, f"golden={exact} bounded={bounded} periodic={periodic}")
    assert ok


def test_initialization_analytics(record):
    rng = np.random.default_rng(0)
    K = DESK_CONFIG.n_classes
    model = init_params(DESK_CONFIG, 0)
    batch = desk_batch(rng, n=16)
    v = vkd_loss(model, batch, beta=1.0, noise_seed=0, train=True)
    c = cvi_loss(model, batch, noise_seed=0, train=True)
    dv = abs(v.total.item() - 2 * K * math.log(2))
    dc = abs(c.total.item() - K * math.log(2))
    ok = dv <= 1e-9 and dc <= 1e-9 and v.kl == 0.0
    record(4, "initialization analytics", ok, f"|vkd-2Kln2|={dv:.1e} |cvi-Kln2|={dc:.1e} kl={v.kl}")
    assert ok


# ---------------------------------------------------------------------------
# synthetic trend analogs, shared training runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_runs():
    """Test macro AUC keyed by (objective, latent_dim, seed)."""
    start = time.perf_counter()
    results = {}
    for seed in SEEDS:
        train_ds, val_ds, test_ds = split(generate(GenSpec(seed=seed)), FRACTIONS, seed)
        runs = [(obj, 32) for obj in ("vkd", "vkd_no_mi", "cvi")] + [("vkd", 2), ("vkd", 8)]
        for objective, latent in runs:
            best, _ = train_from_scratch(
                ModelConfig(latent_dim=latent), train_ds, val_ds, TrainConfig(objective=objective, seed=seed)
            )
            results[objective, latent, seed] = evaluate(best, test_ds).macro
    results["elapsed"] = time.perf_counter() - start
    return results


def bayes_image_auc(seed):
    """Macro test AUC of the exact posterior score E[c | x_I] projected on each label hyperplane.

    Labels are half-spaces of a Gaussian concept and the image is a linear
    Gaussian view of it, so this linear score ranks samples exactly as the
    true image-only posterior probability does.
    """
    spec = GenSpec(seed=seed)
    truth = ground_truth(spec)
    _, _, test_ds = split(generate(spec), FRACTIONS, seed)
    A = truth.mixing
    gain = A.T @ np.linalg.inv(A @ A.T + spec.image_noise ** 2 * np.eye(A.shape[0]))
    scores = test_ds.image @ gain.T @ truth.hyperplanes.T
    return float(np.mean([auc(scores[:, j], test_ds.labels[:, j]) for j in range(spec.n_classes)]))


def _mean(runs, objective, latent=32):
    return float(np.mean([runs[objective, latent, s] for s in SEEDS]))


@pytest.mark.slow
def test_distillation_benefit(record, synthetic_runs):
    vkd, cvi = _mean(synthetic_runs, "vkd"), _mean(synthetic_runs, "cvi")
    wins = sum(synthetic_runs["vkd", 32, s] > synthetic_runs["cvi", 32, s] for s in SEEDS)
    elapsed = synthetic_runs["elapsed"]
    ceiling = float(np.mean([bayes_image_auc(s) for s in SEEDS]))
    ok = vkd - cvi >= 0.02 and wins >= 4 and elapsed <= 600
    record(5, "distillation benefit", ok,
           f"vkd {vkd:.4f} cvi {cvi:.4f} gap {vkd - cvi:+.4f} (need >= 0.02), wins {wins}/5, "
           f"image-only Bayes ceiling {ceiling:.4f}, all runs {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_mutual_information_ablation(record, synthetic_runs):
    vkd, no_mi, cvi = (_mean(synthetic_runs, o) for o in ("vkd", "vkd_no_mi", "cvi"))
    between = min(cvi, vkd) <= no_mi <= max(cvi, vkd)
    ok = between or abs(no_mi - vkd) <= 0.01
    record(6, "mutual-information ablation", ok, f"vkd {vkd:.4f} vkd_no_mi {no_mi:.4f} cvi {cvi:.4f}")
    assert ok


@pytest.mark.slow
def test_latent_size_sweep(record, synthetic_runs):
    means = [_mean(synthetic_runs, "vkd", L) for L in (2, 8, 32)]
    ok = all(b >= a - 0.01 for a, b in zip(means, means[1:]))
    record(7, "latent-size sweep", ok, " ".join(f"L={L}:{m:.4f}" for L, m in zip((2, 8, 32), means)))
    assert ok


# ---------------------------------------------------------------------------
# contracts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_run():
    ds = generate(GenSpec(n_samples=600, seed=5))
    train_ds, val_ds, test_ds = split(ds, (0.6, 0.2, 0.2), 5)
    config = ModelConfig(embed_dim=8, feature_dim=16, latent_dim=4, hidden_dim=16)
    return config, train_ds, val_ds, test_ds


def test_text_free_inference(record, small_run):
    config, train_ds, val_ds, test_ds = small_run
    best, _ = train_from_scratch(config, train_ds, val_ds, TrainConfig(max_epochs=3, seed=1))
    before = predict(best, test_ds.image, 8, 0).probs
    for name in best.text_parameter_names():
        best[name].data = np.zeros(best[name].shape)
    after = predict(best, test_ds.image, 8, 0).probs
    text_free = not any("text" in p or "token" in p for p in inspect.signature(predict).parameters)
    ok = np.array_equal(before, after) and text_free
    record(8, "text-free inference", ok, f"bitwise identical={np.array_equal(before, after)} signature={text_free}")
    assert ok


def _brute_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    return sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (pos.size * neg.size)


def test_auc_oracle(record):
    rng = np.random.default_rng(9)
    mismatches = invariance_failures = 0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = np.round(rng.random(n), 1)
        value = auc(scores, labels)
        mismatches += value != _brute_auc(scores, labels)
        invariance_failures += auc(np.exp(3 * scores) - 2, labels) != value
    ok = mismatches == 0 and invariance_failures == 0
    record(9, "AUC oracle", ok, f"{mismatches} mismatches, {invariance_failures} invariance failures on 200")
    assert ok


def test_determinism_and_persistence(record, small_run, tmp_path):
    config, train_ds, val_ds, _ = small_run
    tc = TrainConfig(max_epochs=4, seed=2)

    def fresh():
        return Trainer(init_params(config, tc.seed), train_ds, val_ds, tc)

    a, b = fresh(), fresh()
    log_a, log_b = a.fit(), b.fit()
    same_logs = [r.replay_key() for r in log_a] == [r.replay_key() for r in log_b]

    save_checkpoint(a, tmp_path / "a.vkdc")
    loaded = load_checkpoint(tmp_path / "a.vkdc")
    round_trip = all(np.array_equal(p.data, loaded.model[n].data) for n, p in a.model.named_parameters())
    round_trip &= all(np.array_equal(a.optimizer.m[n], loaded.optimizer.m[n]) for n in a.optimizer.m)
    round_trip &= all(np.array_equal(a.optimizer.v[n], loaded.optimizer.v[n]) for n in a.optimizer.v)

    part = fresh()
    head = part.fit(until_epoch=2)
    save_checkpoint(part, tmp_path / "p.vkdc")
    resumed = load_checkpoint(tmp_path / "p.vkdc").trainer(train_ds, val_ds)
    tail = resumed.fit()
    replay = [r.replay_key() for r in head + tail] == [r.replay_key() for r in log_a]
    replay &= all(np.array_equal(p.data, resumed.model[n].data) for n, p in a.model.named_parameters())

    ok = same_logs and round_trip and replay
    record(10, "determinism and persistence", ok, f"logs={same_logs} round-trip={round_trip} resume={replay}")
    assert ok
