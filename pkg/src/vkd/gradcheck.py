"""Finite-difference gradient suite over every op family and the full objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .distributions import DiagonalGaussian, kl_divergence, log_prob, reparam_sample
from .model import ModelConfig, init_params
from .objectives import cvi_loss, multilabel_ce, vkd_loss

TOLERANCE = 1e-4

DESK_CONFIG = ModelConfig(
    input_dim=8, vocab=12, embed_dim=4, feature_dim=6, latent_dim=4,
    n_classes=3, hidden_dim=6, dropout=0.5,
)


@dataclass
class FamilyResult:
    family: str
    max_rel_error: float
    trials: int
    worst: T.GradCheckResult

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, low=-2.0, high=2.0, away_from=None):
    x = rng.uniform(low, high, size=shape)
    if away_from is not None:
        # keep clear of kinks so a step of h never crosses one
        x = np.where(np.abs(x - away_from) < 0.05, x + 0.1, x)
    return T.Tensor(x, requires_grad=True)


def _scalarize(out, rng):
    w = rng.standard_normal(out.shape)
    return lambda o: T.sum_(T.mul(o, w))


def _shape(rng, batch=True):
    n = int(rng.integers(1, 5))
    return (int(rng.integers(1, 4)), n) if batch else (n,)


def _unary(fn, low=-2.0, high=2.0, away_from=None):
    def case(rng, h):
        x = _leaf(rng, _shape(rng), low, high, away_from)
        red = _scalarize(fn(x), rng)
        return T.gradcheck(lambda: red(fn(x)), [x], h)
    return case


def _binary(fn):
    def case(rng, h):
        a_shape = _shape(rng)
        # exercise the leading-batch broadcast half of the time
        b_shape = a_shape[1:] if rng.random() < 0.5 else a_shape
        a, b = _leaf(rng, a_shape), _leaf(rng, b_shape)
        red = _scalarize(fn(a, b), rng)
        return T.gradcheck(lambda: red(fn(a, b)), [a, b], h)
    return case


def _matmul(rng, h):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    a = _leaf(rng, (n, k))
    b = _leaf(rng, (k, m) if rng.random() < 0.7 else (k,))
    red = _scalarize(T.matmul(a, b), rng)
    return T.gradcheck(lambda: red(T.matmul(a, b)), [a, b], h)


def _reduce(fn):
    def case(rng, h):
        x = _leaf(rng, _shape(rng))
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        red = _scalarize(fn(x, axis), rng)
        return T.gradcheck(lambda: red(fn(x, axis)), [x], h)
    return case


def _concat(rng, h):
    rows = int(rng.integers(1, 4))
    parts = [_leaf(rng, (rows, int(rng.integers(1, 4)))) for _ in range(int(rng.integers(2, 4)))]
    red = _scalarize(T.concat(parts, axis=-1), rng)
    return T.gradcheck(lambda: red(T.concat(parts, axis=-1)), parts, h)


def _slice(rng, h):
    x = _leaf(rng, (3, 5))
    lo = int(rng.integers(0, 4))
    index = (slice(None), slice(lo, lo + int(rng.integers(1, 5 - lo + 1))))
    red = _scalarize(x[index], rng)
    return T.gradcheck(lambda: red(x[index]), [x], h)


def _dropout(rng, h):
    x = _leaf(rng, _shape(rng))
    seed = (int(rng.integers(0, 1000)), 1, 1)
    red = _scalarize(x, rng)
    return T.gradcheck(lambda: red(T.dropout(x, 0.5, True, seed)), [x], h)


def _clamp(rng, h):
    x = _leaf(rng, _shape(rng), -3.0, 3.0)
    x.data = np.where(np.abs(np.abs(x.data) - 1.5) < 0.05, x.data + 0.2, x.data)
    red = _scalarize(x, rng)
    return T.gradcheck(lambda: red(T.clamp(x, -1.5, 1.5)), [x], h)


def _embed_mean(rng, h):
    table = _leaf(rng, (7, 3))
    tokens = rng.integers(0, 7, size=(int(rng.integers(1, 4)), int(rng.integers(1, 6))))
    red = _scalarize(T.embed_mean(table, tokens), rng)
    return T.gradcheck(lambda: red(T.embed_mean(table, tokens)), [table], h)


def _bce(rng, h):
    logits = _leaf(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 5))), -4.0, 4.0)
    y = rng.integers(0, 2, size=logits.shape)
    return T.gradcheck(lambda: multilabel_ce(logits, y), [logits], h)


def _gauss_params(rng, shape):
    return _leaf(rng, shape), _leaf(rng, shape, -1.5, 1.5)


def _kl(rng, h):
    shape = _shape(rng)
    leaves = [*_gauss_params(rng, shape), *_gauss_params(rng, shape)]
    mq, lq, mp, lp = leaves
    return T.gradcheck(
        lambda: T.sum_(kl_divergence(DiagonalGaussian(mq, lq), DiagonalGaussian(mp, lp))), leaves, h
    )


def _log_prob(rng, h):
    shape = _shape(rng)
    mu, lv = _gauss_params(rng, shape)
    z = _leaf(rng, shape)
    return T.gradcheck(lambda: T.sum_(log_prob(DiagonalGaussian(mu, lv), z)), [mu, lv, z], h)


def _reparam(rng, h):
    shape = _shape(rng)
    mu, lv = _gauss_params(rng, shape)
    eps = rng.standard_normal(shape)
    red = _scalarize(mu, rng)
    return T.gradcheck(lambda: red(reparam_sample(DiagonalGaussian(mu, lv), eps).z), [mu, lv], h)


def desk_batch(rng, config=DESK_CONFIG, n=4, seq_len=6):
    tokens = rng.integers(0, config.vocab, size=(n, seq_len))
    return Dataset(
        rng.standard_normal((n, config.input_dim)),
        tokens,
        rng.integers(0, 2, size=(n, config.n_classes)),
        config.vocab,
    )


def generic_model(config=DESK_CONFIG, seed=0):
    """Initialised model with the zero-initialised layers randomised too,
    so that every parameter group carries a nonzero gradient."""
    model = init_params(config, seed)
    rng = np.random.default_rng([seed, 99])
    for p in model.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return model


def _full_objective(loss_fn):
    def case(rng, h):
        model = generic_model(seed=int(rng.integers(0, 1000)))
        batch = desk_batch(rng)
        key = (int(rng.integers(0, 1000)), 3)

        def f():
            return loss_fn(model, batch, key).total

        return T.gradcheck(f, model.parameters(), h)
    return case


FAMILIES = {
    "matmul": _matmul,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "relu": _unary(T.relu, away_from=0.0),
    "tanh": _unary(T.tanh),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.2, 3.0),
    "softplus": _unary(T.softplus, -6.0, 6.0),
    "sigmoid": _unary(T.sigmoid, -6.0, 6.0),
    "square": _unary(T.square),
    "sum": _reduce(T.sum_),
    "mean": _reduce(T.mean),
    "concat": _concat,
    "slice": _slice,
    "dropout": _dropout,
    "clamp": _clamp,
    "embed_mean": _embed_mean,
    "bce_with_logits": _bce,
    "kl_divergence": _kl,
    "log_prob": _log_prob,
    "reparam_sample": _reparam,
}

OBJECTIVES = {
    "vkd_loss": _full_objective(
        lambda m, b, key: vkd_loss(m, b, mc_M=2, mc_L=2, beta=0.7, noise_seed=key, train=True)
    ),
    "cvi_loss": _full_objective(lambda m, b, key: cvi_loss(m, b, mc_M=2, noise_seed=key, train=True)),
}


def run_suite(trials=20, objective_trials=1, h=1e-5, seed=0, families=None):
    """Run every family ``trials`` times on random small shapes."""
    rng = np.random.default_rng(seed)
    results = []
    cases = {**FAMILIES, **OBJECTIVES}
    for name, case in cases.items():
        if families is not None and name not in families:
            continue
        n = objective_trials if name in OBJECTIVES else trials
        worst = None
        for _ in range(n):
            r = case(rng, h)
            if worst is None or r.max_rel_error > worst.max_rel_error:
                worst = r
        results.append(FamilyResult(name, worst.max_rel_error, n, worst))
    return results
