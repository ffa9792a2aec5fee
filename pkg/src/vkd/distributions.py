"""Diagonal Gaussians parameterized by mean and log-variance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, as_tensor, clamp, exp, mul, square, sum_

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
_LOG_2PI = math.log(2.0 * math.pi)


class DiagonalGaussian:
    """N(mu, diag(exp(log_var))), optionally batched along the first axis.

    ``log_var`` is clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]`` on construction.
    """

    def __init__(self, mu, log_var):
        mu = as_tensor(mu)
        log_var = as_tensor(log_var)
        if mu.shape != log_var.shape:
            raise ShapeError("DiagonalGaussian", mu.shape, log_var.shape)
        self.mu = mu
        self.log_var = clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def standard(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def dim(self):
        return self.mu.shape[-1]

    @property
    def shape(self):
        return self.mu.shape

    def std(self):
        return exp(mul(self.log_var, 0.5))

    def __repr__(self):
        return f"DiagonalGaussian(shape={self.shape})"


@dataclass
class LatentSample:
    z: Tensor
    eps: np.ndarray


def reparam_sample(d, eps):
    """z = mu + exp(log_var / 2) * eps, differentiable in mu and log_var."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != d.shape:
        raise ShapeError("reparam_sample", d.shape, eps.shape)
    z = d.mu + d.std() * eps
    return LatentSample(z=z, eps=eps)


def standard_normal(shape, seed):
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng(key).standard_normal(shape)


def kl_divergence(q, p):
    """Closed-form KL[q || p] summed over the last axis.

    Returns a scalar tensor for unbatched inputs and one value per row
    otherwise.
    """
    if q.shape != p.shape:
        raise ShapeError("kl_divergence", q.shape, p.shape)
    var_ratio = exp(q.log_var - p.log_var)
    mean_term = mul(square(q.mu - p.mu), exp(mul(p.log_var, -1.0)))
    per_dim = 0.5 * (p.log_var - q.log_var) + 0.5 * (var_ratio + mean_term) - 0.5
    return sum_(per_dim, axis=-1)


def log_prob(d, z):
    """Diagonal Gaussian log density, summed over the last axis."""
    z = as_tensor(z)
    if z.shape != d.shape:
        raise ShapeError("log_prob", d.shape, z.shape)
    sq = mul(square(z - d.mu), exp(mul(d.log_var, -1.0)))
    per_dim = -0.5 * (sq + d.log_var) - 0.5 * _LOG_2PI
    return sum_(per_dim, axis=-1)


def _log_prob_np(mu, log_var, z):
    return -0.5 * (((z - mu) ** 2) * np.exp(-log_var) + log_var + _LOG_2PI).sum(axis=-1)


def mc_kl_estimate(q, p, n_samples, seed):
    """Monte Carlo KL[q || p] from ``n_samples`` draws of q.

    Returns ``(estimate, standard_error)``. Only unbatched distributions.
    """
    if n_samples < 1:
        raise ValueError("mc_kl_estimate: n_samples must be >= 1")
    if q.shape != p.shape:
        raise ShapeError("mc_kl_estimate", q.shape, p.shape)
    mu_q, lv_q = q.mu.data, q.log_var.data
    mu_p, lv_p = p.mu.data, p.log_var.data
    eps = standard_normal((n_samples,) + q.shape, seed)
    z = mu_q + np.exp(0.5 * lv_q) * eps
    diff = _log_prob_np(mu_q, lv_q, z) - _log_prob_np(mu_p, lv_p, z)
    est = float(diff.mean())
    se = float(diff.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("inf")
    return est, se
