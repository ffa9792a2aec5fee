"""Training objectives and the cyclical KL annealing schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import DiagonalGaussian, kl_divergence, reparam_sample, standard_normal
from .model import classify_image_branch, classify_text_branch, encode_image, encode_text
from .tensor import Tensor, ShapeError, bce_with_logits, mean

# noise stream ids mixed into the per-call seed
_STREAM_IMAGE = 101
_STREAM_TEXT = 102


@dataclass(frozen=True)
class AnnealSchedule:
    """Cyclical KL weight: ``C`` ramps per ``T`` batch iterations, each rising
    over the first ``R`` fraction of its cycle and then held at 1."""

    T: int
    C: int = 4
    R: float = 0.5
    g: str = "linear"

    def __post_init__(self):
        if self.C < 1 or self.T < self.C:
            raise ValueError(f"AnnealSchedule needs T >= C >= 1, got T={self.T}, C={self.C}")
        if not 0.0 < self.R <= 1.0:
            raise ValueError(f"AnnealSchedule.R must be in (0, 1], got {self.R}")
        if self.g not in _RAMPS:
            raise ValueError(f"unknown ramp {self.g!r}; choose from {sorted(_RAMPS)}")

    @property
    def period(self):
        return self.T // self.C


_RAMPS = {
    "linear": lambda tau, R: tau / R,
    "cosine": lambda tau, R: 0.5 * (1.0 - math.cos(math.pi * tau / R)),
}


def beta_at(schedule, t):
    """KL weight at 1-based batch iteration ``t``."""
    if t < 1:
        raise ValueError(f"beta_at: t must be >= 1, got {t}")
    tau = ((t - 1) % schedule.period) / (schedule.T / schedule.C)
    if tau <= schedule.R:
        return min(1.0, _RAMPS[schedule.g](tau, schedule.R))
    return 1.0


def multilabel_ce(logits, targets):
    """Batch mean of the summed per-class sigmoid cross entropy."""
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ShapeError("multilabel_ce", logits.shape, targets.shape)
    return mean(bce_with_logits(logits, targets))


@dataclass
class LossBreakdown:
    total: Tensor
    image_ce: float
    text_ce: float
    kl: float
    beta: float

    def as_dict(self):
        return {
            "total": self.total.item(),
            "image_ce": self.image_ce,
            "text_ce": self.text_ce,
            "kl": self.kl,
            "beta": self.beta,
        }


def _key(noise_seed):
    return tuple(noise_seed) if isinstance(noise_seed, (tuple, list)) else (int(noise_seed), 0)


def _check_batch(batch, mc, name):
    if len(batch.labels) == 0:
        raise ValueError(f"{name}: empty batch")
    for label, value in mc.items():
        if value < 1:
            raise ValueError(f"{name}: {label} must be >= 1, got {value}")


def _image_ce(model, batch, mc_M, key, train, eps_image):
    feature, prior = encode_image(model, batch.image, train, key)
    if eps_image is None:
        eps_image = standard_normal((mc_M,) + prior.shape, key + (_STREAM_IMAGE,))
    terms = []
    for m in range(mc_M):
        z = reparam_sample(prior, eps_image[m]).z
        logits = classify_image_branch(model, feature, z, train, key)
        terms.append(multilabel_ce(logits, batch.labels))
    ce = terms[0]
    for extra in terms[1:]:
        ce = ce + extra
    return ce * (1.0 / mc_M), prior


def vkd_loss(model, batch, mc_M=1, mc_L=1, beta=1.0, noise_seed=0, train=False,
             text_weight=1.0, eps_image=None, eps_text=None):
    """Negated empirical VKD bound on one batch.

    ``total = image_ce + text_weight * text_ce + beta * kl`` where the image
    cross entropy is averaged over ``mc_M`` draws from p(z_I|x_I), the text
    cross entropy over ``mc_L`` draws from q(z_T|x_T), and ``kl`` is the
    batch mean of the closed-form KL[q(z_T|x_T) || p(z_I|x_I)].
    ``text_weight=0`` gives the objective without the mutual-information term.
    ``eps_image``/``eps_text`` of shape (M or L, B, latent) override the noise.
    """
    _check_batch(batch, {"mc_M": mc_M, "mc_L": mc_L}, "vkd_loss")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"vkd_loss: beta must be in [0, 1], got {beta}")
    key = _key(noise_seed)
    image_ce, prior = _image_ce(model, batch, mc_M, key, train, eps_image)
    posterior = encode_text(model, batch.tokens, train, key)
    kl = mean(kl_divergence(posterior, prior))
    total = image_ce + beta * kl
    text_ce_value = 0.0
    if text_weight != 0.0:
        if eps_text is None:
            eps_text = standard_normal((mc_L,) + posterior.shape, key + (_STREAM_TEXT,))
        text_terms = None
        for ell in range(mc_L):
            z = reparam_sample(posterior, eps_text[ell]).z
            ce = multilabel_ce(classify_text_branch(model, z, train, key), batch.labels)
            text_terms = ce if text_terms is None else text_terms + ce
        text_ce = text_terms * (1.0 / mc_L)
        total = total + text_weight * text_ce
        text_ce_value = text_ce.item()
    return LossBreakdown(total, image_ce.item(), text_ce_value, kl.item(), float(beta))


def cvi_loss(model, batch, mc_M=1, beta=1.0, noise_seed=0, train=False, eps_image=None):
    """Image-only objective: the prior-vs-posterior KL and text branch are dropped."""
    _check_batch(batch, {"mc_M": mc_M}, "cvi_loss")
    key = _key(noise_seed)
    image_ce, _ = _image_ce(model, batch, mc_M, key, train, eps_image)
    return LossBreakdown(image_ce, image_ce.item(), 0.0, 0.0, float(beta))


def vae_elbo(q, decoder_log_lik, eps):
    """Single-sample VAE bound: log p(x|z) - KL[q(z|x) || N(0, I)].

    ``decoder_log_lik`` maps the sampled latent tensor to a scalar tensor.
    """
    sample = reparam_sample(q, eps)
    prior = DiagonalGaussian.standard(q.shape)
    return decoder_log_lik(sample.z) - kl_divergence(q, prior)

