"""Image-only prediction and ROC AUC reporting."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .distributions import reparam_sample, standard_normal
from .model import classify_image_branch, encode_image
from .tensor import no_grad

_STREAM_PREDICT = 201


@dataclass
class Prediction:
    probs: np.ndarray  # (n, K)
    latent_mean: np.ndarray | None = None  # (n, latent_dim)


@dataclass
class EvalReport:
    per_class: list  # AUC per class, None where undefined
    macro: float
    n_samples: int
    excluded: list = field(default_factory=list)

    def rows(self):
        rows = [(f"{j + 1}", a) for j, a in enumerate(self.per_class)]
        rows.append(("macro", self.macro))
        return rows


def predict(model, x_image, n_samples=8, seed=0, eps=None, batch_size=1024):
    """Mean over ``n_samples`` draws z_I ~ p(z_I|x_I) of sigmoid(head(x_I, z_I)).

    Text never enters: the signature has no slot for it. Dropout is off.
    ``eps`` of shape (n_samples, n, latent_dim) overrides the noise.
    """
    if n_samples < 1:
        raise ValueError(f"predict: n_samples must be >= 1, got {n_samples}")
    x_image = np.asarray(x_image, dtype=np.float64)
    n = x_image.shape[0]
    L = model.config.latent_dim
    if eps is None:
        eps = standard_normal((n_samples, n, L), (seed, _STREAM_PREDICT))
    probs = np.zeros((n, model.config.n_classes))
    mu = np.zeros((n, L))
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(n, start + batch_size))
            feature, prior = encode_image(model, x_image[sl], train=False)
            mu[sl] = prior.mu.data
            acc = 0.0
            for ell in range(n_samples):
                z = reparam_sample(prior, eps[ell, sl]).z
                logits = classify_image_branch(model, feature, z, train=False)
                acc = acc + _kernels.sigmoid(logits.data)
            probs[sl] = acc / n_samples
    return Prediction(probs=probs, latent_mean=mu)


def auc(scores, labels):
    """Mann-Whitney AUC with ties counted as 1/2; None if a class is absent."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"auc: {scores.shape[0]} scores vs {labels.shape[0]} labels")
    value = _kernels.mann_whitney_auc(scores, labels)
    return None if np.isnan(value) else value


def report_from_scores(probs, labels):
    per_class = [auc(probs[:, j], labels[:, j]) for j in range(labels.shape[1])]
    defined = [a for a in per_class if a is not None]
    if not defined:
        raise ValueError("evaluate: AUC is undefined for every class")
    excluded = [j + 1 for j, a in enumerate(per_class) if a is None]
    return EvalReport(per_class, float(np.mean(defined)), int(labels.shape[0]), excluded)


def evaluate(model, dataset, n_samples=8, seed=0):
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    pred = predict(model, dataset.image, n_samples, seed)
    return report_from_scores(pred.probs, dataset.labels)


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _g(x):
    return "%.17g" % x


def write_predictions(pred, path):
    K = pred.probs.shape[1]
    header = ["sample_id"] + [f"p_{j + 1}" for j in range(K)]
    rows = [[i] + [_g(p) for p in row] for i, row in enumerate(pred.probs)]
    _atomic_write(path, _csv_text(header, rows))


def write_report(report, path):
    rows = [[name, "-" if value is None else _g(value)] for name, value in report.rows()]
    _atomic_write(path, _csv_text(["class", "auc"], rows))


def format_report(report):
    lines = ["class  auc"]
    for name, value in report.rows():
        lines.append(f"{name:<6} {'-' if value is None else f'{value:.4f}'}")
    if report.excluded:
        lines.append(f"excluded (undefined): {', '.join(map(str, report.excluded))}")
    return "\n".join(lines)


def export_latents(model, dataset, path):
    """Write the prior mean per sample plus its labels as CSV."""
    if len(dataset) == 0:
        raise ValueError("export_latents: empty dataset")
    pred = predict(model, dataset.image, n_samples=1, seed=0)
    L = model.config.latent_dim
    K = dataset.labels.shape[1]
    header = [f"z_{j + 1}" for j in range(L)] + [f"y_{j + 1}" for j in range(K)]
    rows = [[_g(v) for v in mu] + [int(b) for b in y] for mu, y in zip(pred.latent_mean, dataset.labels)]
    _atomic_write(path, _csv_text(header, rows))
