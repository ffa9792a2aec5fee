"""Synthetic paired image/text/label data and the VKDS text format.

Each sample has a hidden concept vector ``c``. Labels are half-space
indicators of ``c``; the image view is a noisy linear mixture of ``c``; the
text view carries "finding" tokens for active labels (each emitted with
probability ``keyword_prob``) followed by one token per concept coordinate
encoding its sign. The text is therefore the more informative view, which
is the setting in which distilling from text into the image branch pays.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

FORMAT_MAGIC = "vkds 1"


class DatasetFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class GenSpec:
    n_samples: int = 6000
    concept_dim: int = 8
    input_dim: int = 16
    seq_len: int = 32
    vocab: int = 256
    n_classes: int = 6
    image_noise: float = 2.0
    keyword_prob: float = 0.9
    seed: int = 0

    def validate(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        for name in ("concept_dim", "input_dim", "seq_len", "vocab", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.keyword_prob <= 1.0:
            raise ValueError(f"keyword_prob must be in [0, 1], got {self.keyword_prob}")
        if self.image_noise < 0:
            raise ValueError(f"image_noise must be >= 0, got {self.image_noise}")
        if self.n_classes + 1 > self.vocab:
            raise ValueError(
                f"finding tokens 1..{self.n_classes} do not fit in vocab of size {self.vocab}"
            )
        if self.seq_len < self.n_classes + self.concept_dim:
            raise ValueError(
                f"seq_len {self.seq_len} cannot hold {self.n_classes} finding and "
                f"{self.concept_dim} concept tokens"
            )


@dataclass
class Dataset:
    image: np.ndarray  # (n, D) float64
    tokens: np.ndarray  # (n, S) int64, 0 = padding
    labels: np.ndarray  # (n, K) int64 in {0, 1}
    vocab: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.image.shape[0]
        if self.tokens.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("image, tokens and labels must have the same number of rows")

    def __len__(self):
        return self.image.shape[0]

    @property
    def dims(self):
        return {
            "n": len(self),
            "d": self.image.shape[1],
            "s": self.tokens.shape[1],
            "v": self.vocab,
            "k": self.labels.shape[1],
        }

    def subset(self, idx):
        return Dataset(self.image[idx], self.tokens[idx], self.labels[idx], self.vocab)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.image.shape == other.image.shape
            and self.tokens.shape == other.tokens.shape
            and self.labels.shape == other.labels.shape
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class GroundTruth:
    mixing: np.ndarray  # (D, k)
    hyperplanes: np.ndarray  # (K, k)
    offsets: np.ndarray  # (K,)
    sign_tokens: np.ndarray  # (k, 2): token id for (coordinate, negative/positive)


def ground_truth(spec):
    """The fixed seeded structure shared by every sample of ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    k, D, K = spec.concept_dim, spec.input_dim, spec.n_classes
    # unit-variance rows so image_noise is directly a noise-to-signal ratio
    mixing = rng.standard_normal((D, k)) / np.sqrt(k)
    hyperplanes = rng.standard_normal((K, k))
    offsets = np.zeros(K)
    # concept tokens live above the reserved finding ids 1..K
    n_free = spec.vocab - K - 1
    if n_free >= 2 * k:
        ids = rng.choice(n_free, size=2 * k, replace=False)
    else:
        ids = rng.integers(0, max(n_free, 1), size=2 * k)
    sign_tokens = (K + 1 + ids).reshape(k, 2) if n_free > 0 else np.zeros((k, 2), dtype=np.int64)
    return GroundTruth(mixing, hyperplanes, offsets, sign_tokens.astype(np.int64))


def generate(spec):
    """Draw a dataset; fully determined by ``spec`` (including its seed)."""
    truth = ground_truth(spec)
    n, k, K, S = spec.n_samples, spec.concept_dim, spec.n_classes, spec.seq_len
    rng = np.random.default_rng([spec.seed, 1])
    concepts = rng.standard_normal((n, k))
    labels = (concepts @ truth.hyperplanes.T + truth.offsets > 0).astype(np.int64)
    noise = rng.standard_normal((n, spec.input_dim))
    image = concepts @ truth.mixing.T + spec.image_noise * noise
    emit = rng.random((n, K)) < spec.keyword_prob

    tokens = np.zeros((n, S), dtype=np.int64)
    finding_ids = np.arange(1, K + 1)
    coord_tokens = truth.sign_tokens[np.arange(k)[None, :], (concepts > 0).astype(np.int64)]
    if spec.vocab - K - 1 <= 0:
        coord_tokens = np.zeros_like(coord_tokens)
    for i in range(n):
        found = finding_ids[(labels[i] == 1) & emit[i]]
        seq = np.concatenate([found, coord_tokens[i]])
        seq = seq[seq != 0]
        tokens[i, : seq.size] = seq
    return Dataset(image, tokens, labels, spec.vocab)


def split(ds, fractions, seed):
    """Seeded permutation followed by contiguous train/val/test slices."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("split: need three non-negative fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split: fractions must sum to 1, got {sum(fractions)!r}")
    n = len(ds)
    perm = np.random.default_rng([seed, 2]).permutation(n)
    bounds = np.rint(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    a, b = int(bounds[0]), int(bounds[1])
    return ds.subset(perm[:a]), ds.subset(perm[a:b]), ds.subset(perm[b:])


# ---------------------------------------------------------------------------
# VKDS file format
# ---------------------------------------------------------------------------


def _fmt(x):
    return "%.17g" % x


def write_dataset(ds, path):
    dims = ds.dims
    lines = [FORMAT_MAGIC, "n={n} d={d} s={s} v={v} k={k}".format(**dims)]
    for i in range(len(ds)):
        floats = " ".join(_fmt(x) for x in ds.image[i])
        toks = " ".join(str(int(t)) for t in ds.tokens[i])
        bits = " ".join(str(int(b)) for b in ds.labels[i])
        lines.append(f"{floats} | {toks} | {bits}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_header(line):
    fields = {}
    for part in line.split():
        key, sep, value = part.partition("=")
        if not sep:
            raise DatasetFormatError(f"malformed header field {part!r}", 2)
        try:
            fields[key] = int(value)
        except ValueError:
            raise DatasetFormatError(f"header field {key} is not an integer: {value!r}", 2) from None
    missing = {"n", "d", "s", "v", "k"} - set(fields)
    if missing:
        raise DatasetFormatError(f"header is missing {', '.join(sorted(missing))}", 2)
    return fields


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != FORMAT_MAGIC:
        raise DatasetFormatError(f"expected {FORMAT_MAGIC!r}", 1)
    if len(lines) < 2:
        raise DatasetFormatError("missing header line", 2)
    h = _parse_header(lines[1])
    n, d, s, v, k = h["n"], h["d"], h["s"], h["v"], h["k"]
    body = [ln for ln in lines[2:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise DatasetFormatError(f"expected {n} samples, found {len(body)}", 2 + len(body))
    image = np.zeros((n, d))
    tokens = np.zeros((n, s), dtype=np.int64)
    labels = np.zeros((n, k), dtype=np.int64)
    for i, line in enumerate(body):
        lineno = i + 3
        parts = line.split("|")
        if len(parts) != 3:
            raise DatasetFormatError("expected three '|'-separated sections", lineno)
        f, t, b = (p.split() for p in parts)
        if len(f) != d or len(t) != s or len(b) != k:
            raise DatasetFormatError(
                f"field counts {len(f)}/{len(t)}/{len(b)} do not match header {d}/{s}/{k}", lineno
            )
        try:
            image[i] = [float(x) for x in f]
            tokens[i] = [int(x) for x in t]
            labels[i] = [int(x) for x in b]
        except ValueError as exc:
            raise DatasetFormatError(str(exc), lineno) from None
        if tokens[i].min() < 0 or tokens[i].max() >= v:
            raise DatasetFormatError(f"token out of range [0, {v})", lineno)
        if not np.isin(labels[i], (0, 1)).all():
            raise DatasetFormatError("labels must be 0 or 1", lineno)
    if n == 0:
        image = np.zeros((0, d))
    return Dataset(image, tokens, labels, v)
