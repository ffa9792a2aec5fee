"""Hot inner loops, each with a numba and a pure-numpy implementation.

The active implementation is picked once at import time. Set
``VKD_DISABLE_NUMBA=1`` to force the numpy path (useful for coverage and
for platforms without numba). Both paths are deterministic; they agree to
rounding but are not guaranteed to be bit-identical to each other.
"""

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("VKD_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def embed_mean_forward_np(table, tokens):
    """Mean of embedding rows over non-padding (id != 0) positions."""
    mask = tokens != 0
    counts = mask.sum(axis=1).astype(np.float64)
    gathered = table[tokens] * mask[:, :, None]
    summed = gathered.sum(axis=1)
    denom = np.where(counts > 0, counts, 1.0)
    return summed / denom[:, None], counts


def embed_mean_backward_np(grad, tokens, counts, vocab):
    out = np.zeros((vocab, grad.shape[1]))
    mask = tokens != 0
    denom = np.where(counts > 0, counts, 1.0)
    scaled = grad / denom[:, None]
    rows, cols = np.nonzero(mask)
    np.add.at(out, tokens[rows, cols], scaled[rows])
    return out


def bce_logits_np(logits, targets):
    """Row sums of the stable binary cross entropy and its logit gradient."""
    loss = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = _sigmoid_np(logits) - targets
    return loss.sum(axis=1), grad


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_np(x):
    return _sigmoid_np(np.asarray(x, dtype=np.float64))


def softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def mann_whitney_auc_np(scores, labels):
    """Tie-aware AUC via average ranks. Returns nan when a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) != 0
    n_pos = int(pos.sum())
    n_neg = scores.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.nan
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # average 1-based rank of each tie block
    _, starts, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    block_rank = starts + (counts + 1) / 2.0
    ranks = np.empty_like(scores)
    ranks[order] = np.repeat(block_rank, counts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def embed_mean_forward_nb(table, tokens):
        n, s = tokens.shape
        e = table.shape[1]
        out = np.zeros((n, e))
        counts = np.zeros(n)
        for i in range(n):
            c = 0
            for j in range(s):
                tok = tokens[i, j]
                if tok != 0:
                    c += 1
                    for k in range(e):
                        out[i, k] += table[tok, k]
            counts[i] = c
            if c > 0:
                for k in range(e):
                    out[i, k] /= c
        return out, counts

    @njit(cache=True)
    def embed_mean_backward_nb(grad, tokens, counts, vocab):
        n, s = tokens.shape
        e = grad.shape[1]
        out = np.zeros((vocab, e))
        for i in range(n):
            if counts[i] == 0:
                continue
            inv = 1.0 / counts[i]
            for j in range(s):
                tok = tokens[i, j]
                if tok != 0:
                    for k in range(e):
                        out[tok, k] += grad[i, k] * inv
        return out

    @njit(cache=True)
    def bce_logits_nb(logits, targets):
        n, K = logits.shape
        loss = np.zeros(n)
        grad = np.empty((n, K))
        for i in range(n):
            acc = 0.0
            for k in range(K):
                x = logits[i, k]
                y = targets[i, k]
                acc += max(x, 0.0) - x * y + np.log1p(np.exp(-abs(x)))
                if x >= 0:
                    sig = 1.0 / (1.0 + np.exp(-x))
                else:
                    ex = np.exp(x)
                    sig = ex / (1.0 + ex)
                grad[i, k] = sig - y
            loss[i] = acc
        return loss, grad

    @njit(cache=True)
    def mann_whitney_auc_nb(scores, labels):
        n = scores.shape[0]
        n_pos = 0
        for i in range(n):
            if labels[i] != 0:
                n_pos += 1
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            return np.nan
        order = np.argsort(scores, kind="mergesort")
        rank_sum = 0.0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
                j += 1
            avg = (i + j) / 2.0 + 1.0
            for r in range(i, j + 1):
                if labels[order[r]] != 0:
                    rank_sum += avg
            i = j + 1
        u = rank_sum - n_pos * (n_pos + 1) / 2.0
        return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def embed_mean_forward(table, tokens):
    if USE_NUMBA:
        return embed_mean_forward_nb(table, tokens)
    return embed_mean_forward_np(table, tokens)


def embed_mean_backward(grad, tokens, counts, vocab):
    if USE_NUMBA:
        return embed_mean_backward_nb(np.ascontiguousarray(grad), tokens, counts, vocab)
    return embed_mean_backward_np(grad, tokens, counts, vocab)


def bce_logits(logits, targets):
    if USE_NUMBA:
        return bce_logits_nb(np.ascontiguousarray(logits), np.ascontiguousarray(targets, dtype=np.float64))
    return bce_logits_np(logits, np.asarray(targets, dtype=np.float64))


def mann_whitney_auc(scores, labels):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if USE_NUMBA:
        return float(mann_whitney_auc_nb(scores, labels))
    return float(mann_whitney_auc_np(scores, labels))


sigmoid = sigmoid_np
softplus = softplus_np
