"""Hot numeric kernels over ragged (CSR-style) segments.

Every kernel has a numba ``@njit`` implementation and a pure-numpy
implementation with identical results.  Which one the public names bind to
is decided once at import time:

* ``DALI_NUMBA=0`` forces the numpy path;
* otherwise numba is used when it can be imported.

Segments are described by an ``offsets`` array of length ``G + 1``: segment
``g`` covers ``values[offsets[g]:offsets[g + 1]]``.
"""

from __future__ import annotations

import math
import os

import numpy as np

MEAN_REST_FLOOR = 1e-6
DOMINANCE_CAP = 1e6
NUM_FEATURES = 8

try:  # pragma: no cover - exercised implicitly by whichever path is active
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("DALI_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# numpy implementations


def _pad(values, offsets, fill):
    offsets = np.asarray(offsets, dtype=np.int64)
    sizes = np.diff(offsets)
    n_max = int(sizes.max()) if sizes.size else 0
    cols = np.arange(n_max)
    mask = cols[None, :] < sizes[:, None]
    padded = np.full((sizes.size, n_max), fill, dtype=np.float64)
    padded[mask] = values
    return padded, mask, sizes


def segment_softmax_np(logits, offsets):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        return logits.copy()
    padded, mask, _ = _pad(logits, offsets, -np.inf)
    shifted = padded - padded.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=1, keepdims=True)
    return out[mask]


def segment_features_np(weights, offsets):
    weights = np.asarray(weights, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    g_count = offsets.size - 1
    out = np.zeros((g_count, NUM_FEATURES))
    if g_count == 0:
        return out
    padded, mask, sizes = _pad(weights, offsets, 0.0)
    n = sizes.astype(np.float64)
    rows = np.arange(g_count)
    total = padded.sum(axis=1)
    asc = np.sort(np.where(mask, padded, np.inf), axis=1)
    top1 = asc[rows, sizes - 1]
    top2 = np.where(sizes > 1, asc[rows, np.maximum(sizes - 2, 0)], 0.0)
    raw_rest = np.where(sizes > 1, (total - top1) / np.maximum(n - 1.0, 1.0), 0.0)
    clamped = raw_rest < MEAN_REST_FLOOR
    mean_rest = np.where(clamped, MEAN_REST_FLOOR, raw_rest)
    dominance = np.where(clamped, DOMINANCE_CAP, np.minimum((top1 - mean_rest) / mean_rest, DOMINANCE_CAP))
    mean = total / n
    var = np.where(mask, (padded - mean[:, None]) ** 2, 0.0).sum(axis=1) / n
    safe = np.where(mask & (padded > 0), padded, 1.0)
    entropy = -(np.where(mask, padded, 0.0) * np.log(safe)).sum(axis=1)
    # Gini via the sorted-rank identity: sum_i (2i - n - 1) w_(i) / (n * sum w), ascending order.
    ranks = np.arange(1, padded.shape[1] + 1, dtype=np.float64)[None, :]
    real = ranks <= n[:, None]
    gini_num = np.where(real, (2.0 * ranks - n[:, None] - 1.0) * np.where(real, asc, 0.0), 0.0).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gini = np.where(total > 0, gini_num / (n * total), 0.0)
    out[:, 0] = top1
    out[:, 1] = mean_rest
    out[:, 2] = np.sqrt(var)
    out[:, 3] = np.maximum(entropy, 0.0)
    out[:, 4] = gini
    out[:, 5] = top1 - top2
    out[:, 6] = n
    out[:, 7] = dominance
    return out


def truth_ranks_np(truth_scores, neg_scores):
    truth_scores = np.asarray(truth_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    return 1 + (neg_scores >= truth_scores[:, None]).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# numba implementations

if HAS_NUMBA:

    @numba.njit(cache=True)
    def segment_softmax_nb(logits, offsets):
        out = np.empty_like(logits)
        for g in range(offsets.size - 1):
            lo = offsets[g]
            hi = offsets[g + 1]
            if hi == lo:
                continue
            m = logits[lo]
            for i in range(lo + 1, hi):
                if logits[i] > m:
                    m = logits[i]
            s = 0.0
            for i in range(lo, hi):
                e = math.exp(logits[i] - m)
                out[i] = e
                s += e
            for i in range(lo, hi):
                out[i] /= s
        return out

    @numba.njit(cache=True)
    def segment_features_nb(weights, offsets):
        g_count = offsets.size - 1
        out = np.zeros((g_count, 8))
        for g in range(g_count):
            lo = offsets[g]
            hi = offsets[g + 1]
            n = hi - lo
            if n == 0:
                continue
            w = np.sort(weights[lo:hi])
            total = 0.0
            for i in range(n):
                total += w[i]
            top1 = w[n - 1]
            top2 = w[n - 2] if n > 1 else 0.0
            raw_rest = (total - top1) / (n - 1) if n > 1 else 0.0
            if raw_rest < 1e-6:
                mean_rest = 1e-6
                dom = 1e6
            else:
                mean_rest = raw_rest
                dom = min((top1 - mean_rest) / mean_rest, 1e6)
            mean = total / n
            var = 0.0
            ent = 0.0
            gnum = 0.0
            for i in range(n):
                var += (w[i] - mean) ** 2
                if w[i] > 0.0:
                    ent -= w[i] * math.log(w[i])
                gnum += (2.0 * (i + 1) - n - 1.0) * w[i]
            out[g, 0] = top1
            out[g, 1] = mean_rest
            out[g, 2] = math.sqrt(var / n)
            out[g, 3] = max(ent, 0.0)
            out[g, 4] = gnum / (n * total) if total > 0.0 else 0.0
            out[g, 5] = top1 - top2
            out[g, 6] = n
            out[g, 7] = dom
        return out

    @numba.njit(cache=True)
    def truth_ranks_nb(truth_scores, neg_scores):
        rows, cols = neg_scores.shape
        out = np.empty(rows, dtype=np.int64)
        for r in range(rows):
            c = 1
            t = truth_scores[r]
            for j in range(cols):
                if neg_scores[r, j] >= t:
                    c += 1
            out[r] = c
        return out

else:  # pragma: no cover
    segment_softmax_nb = segment_features_nb = truth_ranks_nb = None


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def segment_softmax(logits, offsets):
    """Softmax within each segment (max-shifted)."""
    if USE_NUMBA:
        return segment_softmax_nb(_f64(logits), _i64(offsets))
    return segment_softmax_np(logits, offsets)


def segment_features(weights, offsets):
    """Eight weight-distribution statistics per segment.

    Columns: max_weight, mean_rest, std_dev, entropy, gini, top2_gap,
    group_size, dominance.
    """
    if USE_NUMBA:
        return segment_features_nb(_f64(weights), _i64(offsets))
    return segment_features_np(weights, offsets)


def truth_ranks(truth_scores, neg_scores):
    """1-based rank of each truth score; ties with negatives rank the truth last."""
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim != 2:
        raise ValueError("neg_scores must be 2-D")
    if USE_NUMBA:
        return truth_ranks_nb(_f64(truth_scores), _f64(neg))
    return truth_ranks_np(truth_scores, neg)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
