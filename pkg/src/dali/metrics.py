"""Single-relevant-item ranking metrics."""

from __future__ import annotations

import math

import numpy as np


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def hit_ratio(ranked, truth, k: int) -> int:
    _check_k(k)
    return int(truth in list(ranked)[:k])


def ndcg_at_k(ranked, truth, k: int) -> float:
    """``1 / log2(rank + 1)`` when the truth sits within the top ``k`` (ideal DCG is 1)."""
    _check_k(k)
    top = list(ranked)[:k]
    if truth not in top:
        return 0.0
    return 1.0 / math.log2(top.index(truth) + 2)


def hits_from_ranks(ranks, k: int) -> np.ndarray:
    _check_k(k)
    return (np.asarray(ranks) <= k).astype(np.float64)


def ndcg_from_ranks(ranks, k: int) -> np.ndarray:
    _check_k(k)
    r = np.asarray(ranks, dtype=np.float64)
    return np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
