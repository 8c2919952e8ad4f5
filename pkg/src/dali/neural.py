"""Three-layer gated MLP discriminator (ReLU -> tanh -> softmax) with hand-written backprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dali.data import Label
from dali.model import OptimizerState, optimizer_step

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class MlpParams:
    W1: np.ndarray  # m x h1
    b1: np.ndarray
    W2: np.ndarray  # h1 x h2
    b2: np.ndarray
    W3: np.ndarray  # h2 x 2
    b3: np.ndarray
    version: int = 0  # bumped on every in-place update; guards stale caches

    def __post_init__(self):
        if self.W3.shape[1] != 2 or self.b3.shape != (2,):
            raise ValueError("discriminator output width must be 2")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "MlpParams":
        return MlpParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros(cls, m: int, h1: int = 16, h2: int = 8) -> "MlpParams":
        return cls(np.zeros((m, h1)), np.zeros(h1), np.zeros((h1, h2)), np.zeros(h2), np.zeros((h2, 2)), np.zeros(2))


def init_mlp(m: int, h1: int = 16, h2: int = 8, seed: int = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(a, b):
        lim = np.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    return MlpParams(glorot(m, h1), np.zeros(h1), glorot(h1, h2), np.zeros(h2), glorot(h2, 2), np.zeros(2))


@dataclass
class MlpCache:
    x: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    probs: np.ndarray
    params_id: int
    params_version: int


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_forward(p: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    """Probability pair(s) ``(P_leadership, P_collaborative)``; ``x`` is m or N x m."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("discriminator input must be finite")
    pre1 = x @ p.W1 + p.b1
    h1 = np.maximum(pre1, 0.0)
    h2 = np.tanh(h1 @ p.W2 + p.b2)
    probs = _softmax(h2 @ p.W3 + p.b3)
    return probs, MlpCache(x.copy(), pre1, h1, h2, probs, id(p), p.version)


def mlp_backward(p: MlpParams, x, target, cache: MlpCache) -> dict[str, np.ndarray]:
    """Gradients of mean ``-log P[target]`` for one sample or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if cache.params_id != id(p) or cache.params_version != p.version or not np.array_equal(cache.x, x):
        raise ValueError("stale forward cache")
    single = x.ndim == 1
    X = x[None, :] if single else x
    P = cache.probs[None, :] if single else cache.probs
    H1 = cache.h1[None, :] if single else cache.h1
    H2 = cache.h2[None, :] if single else cache.h2
    PRE1 = cache.pre1[None, :] if single else cache.pre1
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = X.shape[0]
    dz = P.copy()
    dz[np.arange(n), t] -= 1.0
    dz /= n
    gW3 = H2.T @ dz
    gb3 = dz.sum(axis=0)
    dh2 = dz @ p.W3.T
    da2 = dh2 * (1.0 - H2 * H2)
    gW2 = H1.T @ da2
    gb2 = da2.sum(axis=0)
    dh1 = da2 @ p.W2.T
    da1 = dh1 * (PRE1 > 0.0)
    gW1 = X.T @ da1
    gb1 = da1.sum(axis=0)
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W3": gW3, "b3": gb3}


def cross_entropy(probs, target) -> float:
    probs = np.atleast_2d(probs)
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    return float(-np.mean(np.log(probs[np.arange(len(t)), t])))


def label_of(probs) -> Label:
    """Argmax with exact ties going to Collaborative."""
    return Label.LEADERSHIP if probs[0] > probs[1] else Label.COLLABORATIVE


def mlp_predict(p: MlpParams, x) -> Label:
    probs, _ = mlp_forward(p, x)
    return label_of(probs)


@dataclass
class Standardizer:
    """Per-feature affine normalisation with a floor on the scale."""

    mean: np.ndarray
    std: np.ndarray
    frozen: bool = False
    floor: float = 1e-3

    @classmethod
    def identity(cls, m: int) -> "Standardizer":
        return cls(np.zeros(m), np.ones(m))

    def fit(self, X) -> "Standardizer":
        if self.frozen:
            return self
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            return self
        self.mean = X.mean(axis=0)
        self.std = np.maximum(X.std(axis=0), self.floor)
        return self

    def freeze(self) -> "Standardizer":
        self.frozen = True
        return self

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


@dataclass
class DiscriminatorTrainer:
    """Full-batch Adam on the discriminator's own parameters."""

    params: MlpParams
    state: OptimizerState = field(default_factory=lambda: OptimizerState(lr=0.01))

    def train(self, X, targets, steps: int) -> list[float]:
        losses = []
        for _ in range(steps):
            probs, cache = mlp_forward(self.params, X)
            losses.append(cross_entropy(probs, targets))
            grads = mlp_backward(self.params, X, targets, cache)
            optimizer_step(self.params.arrays(), grads, self.state)
            self.params.touch()
        return losses
