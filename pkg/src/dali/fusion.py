"""Dual-channel decision logic: agreement check, decaying conflict fusion, type-conditioned aggregation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from dali.data import Label
from dali.model import MemberWeightVector
from dali.neural import label_of
from dali.rules import SymbolicDecision


class Path(enum.Enum):
    CONSISTENT = "Consistent"
    FUSED = "Fused"


@dataclass(frozen=True)
class FusionSchedule:
    t: int
    t_max: int

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.t < 0:
            raise ValueError("epoch index must be non-negative")


def gamma(sched: FusionSchedule) -> float:
    """Mixing weight of the symbolic channel: ``max(0, 1 - t / t_max)``."""
    return max(0.0, 1.0 - sched.t / sched.t_max)


@dataclass(frozen=True)
class GroupDecision:
    group_id: int
    symbolic: SymbolicDecision
    neural: tuple[float, float]
    gamma_used: float
    fused_prob: tuple[float, float]
    final_label: Label
    path: Path

    def to_json(self) -> dict:
        return {
            "group_id": self.group_id,
            "symbolic": self.symbolic.to_json(),
            "neural": list(self.neural),
            "gamma": self.gamma_used,
            "fused": list(self.fused_prob),
            "final_label": self.final_label.display,
            "path": self.path.value,
        }


def _pair(p) -> tuple[float, float]:
    a, b = float(p[0]), float(p[1])
    if a < 0 or b < 0 or abs(a + b - 1.0) > 1e-6:
        raise ValueError(f"not a probability pair: {(a, b)}")
    return a, b


def fuse(sym: SymbolicDecision, neu, sched: FusionSchedule | None = None, *, gamma_value: float | None = None,
         group_id: int = -1) -> GroupDecision:
    """Combine the two channels.

    Agreeing argmax labels take the consistent path (probabilities averaged for
    the record); otherwise ``gamma * P_sym + (1 - gamma) * P_neu`` decides.
    """
    if gamma_value is None:
        if sched is None:
            raise ValueError("either a schedule or an explicit gamma is required")
        gamma_value = gamma(sched)
    p_sym = _pair(sym.probs)
    p_neu = _pair(neu)
    neural_label = label_of(p_neu)
    if neural_label is sym.label:
        fused = (0.5 * (p_sym[0] + p_neu[0]), 0.5 * (p_sym[1] + p_neu[1]))
        return GroupDecision(group_id, sym, p_neu, gamma_value, fused, sym.label, Path.CONSISTENT)
    g = gamma_value
    fused = (g * p_sym[0] + (1 - g) * p_neu[0], g * p_sym[1] + (1 - g) * p_neu[1])
    return GroupDecision(group_id, sym, p_neu, gamma_value, fused, label_of(fused), Path.FUSED)


def leader_index(weights) -> int:
    """Position of the highest weight; ties go to the lowest position."""
    w = weights.weights if isinstance(weights, MemberWeightVector) else np.asarray(weights)
    return int(np.argmax(w))


def aggregate_by_type(label: Label, member_embs, weights) -> np.ndarray:
    embs = np.asarray(member_embs, dtype=np.float64)
    w = weights.weights if isinstance(weights, MemberWeightVector) else np.asarray(weights, dtype=np.float64)
    if embs.shape[0] != w.size:
        raise ValueError(f"{embs.shape[0]} member embeddings but {w.size} weights")
    if label is Label.LEADERSHIP:
        return embs[leader_index(w)].copy()
    return w @ embs


def write_audit(path, decisions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_json()) + "\n")
