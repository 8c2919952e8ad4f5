"""Attention group recommender: embeddings, member attention, scoring, sampled-softmax loss, Adam."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dali.data import Group

INIT_SCALE = 0.05
CHECKPOINT_MAGIC = "DALI-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class EmbeddingTable:
    user: np.ndarray  # |U| x d
    item: np.ndarray  # |I| x d

    @property
    def dim(self) -> int:
        return self.user.shape[1]


@dataclass
class AttentionParams:
    """Scalar member logit from ``[p_u, q_i, p_u * q_i]`` (length 3d) plus a bias."""

    weight: np.ndarray
    bias: np.ndarray  # shape (1,)


@dataclass
class RecModel:
    emb: EmbeddingTable
    att: AttentionParams
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.emb.dim

    def params(self) -> dict[str, np.ndarray]:
        return {"user": self.emb.user, "item": self.emb.item, "att_w": self.att.weight, "att_b": self.att.bias}

    def copy(self) -> "RecModel":
        return RecModel(
            EmbeddingTable(self.emb.user.copy(), self.emb.item.copy()),
            AttentionParams(self.att.weight.copy(), self.att.bias.copy()),
            self.seed,
        )


@dataclass
class MemberWeightVector:
    group_id: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("member weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("member weights must be non-negative and sum to 1")
        self.weights = w

    def __len__(self):
        return self.weights.size


def init_model(num_users: int, num_items: int, d: int, seed: int) -> tuple[EmbeddingTable, AttentionParams]:
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    user = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(num_users, d))
    item = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(num_items, d))
    weight = rng.uniform(-INIT_SCALE, INIT_SCALE, size=3 * d)
    bias = rng.uniform(-INIT_SCALE, INIT_SCALE, size=1)
    return EmbeddingTable(user, item), AttentionParams(weight, bias)


def new_model(num_users: int, num_items: int, d: int, seed: int) -> RecModel:
    emb, att = init_model(num_users, num_items, d, seed)
    return RecModel(emb, att, seed)


# ---------------------------------------------------------------------------
# batched attention


def pad_members(groups: list[Group]) -> tuple[np.ndarray, np.ndarray]:
    """Member id matrix (B x n_max, padded with 0) and its boolean mask."""
    n_max = max(g.size for g in groups)
    members = np.zeros((len(groups), n_max), dtype=np.int64)
    mask = np.zeros((len(groups), n_max), dtype=bool)
    for r, g in enumerate(groups):
        members[r, : g.size] = g.members
        mask[r, : g.size] = True
    return members, mask


@dataclass
class AttentionCache:
    members: np.ndarray
    mask: np.ndarray
    items: np.ndarray
    pm: np.ndarray  # B x n x d
    qc: np.ndarray  # B x c x d
    alpha: np.ndarray  # B x c x n


def attention_forward(model: RecModel, members, mask, items) -> AttentionCache:
    """Member attention for every (row, candidate) pair.

    ``items`` is B x c; the result's ``alpha`` is B x c x n with zeros on padding.
    """
    d = model.dim
    w = model.att.weight
    pm = model.emb.user[members]
    qc = model.emb.item[items]
    logits = (
        (pm @ w[:d])[:, None, :]
        + (qc @ w[d : 2 * d])[:, :, None]
        + np.einsum("bnd,bcd->bcn", pm * w[2 * d :], qc)
        + model.att.bias[0]
    )
    logits = np.where(mask[:, None, :], logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    e = np.exp(logits)
    alpha = e / e.sum(axis=2, keepdims=True)
    return AttentionCache(members, mask, items, pm, qc, alpha)


def attention_backward(model: RecModel, cache: AttentionCache, d_alpha, with_embeddings: bool = True):
    """Backpropagate ``dL/dalpha`` through the softmax and logit layer.

    Returns ``(grad_att_w, grad_att_b, grad_pm, grad_qc)``; the embedding
    gradients are ``None`` when ``with_embeddings`` is false.
    """
    d = model.dim
    w = model.att.weight
    alpha = cache.alpha
    d_logit = alpha * (d_alpha - (alpha * d_alpha).sum(axis=2, keepdims=True))
    gw = np.concatenate(
        [
            np.einsum("bcn,bnd->d", d_logit, cache.pm),
            np.einsum("bcn,bcd->d", d_logit, cache.qc),
            np.einsum("bcn,bnd,bcd->d", d_logit, cache.pm, cache.qc),
        ]
    )
    gb = np.array([d_logit.sum()])
    if not with_embeddings:
        return gw, gb, None, None
    g_pm = d_logit.sum(axis=1)[:, :, None] * w[:d] + np.einsum("bcn,bcd->bnd", d_logit, cache.qc) * w[2 * d :]
    g_qc = d_logit.sum(axis=2)[:, :, None] * w[d : 2 * d] + np.einsum("bcn,bnd->bcd", d_logit, cache.pm) * w[2 * d :]
    return gw, gb, g_pm, g_qc


def attention_weights(group: Group, item: int, model: RecModel) -> MemberWeightVector:
    if not 0 <= item < model.emb.item.shape[0]:
        raise IndexError(f"unknown item {item}")
    if any(not 0 <= u < model.emb.user.shape[0] for u in group.members):
        raise IndexError(f"group {group.id} has an unknown member")
    members, mask = pad_members([group])
    cache = attention_forward(model, members, mask, np.array([[item]]))
    return MemberWeightVector(group.id, cache.alpha[0, 0, : group.size].copy())


def aggregate_group(member_embs, weights) -> np.ndarray:
    """Weighted sum of member embeddings."""
    embs = np.asarray(member_embs, dtype=np.float64)
    w = weights.weights if isinstance(weights, MemberWeightVector) else np.asarray(weights, dtype=np.float64)
    if embs.shape[0] != w.size:
        raise ValueError(f"{embs.shape[0]} member embeddings but {w.size} weights")
    return w @ embs


def score(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch {p.shape} vs {q.shape}")
    return float(p @ q)


# ---------------------------------------------------------------------------
# losses


def _softmax_ce(scores):
    """Mean of -log softmax(scores)[:, 0] and its gradient w.r.t. scores."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[:, 0]))
    probs = np.exp(shifted - log_z[:, None])
    probs[:, 0] -= 1.0
    return loss, probs / scores.shape[0]


def zero_grads(model: RecModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params().items()}


def group_loss_arrays(model: RecModel, members, mask, candidates, leaders, grads=None, keep=None):
    """Sampled-softmax loss at group level with type-conditioned aggregation.

    ``candidates[:, 0]`` is the positive item.  Rows with ``leaders[r] >= 0``
    use the leader's embedding as the group representation; the others use the
    attention-weighted member sum.  ``keep`` is an optional B x d inverted-dropout
    mask applied to the group representation.
    """
    if candidates.shape[0] == 0:
        raise ValueError("empty batch")
    if candidates.shape[1] < 2:
        raise ValueError("at least one negative per positive is required")
    grads = zero_grads(model) if grads is None else grads
    cache = attention_forward(model, members, mask, candidates)
    lead_rows = leaders >= 0
    g = np.einsum("bcn,bnd->bcd", cache.alpha, cache.pm)
    if lead_rows.any():
        g[lead_rows] = model.emb.user[leaders[lead_rows]][:, None, :]
    gk = g if keep is None else g * keep[:, None, :]
    scores = np.einsum("bcd,bcd->bc", gk, cache.qc)
    loss, d_scores = _softmax_ce(scores)

    d_g = d_scores[:, :, None] * cache.qc
    if keep is not None:
        d_g = d_g * keep[:, None, :]
    d_qc = d_scores[:, :, None] * gk
    if lead_rows.any():
        np.add.at(grads["user"], leaders[lead_rows], d_g[lead_rows].sum(axis=1))
        d_g[lead_rows] = 0.0
    d_alpha = np.einsum("bcd,bnd->bcn", d_g, cache.pm)
    d_pm = np.einsum("bcn,bcd->bnd", cache.alpha, d_g)
    gw, gb, g_pm, g_qc = attention_backward(model, cache, d_alpha)
    d_pm += g_pm
    d_qc += g_qc
    grads["att_w"] += gw
    grads["att_b"] += gb
    np.add.at(grads["user"], members[mask], d_pm[mask])
    np.add.at(grads["item"], candidates, d_qc)
    return loss, grads


def user_loss_arrays(model: RecModel, users, candidates, grads=None):
    """Sampled-softmax loss at user level; ``candidates[:, 0]`` is the positive."""
    if candidates.shape[0] == 0:
        raise ValueError("empty batch")
    grads = zero_grads(model) if grads is None else grads
    p = model.emb.user[users]
    qc = model.emb.item[candidates]
    scores = np.einsum("bd,bcd->bc", p, qc)
    loss, d_scores = _softmax_ce(scores)
    np.add.at(grads["user"], users, np.einsum("bc,bcd->bd", d_scores, qc))
    np.add.at(grads["item"], candidates, d_scores[:, :, None] * p[:, None, :])
    return loss, grads


def group_loss(batch, model: RecModel, fused_aggregations=None):
    """Mean sampled-softmax cross-entropy over ``(group, positive, negatives)`` triples.

    ``fused_aggregations`` maps group id to the leader's user id for groups that
    are aggregated through their leader; other groups use attention.
    Returns ``(loss, grads)`` with one gradient array per model parameter.
    """
    if not batch:
        raise ValueError("empty batch")
    fused_aggregations = fused_aggregations or {}
    groups = [b[0] for b in batch]
    if any(len(b[2]) < 1 for b in batch):
        raise ValueError("at least one negative per positive is required")
    width = {len(b[2]) for b in batch}
    if len(width) != 1:
        raise ValueError("all rows need the same number of negatives")
    members, mask = pad_members(groups)
    candidates = np.array([[b[1], *b[2]] for b in batch], dtype=np.int64)
    leaders = np.array([fused_aggregations.get(g.id, -1) for g in groups], dtype=np.int64)
    return group_loss_arrays(model, members, mask, candidates, leaders)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"{name}: non-finite gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints


def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: RecModel, sections: dict | None = None) -> None:
    """Write a JSON checkpoint.  ``sections`` maps names to dicts of arrays or plain JSON."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "dims": {"num_users": model.emb.user.shape[0], "num_items": model.emb.item.shape[0], "d": model.dim},
        "seeds": {"init": model.seed},
        "embed": {name: _pack(arr) for name, arr in model.params().items()},
        "sections": {},
    }
    for name, section in (sections or {}).items():
        payload["sections"][name] = {
            k: {"array": _pack(v)} if isinstance(v, np.ndarray) else {"value": v} for k, v in section.items()
        }
    atomic_write_text(path, json.dumps(payload))


def load_checkpoint(path) -> tuple[RecModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    e = payload["embed"]
    model = RecModel(
        EmbeddingTable(_unpack(e["user"]), _unpack(e["item"])),
        AttentionParams(_unpack(e["att_w"]), _unpack(e["att_b"])),
        int(payload["seeds"]["init"]),
    )
    sections = {}
    for name, section in payload["sections"].items():
        sections[name] = {k: _unpack(v["array"]) if "array" in v else v["value"] for k, v in section.items()}
    return model, sections

