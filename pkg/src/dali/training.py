"""Two-phase training, the dominance weight loss, ranked evaluation, and the closed-loop experiment runner."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from dali import kernels
from dali.agent import (
    NoChange,
    TriggerConfig,
    detect_drift,
    evolve,
    regression_rollback,
    select_agent,
)
from dali.data import Dataset, DatasetSplit, Group, Label, negative_sample, split_groups
from dali.fusion import GroupDecision, fuse, write_audit
from dali.metrics import hits_from_ranks, ndcg_from_ranks
from dali.model import (
    MemberWeightVector,
    OptimizerState,
    RecModel,
    attention_backward,
    attention_forward,
    group_loss_arrays,
    load_checkpoint,
    new_model,
    optimizer_step,
    pad_members,
    save_checkpoint,
    user_loss_arrays,
    zero_grads,
)
from dali.neural import DiscriminatorTrainer, MlpParams, Standardizer, init_mlp, mlp_forward
from dali.repo import CaseRecord, PerfRecord, Repository
from dali.rules import FeatureVector, RuleSet, classify_features, extract_features_many, neural_inputs

log = logging.getLogger(__name__)

EVAL_KS = (5, 10)


# ---------------------------------------------------------------------------
# dominance weight loss


@dataclass
class WeightLossConfig:
    K: int = 5
    delta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


def _weights(w) -> np.ndarray:
    return w.weights if isinstance(w, MemberWeightVector) else np.asarray(w, dtype=np.float64)


def dominance_grad(w) -> tuple[float, np.ndarray]:
    """Dominance of one weight vector and its gradient with respect to the weights.

    The gradient is zero wherever the floor on the rest-mean or the cap is active.
    """
    w = _weights(w)
    n = w.size
    grad = np.zeros(n)
    if n < 2:
        return kernels.DOMINANCE_CAP, grad
    m = int(np.argmax(w))
    top = w[m]
    rest = (w.sum() - top) / (n - 1)
    if rest < kernels.MEAN_REST_FLOOR:
        return kernels.DOMINANCE_CAP, grad
    eta = (top - rest) / rest
    if eta >= kernels.DOMINANCE_CAP:
        return kernels.DOMINANCE_CAP, grad
    # eta = top / rest - 1 with rest = (sum - top) / (n - 1)
    grad[:] = -top / (rest * rest) / (n - 1)
    grad[m] = 1.0 / rest
    return float(eta), grad


def dominance(weights) -> float:
    return dominance_grad(weights)[0]


def _label(x) -> Label:
    return x.final_label if isinstance(x, GroupDecision) else Label(x)


def _eta(x) -> float:
    return float(x) if np.isscalar(x) else dominance(x)


def sample_benchmark(labels, etas, cfg: WeightLossConfig, rng) -> tuple[float | None, np.ndarray]:
    """Mean dominance over up to K collaborative entries; returns (xi, chosen indices)."""
    collab = np.flatnonzero(np.asarray([int(l) for l in labels]) == int(Label.COLLABORATIVE))
    if collab.size == 0:
        return None, collab
    chosen = np.sort(rng.choice(collab, size=min(cfg.K, collab.size), replace=False))
    return float(np.mean(np.asarray(etas, dtype=np.float64)[chosen])), chosen


def collab_benchmark(batch, cfg: WeightLossConfig | None = None) -> float | None:
    """Collaborative benchmark over ``(label_or_decision, weights_or_eta)`` pairs; None when undefined."""
    cfg = cfg or WeightLossConfig()
    batch = list(batch)
    labels = [_label(b[0]) for b in batch]
    etas = [_eta(b[1]) for b in batch]
    xi, _ = sample_benchmark(labels, etas, cfg, np.random.default_rng(cfg.seed))
    return xi


def weight_loss(batch, xi: float | None, delta: float = 0.5) -> float:
    """Mean hinge ``max(0, delta - (eta_g - xi))`` over the Leadership entries of the batch."""
    if xi is None:
        return 0.0
    lead = [_eta(b[1]) for b in batch if _label(b[0]) is Label.LEADERSHIP]
    if not lead:
        return 0.0
    return float(np.mean([max(0.0, delta - (e - xi)) for e in lead]))


def total_loss(l_group: float, l_weight: float) -> float:
    for v in (l_group, l_weight):
        if not math.isfinite(v):
            raise ValueError("loss terms must be finite")
        if v < 0:
            raise ValueError("loss terms must be non-negative")
    return l_group + l_weight


def weight_loss_arrays(etas, is_lead, chosen, delta: float):
    """Vectorised hinge over one batch: returns (loss, d_loss/d_eta)."""
    etas = np.asarray(etas, dtype=np.float64)
    d = np.zeros_like(etas)
    lead = np.flatnonzero(is_lead)
    if chosen.size == 0 or lead.size == 0:
        return 0.0, d
    xi = etas[chosen].mean()
    margin = delta - (etas[lead] - xi)
    active = margin > 0
    loss = float(np.where(active, margin, 0.0).mean())
    n_active = int(active.sum())
    d[lead[active]] -= 1.0 / lead.size
    d[chosen] += n_active / lead.size / chosen.size
    return loss, d


# ---------------------------------------------------------------------------
# configuration and reports


@dataclass
class TrainConfig:
    pretrain_epochs: int = 5
    joint_epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    negatives: int = 4
    eval_negatives: int = 100
    dim: int = 32
    seed: int = 0
    use_dali: bool = True
    disc_steps: int = 50
    disc_lr: float = 0.01
    disc_hidden: tuple[int, int] = (16, 8)
    disc_target: str = "auto"  # "auto" | "planted" | "fused"
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    weight: WeightLossConfig = field(default_factory=WeightLossConfig)
    triggers: TriggerConfig = field(default_factory=TriggerConfig)
    case_window: int = 2000
    audit: bool = True
    dropout: float = 0.0  # on the group representation; off by default

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.joint_epochs < 1:
            raise ValueError("joint_epochs must be >= 1")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if self.negatives < 1 or self.eval_negatives < 1:
            raise ValueError("negative counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.disc_target not in ("auto", "planted", "fused"):
            raise ValueError(f"unknown disc_target {self.disc_target!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["disc_hidden"] = list(self.disc_hidden)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weight"] = WeightLossConfig(**d["weight"])
        d["triggers"] = TriggerConfig(**d["triggers"])
        d["disc_hidden"] = tuple(d["disc_hidden"])
        d["split"] = tuple(d["split"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


METRIC_NAMES = tuple(f"{lvl}_{m}@{k}" for lvl in ("group", "user") for m in ("hr", "ndcg") for k in EVAL_KS)


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    loss: float = 0.0
    epoch: int = 0
    skipped: int = 0

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} = {v} outside [0, 1]")
        if self.loss < 0:
            raise ValueError("loss must be non-negative")

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "skipped": self.skipped, **self.metrics}


# ---------------------------------------------------------------------------
# prepared data


@dataclass
class EvalSet:
    """Leave-one-out cases: entity, held-out item, and its sampled negatives."""

    entities: np.ndarray
    truth: np.ndarray
    negatives: np.ndarray  # rows x k
    skipped: int = 0


@dataclass
class Prepared:
    ds: Dataset
    split: DatasetSplit
    history: list[np.ndarray]  # per group: items usable for training / profiles
    group_rows: np.ndarray  # training (group, item) pairs, R x 2
    user_rows: np.ndarray  # training (user, item) pairs
    group_pos: np.ndarray  # G x I bool: every observed group interaction
    user_pos: np.ndarray
    valid: EvalSet
    test: EvalSet
    users: EvalSet


def _entity_seed(seed: int, kind: int, entity: int) -> int:
    return int(np.random.SeedSequence([seed, kind, entity]).generate_state(1)[0])


def _leave_one_out(ds: Dataset, entities, kind: str, seed: int, k: int):
    log_ = ds.group_item if kind == "group" else ds.user_item
    code = 1 if kind == "group" else 2
    held = {}
    rows_e, rows_t, rows_n = [], [], []
    skipped = 0
    for e in entities:
        items = log_.items_of(e)
        if len(items) < (1 if kind == "group" else 2):
            skipped += 1
            continue
        rng = np.random.default_rng(_entity_seed(seed, code, e))
        h = int(items[int(rng.integers(len(items)))])
        if ds.num_items - len(set(items)) < k:
            skipped += 1
            continue
        held[e] = h
        negs = negative_sample(ds, e, k, _entity_seed(seed, code + 10, e), kind=kind)
        rows_e.append(e)
        rows_t.append(h)
        rows_n.append(negs)
    ev = EvalSet(np.array(rows_e, dtype=np.int64), np.array(rows_t, dtype=np.int64),
                 np.array(rows_n, dtype=np.int64).reshape(len(rows_e), k), skipped)
    return ev, held


def prepare(ds: Dataset, cfg: TrainConfig) -> Prepared:
    split = split_groups(ds, cfg.split, cfg.seed)
    if not split.train_groups:
        raise ValueError("training split is empty")
    valid, held_v = _leave_one_out(ds, split.valid_groups, "group", cfg.seed, cfg.eval_negatives)
    test, held_t = _leave_one_out(ds, split.test_groups, "group", cfg.seed, cfg.eval_negatives)
    users, held_u = _leave_one_out(ds, range(ds.num_users), "user", cfg.seed, cfg.eval_negatives)
    held_g = {**held_v, **held_t}

    history = []
    group_rows = []
    for g in ds.groups:
        items = [i for i in ds.group_item.items_of(g.id) if i != held_g.get(g.id)]
        history.append(np.array(items, dtype=np.int64))
        group_rows.extend((g.id, i) for i in items)
    user_rows = [(u, i) for u, i in ds.user_item.entries if held_u.get(u) != i]
    if not group_rows:
        raise ValueError("no group interactions to train on")

    group_pos = np.zeros((ds.num_groups, ds.num_items), dtype=bool)
    for g, i in ds.group_item.entries:
        group_pos[g, i] = True
    user_pos = np.zeros((ds.num_users, ds.num_items), dtype=bool)
    for u, i in ds.user_item.entries:
        user_pos[u, i] = True
    return Prepared(ds, split, history, np.array(group_rows, dtype=np.int64),
                    np.array(user_rows, dtype=np.int64).reshape(-1, 2), group_pos, user_pos, valid, test, users)


def sample_negatives(pos_mask: np.ndarray, entities: np.ndarray, k: int, rng) -> np.ndarray:
    """Uniform negatives per row, resampling any that hit an observed interaction."""
    n_items = pos_mask.shape[1]
    negs = rng.integers(n_items, size=(entities.size, k))
    for _ in range(100):
        bad = pos_mask[entities[:, None], negs]
        if not bad.any():
            break
        negs[bad] = rng.integers(n_items, size=int(bad.sum()))
    return negs


# ---------------------------------------------------------------------------
# the trainer


@dataclass
class EpochDecisions:
    profiles: list[np.ndarray]
    raw_features: np.ndarray  # G x 8
    neural: np.ndarray  # G x 2
    decisions: list[GroupDecision]
    labels: np.ndarray  # G, Label ints
    leaders: np.ndarray  # G, user ids
    gamma: float


class Trainer:
    """Holds model, discriminator, repository, and agent for one experiment."""

    def __init__(self, ds: Dataset, cfg: TrainConfig, repo: Repository | None = None, agent=None,
                 out_dir=None):
        self.ds = ds
        self.cfg = cfg
        self.data = prepare(ds, cfg)
        self.model = new_model(ds.num_users, ds.num_items, cfg.dim, cfg.seed)
        self.opt = OptimizerState(lr=cfg.lr)
        h1, h2 = cfg.disc_hidden
        self.mlp = init_mlp(8, h1, h2, seed=cfg.seed + 1)
        self.disc = DiscriminatorTrainer(self.mlp, OptimizerState(lr=cfg.disc_lr))
        self.std = Standardizer.identity(8)
        self.repo = repo if repo is not None else Repository.create()
        self.agent = agent if agent is not None else select_agent("scripted")
        self.triggers = cfg.triggers
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng(cfg.seed + 2)
        self.bench_rng = np.random.default_rng(cfg.weight.seed + cfg.seed)
        self.history: list[dict] = []
        self.pretrain_losses: list[float] = []
        self.outcomes: list = []
        self.epoch = 0
        self._planted = np.array(
            [int(g.planted_label.kind) if g.planted_label else -1 for g in ds.groups], dtype=np.int64)

    # -- profiles, features, decisions

    def profiles(self, group_ids=None, with_cache=False):
        """Mean member attention over each group's training items."""
        ds = self.ds
        ids = list(range(ds.num_groups)) if group_ids is None else list(group_ids)
        groups = [ds.groups[g] for g in ids]
        members, mask = pad_members(groups)
        hist = [self.data.history[g] for g in ids]
        c_max = max(1, max(h.size for h in hist))
        items = np.zeros((len(ids), c_max), dtype=np.int64)
        item_mask = np.zeros((len(ids), c_max), dtype=bool)
        for r, h in enumerate(hist):
            items[r, : h.size] = h
            item_mask[r, : h.size] = True
        cache = attention_forward(self.model, members, mask, items)
        counts = np.maximum(item_mask.sum(axis=1), 1)
        prof = (cache.alpha * item_mask[:, :, None]).sum(axis=1) / counts[:, None]
        no_hist = item_mask.sum(axis=1) == 0
        if no_hist.any():  # no interactions: uniform over members
            prof[no_hist] = mask[no_hist] / mask[no_hist].sum(axis=1, keepdims=True)
        out = [prof[r, : groups[r].size].copy() for r in range(len(ids))]
        if with_cache:
            return out, (cache, item_mask, counts, members, mask)
        return out

    def decide(self, gamma: float, rules: RuleSet | None = None, profiles=None) -> EpochDecisions:
        rules = rules if rules is not None else self.repo.active.rules
        profiles = profiles if profiles is not None else self.profiles()
        raw = extract_features_many(profiles)
        G = len(profiles)
        leaders = np.array([self.ds.groups[g].members[int(np.argmax(p))] for g, p in enumerate(profiles)],
                           dtype=np.int64)
        if not self.cfg.use_dali:
            labels = np.full(G, int(Label.COLLABORATIVE), dtype=np.int64)
            return EpochDecisions(profiles, raw, np.tile([0.0, 1.0], (G, 1)), [], labels, leaders, gamma)
        X = self.std.transform(neural_inputs(raw))
        neural, _ = mlp_forward(self.mlp, X)
        decisions = []
        for g in range(G):
            sym = classify_features(rules, FeatureVector.from_array(raw[g]))
            decisions.append(fuse(sym, neural[g], gamma_value=gamma, group_id=g))
        labels = np.array([int(d.final_label) for d in decisions], dtype=np.int64)
        return EpochDecisions(profiles, raw, neural, decisions, labels, leaders, gamma)

    def gamma_at(self, t: int) -> float:
        return max(0.0, 1.0 - t / self.cfg.joint_epochs)

    # -- phase 1

    def pretrain(self) -> list[float]:
        rows = self.data.user_rows
        if rows.shape[0] == 0:
            raise ValueError("no user interactions to pretrain on")
        for _ in range(self.cfg.pretrain_epochs):
            perm = self.rng.permutation(rows.shape[0])
            total, batches = 0.0, 0
            for start in range(0, perm.size, self.cfg.batch_size):
                b = rows[perm[start : start + self.cfg.batch_size]]
                negs = sample_negatives(self.data.user_pos, b[:, 0], self.cfg.negatives, self.rng)
                cand = np.concatenate([b[:, 1:2], negs], axis=1)
                loss, grads = user_loss_arrays(self.model, b[:, 0], cand)
                optimizer_step({"user": self.model.emb.user, "item": self.model.emb.item},
                               {"user": grads["user"], "item": grads["item"]}, self.opt)
                total += loss
                batches += 1
            self.pretrain_losses.append(total / batches)
        self.refit_standardizer()
        return self.pretrain_losses

    def refit_standardizer(self, profiles=None):
        profiles = profiles if profiles is not None else self.profiles(self.data.split.train_groups)
        if len(profiles) > len(self.data.split.train_groups):
            profiles = [profiles[g] for g in self.data.split.train_groups]
        self.std = Standardizer(np.zeros(8), np.ones(8))
        self.std.fit(neural_inputs(extract_features_many(profiles)))

    # -- phase 2

    def _weight_loss_grads(self, batch_groups: np.ndarray, labels: np.ndarray, grads: dict) -> float:
        gids = np.unique(batch_groups)
        lab = labels[gids]
        etas = np.empty(gids.size)
        dws = []
        profs, (cache, item_mask, counts, members, mask) = self.profiles(gids, with_cache=True)
        for r, p in enumerate(profs):
            etas[r], dw = dominance_grad(p)
            dws.append(dw)
        _, chosen = sample_benchmark(lab, etas, self.cfg.weight, self.bench_rng)
        loss, d_eta = weight_loss_arrays(etas, lab == int(Label.LEADERSHIP), chosen, self.cfg.weight.delta)
        if loss == 0.0 or not np.any(d_eta):
            return loss
        n_max = mask.shape[1]
        d_prof = np.zeros((gids.size, n_max))
        for r, dw in enumerate(dws):
            d_prof[r, : dw.size] = d_eta[r] * dw
        d_alpha = (item_mask / counts[:, None])[:, :, None] * d_prof[:, None, :]
        gw, gb, _, _ = attention_backward(self.model, cache, d_alpha, with_embeddings=False)
        grads["att_w"] += gw
        grads["att_b"] += gb
        return loss

    def _user_batches(self):
        """Endless stream of shuffled user-item batches, one per group batch."""
        rows = self.data.user_rows
        if rows.shape[0] == 0:
            while True:
                yield None
        while True:
            perm = self.rng.permutation(rows.shape[0])
            for start in range(0, perm.size, self.cfg.batch_size):
                yield rows[perm[start : start + self.cfg.batch_size]]

    def train_epoch(self, dec: EpochDecisions) -> tuple[float, float]:
        """One pass over the group interactions.

        L_group is the group-level sampled softmax plus the same loss on a user
        batch of equal size; L_weight is added for DALI runs.
        """
        rows = self.data.group_rows
        perm = self.rng.permutation(rows.shape[0])
        lead_of = np.where(dec.labels == int(Label.LEADERSHIP), dec.leaders, -1)
        users = self._user_batches()
        total_g = total_w = 0.0
        batches = 0
        for start in range(0, perm.size, self.cfg.batch_size):
            b = rows[perm[start : start + self.cfg.batch_size]]
            gids = b[:, 0]
            negs = sample_negatives(self.data.group_pos, gids, self.cfg.negatives, self.rng)
            cand = np.concatenate([b[:, 1:2], negs], axis=1)
            members, mask = pad_members([self.ds.groups[g] for g in gids])
            grads = zero_grads(self.model)
            keep = None
            if self.cfg.dropout > 0:
                p = 1.0 - self.cfg.dropout
                keep = (self.rng.random((gids.size, self.cfg.dim)) < p) / p
            lg, _ = group_loss_arrays(self.model, members, mask, cand, lead_of[gids], grads, keep)
            ub = next(users)
            if ub is not None:
                u_negs = sample_negatives(self.data.user_pos, ub[:, 0], self.cfg.negatives, self.rng)
                lu, _ = user_loss_arrays(self.model, ub[:, 0], np.concatenate([ub[:, 1:2], u_negs], axis=1), grads)
                lg += lu
            lw = self._weight_loss_grads(gids, dec.labels, grads) if self.cfg.use_dali else 0.0
            optimizer_step(self.model.params(), grads, self.opt)
            total_g += lg
            total_w += lw
            batches += 1
        return total_g / batches, total_w / batches

    def disc_targets(self, dec: EpochDecisions, groups) -> np.ndarray:
        groups = np.asarray(groups, dtype=np.int64)
        planted = self._planted[groups]
        use_planted = self.cfg.disc_target == "planted" or (
            self.cfg.disc_target == "auto" and np.all(planted >= 0))
        if use_planted:
            if np.any(planted < 0):
                raise ValueError("planted labels requested but the dataset has none")
            return planted
        return dec.labels[groups]

    def train_discriminator(self, dec: EpochDecisions) -> list[float]:
        train = np.array(self.data.split.train_groups, dtype=np.int64)
        X = self.std.transform(neural_inputs(dec.raw_features[train]))
        return self.disc.train(X, self.disc_targets(dec, train), self.cfg.disc_steps)

    def add_cases(self, dec: EpochDecisions, epoch: int) -> None:
        recs = []
        for g in self.data.split.train_groups:
            f = FeatureVector.from_array(dec.raw_features[g])
            if self._planted[g] >= 0:
                recs.append(CaseRecord(f, Label(int(self._planted[g])), "synthetic-truth", epoch))
            else:
                recs.append(CaseRecord(f, Label(int(dec.labels[g])), "fused-decision", epoch))
        self.repo.add_cases(recs)

    # -- evaluation

    def rank_groups(self, ev: EvalSet, dec: EpochDecisions) -> np.ndarray:
        if ev.entities.size == 0:
            return np.zeros(0, dtype=np.int64)
        groups = [self.ds.groups[g] for g in ev.entities]
        members, mask = pad_members(groups)
        cand = np.concatenate([ev.truth[:, None], ev.negatives], axis=1)
        cache = attention_forward(self.model, members, mask, cand)
        rep = np.einsum("bcn,bnd->bcd", cache.alpha, cache.pm)
        lead = dec.labels[ev.entities] == int(Label.LEADERSHIP)
        if lead.any():
            rep[lead] = self.model.emb.user[dec.leaders[ev.entities][lead]][:, None, :]
        scores = np.einsum("bcd,bcd->bc", rep, cache.qc)
        return kernels.truth_ranks(scores[:, 0], scores[:, 1:])

    def rank_users(self, ev: EvalSet) -> np.ndarray:
        if ev.entities.size == 0:
            return np.zeros(0, dtype=np.int64)
        p = self.model.emb.user[ev.entities]
        cand = np.concatenate([ev.truth[:, None], ev.negatives], axis=1)
        scores = np.einsum("bd,bcd->bc", p, self.model.emb.item[cand])
        return kernels.truth_ranks(scores[:, 0], scores[:, 1:])

    def report(self, ev: EvalSet, dec: EpochDecisions, loss: float = 0.0, epoch: int = 0) -> MetricsReport:
        g_ranks = self.rank_groups(ev, dec)
        u_ranks = self.rank_users(self.data.users)
        metrics = {}
        for lvl, ranks in (("group", g_ranks), ("user", u_ranks)):
            for k in EVAL_KS:
                metrics[f"{lvl}_hr@{k}"] = float(hits_from_ranks(ranks, k).mean()) if ranks.size else 0.0
                metrics[f"{lvl}_ndcg@{k}"] = float(ndcg_from_ranks(ranks, k).mean()) if ranks.size else 0.0
        return MetricsReport(metrics, max(0.0, loss), epoch, ev.skipped)

    def label_accuracy(self, dec: EpochDecisions, groups) -> float | None:
        groups = np.asarray(groups, dtype=np.int64)
        groups = groups[self._planted[groups] >= 0]
        if groups.size == 0:
            return None
        return float(np.mean(dec.labels[groups] == self._planted[groups]))

    def replay_fn(self, gamma: float, profiles):
        def replay(rules: RuleSet) -> float:
            dec = self.decide(gamma, rules, profiles)
            ranks = self.rank_groups(self.data.valid, dec)
            return float(ndcg_from_ranks(ranks, 10).mean()) if ranks.size else 0.0

        return replay

    # -- closed loop

    def joint_train(self) -> list[dict]:
        cfg = self.cfg
        for t in range(cfg.joint_epochs):
            epoch = self.epoch = t + 1
            gamma = self.gamma_at(t)
            profiles = self.profiles()
            self.refit_standardizer(profiles)
            dec = self.decide(gamma, profiles=profiles)
            if cfg.use_dali:
                self.add_cases(dec, epoch)
            lg, lw = self.train_epoch(dec)
            loss = total_loss(lg, lw)
            profiles = self.profiles()
            dec = self.decide(gamma, profiles=profiles)
            if cfg.use_dali:
                self.train_discriminator(dec)
                dec = self.decide(gamma, profiles=profiles)
            rep = self.report(self.data.valid, dec, loss, epoch)
            self.repo.append_perf(PerfRecord(epoch, rep["group_ndcg@10"], rep["group_hr@10"], rep["user_ndcg@10"],
                                             loss, str(self.repo.active.version)))
            outcome = self.evolve_step(epoch, gamma, profiles) if cfg.use_dali else None
            held = list(self.data.split.valid_groups) + list(self.data.split.test_groups)
            row = {"epoch": epoch, "gamma": gamma, "loss": loss, "l_group": lg, "l_weight": lw,
                   **rep.metrics, "active_version": str(self.repo.active.version),
                   "evolve": "" if outcome is None else type(outcome).__name__,
                   "label_accuracy": self.label_accuracy(dec, held) if cfg.use_dali else None}
            self.history.append(row)
            if self.out_dir is not None and cfg.audit and dec.decisions:
                (self.out_dir / "audit").mkdir(parents=True, exist_ok=True)
                write_audit(self.out_dir / "audit" / f"epoch_{epoch:03d}.jsonl", dec.decisions)
            log.info("epoch %d gamma %.3f loss %.4f group ndcg@10 %.4f", epoch, gamma, loss, rep["group_ndcg@10"])
        return self.history

    def evolve_step(self, epoch: int, gamma: float, profiles):
        outcome = regression_rollback(self.repo, self.triggers, epoch)
        if outcome is not None:
            self.outcomes.append(outcome)
            return outcome
        event = detect_drift(self.repo.perf, self.triggers)
        if event is None:
            return None
        sandbox = self.repo.cases.records()[-self.cfg.case_window:]
        if len({c.label for c in sandbox}) < 2:
            outcome = NoChange("sandbox lacks one of the classes")
            self.repo.journal("evolve.jsonl", {"epoch": epoch, "event": event.kind.value, "outcome": "NoChange",
                                               "reason": outcome.reason, "report": None})
        else:
            outcome = evolve(self.repo, event, self.agent, self.triggers, sandbox, self.replay_fn(gamma, profiles),
                             epoch)
        self.outcomes.append(outcome)
        return outcome

    # -- final evaluation

    def final_decisions(self) -> EpochDecisions:
        return self.decide(0.0)

    def evaluate(self, which: str = "test") -> MetricsReport:
        ev = {"test": self.data.test, "valid": self.data.valid}[which]
        dec = self.final_decisions()
        last_loss = self.history[-1]["loss"] if self.history else 0.0
        return self.report(ev, dec, last_loss, self.epoch)

    # -- persistence

    def write_history(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["epoch", "gamma", "loss", "l_group", "l_weight", *METRIC_NAMES, "active_version", "evolve",
                "label_accuracy"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.history:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in cols})

    def save(self, path) -> None:
        save_checkpoint(path, self.model, {
            "mlp": self.mlp.arrays(),
            "standardizer": {"mean": self.std.mean, "std": self.std.std},
            "train": {"config": self.cfg.to_json(), "epoch": self.epoch},
        })

    @classmethod
    def from_checkpoint(cls, ds: Dataset, path, repo: Repository | None = None) -> "Trainer":
        model, sections = load_checkpoint(path)
        cfg = TrainConfig.from_json(sections["train"]["config"])
        if model.emb.user.shape[0] != ds.num_users or model.emb.item.shape[0] != ds.num_items:
            raise ValueError("checkpoint dimensions do not match the dataset")
        tr = cls(ds, cfg, repo)
        tr.model = model
        tr.mlp = MlpParams(**sections["mlp"])
        tr.std = Standardizer(sections["standardizer"]["mean"], sections["standardizer"]["std"], frozen=True)
        tr.epoch = int(sections["train"]["epoch"])
        return tr


# ---------------------------------------------------------------------------
# module-level entry points


def pretrain(trainer: Trainer) -> list[float]:
    return trainer.pretrain()


def joint_train(trainer: Trainer) -> list[dict]:
    return trainer.joint_train()


def evaluate(trainer: Trainer, which: str = "test") -> MetricsReport:
    return trainer.evaluate(which)


@dataclass
class ExperimentResult:
    history: list[dict]
    test: MetricsReport
    label_accuracy: float | None
    label_accuracy_all: float | None
    pretrain_losses: list[float]
    outcomes: list
    seconds: float

    def to_json(self) -> dict:
        return {
            "test": self.test.to_json(),
            "label_accuracy": self.label_accuracy,
            "label_accuracy_all": self.label_accuracy_all,
            "pretrain_losses": self.pretrain_losses,
            "outcomes": [type(o).__name__ for o in self.outcomes],
            "seconds": self.seconds,
        }


def run_experiment(ds: Dataset, cfg: TrainConfig, out_dir=None, repo: Repository | None = None,
                   agent=None) -> ExperimentResult:
    started = time.perf_counter()
    trainer = Trainer(ds, cfg, repo, agent, out_dir)
    trainer.pretrain()
    trainer.joint_train()
    test = trainer.evaluate("test")
    acc = acc_all = None
    if cfg.use_dali:
        dec = trainer.final_decisions()
        split = trainer.data.split
        acc = trainer.label_accuracy(dec, list(split.valid_groups) + list(split.test_groups))
        acc_all = trainer.label_accuracy(dec, range(ds.num_groups))
    result = ExperimentResult(trainer.history, test, acc, acc_all, trainer.pretrain_losses, trainer.outcomes,
                              time.perf_counter() - started)
    if out_dir is not None:
        out = Path(out_dir)
        trainer.write_history(out / "history.csv")
        trainer.save(out / "checkpoint.json")
        (out / "metrics.json").write_text(json.dumps(result.to_json(), indent=2) + "\n", encoding="utf-8")
    return result
