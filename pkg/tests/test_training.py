import copy
import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dali.data import Label
from dali.fusion import fuse
from dali.neural import Standardizer
from dali.repo import Repository
from dali.rules import SymbolicDecision
from dali.training import (
    MetricsReport,
    TrainConfig,
    Trainer,
    WeightLossConfig,
    collab_benchmark,
    dominance,
    dominance_grad,
    prepare,
    run_experiment,
    sample_negatives,
    total_loss,
    weight_loss,
    weight_loss_arrays,
)
from gradcheck import numeric_grads, rel_error

L, C = Label.LEADERSHIP, Label.COLLABORATIVE


def tiny_cfg(**kw):
    base = dict(pretrain_epochs=2, joint_epochs=3, batch_size=16, lr=0.01, dim=8, seed=1, disc_steps=10,
                eval_negatives=20)
    base.update(kw)
    return TrainConfig(**base)


class TestDominance:
    @pytest.mark.parametrize("w,eta", [((0.7, 0.1, 0.1, 0.1), 6.0), ((0.5, 0.5), 0.0), ((0.9, 0.1), 8.0)])
    def test_examples(self, w, eta):
        assert dominance(w) == pytest.approx(eta, abs=1e-12)

    def test_singleton_capped(self):
        assert dominance([1.0]) == 1e6

    def test_gradient_fd(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            w = rng.dirichlet(np.ones(int(rng.integers(2, 7))))
            _, g = dominance_grad(w)
            num = np.zeros_like(w)
            for i in range(w.size):
                up, down = w.copy(), w.copy()
                up[i] += 1e-6
                down[i] -= 1e-6
                num[i] = (dominance(up) - dominance(down)) / 2e-6
            assert np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-8) < 1e-4


class TestBenchmark:
    def test_mean(self):
        assert collab_benchmark([(C, 0.0), (C, 0.2), (C, 0.4)], WeightLossConfig(K=3)) == pytest.approx(0.2)

    def test_clamp(self):
        assert collab_benchmark([(C, 1.0), (C, 2.0), (L, 9.0)], WeightLossConfig(K=5)) == pytest.approx(1.5)

    def test_undefined(self):
        assert collab_benchmark([(L, 1.0)]) is None

    def test_accepts_decisions_and_weights(self):
        d = fuse(SymbolicDecision(C, (0.2, 0.8), None), (0.3, 0.7), gamma_value=0.5)
        assert collab_benchmark([(d, [0.5, 0.5]), (d, [0.7, 0.1, 0.1, 0.1])], WeightLossConfig(K=2)) == pytest.approx(3.0)

    def test_seeded_subset(self):
        batch = [(C, float(i)) for i in range(20)]
        a = collab_benchmark(batch, WeightLossConfig(K=3, seed=4))
        assert a == collab_benchmark(batch, WeightLossConfig(K=3, seed=4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WeightLossConfig(K=0)
        with pytest.raises(ValueError):
            WeightLossConfig(delta=0)


class TestWeightLoss:
    def test_inactive(self):
        assert weight_loss([(L, 6.0)], 0.2, 0.5) == 0.0

    def test_active(self):
        assert weight_loss([(L, 0.2)], 0.1, 0.5) == pytest.approx(0.4)

    def test_no_leaders_or_xi(self):
        assert weight_loss([(C, 0.2)], 0.1) == 0.0
        assert weight_loss([(L, 0.2)], None) == 0.0

    @given(etas=st.lists(st.floats(0, 20), min_size=1, max_size=10), xi=st.floats(0, 20), delta=st.floats(0.01, 5))
    def test_non_negative_and_zero_when_margins_met(self, etas, xi, delta):
        batch = [(L, e) for e in etas]
        lw = weight_loss(batch, xi, delta)
        assert lw >= 0
        if all(e - xi >= delta for e in etas):
            assert lw == 0

    def test_arrays_match_scalar(self):
        etas = np.array([0.1, 2.0, 0.3, 0.0, 0.5])
        is_lead = np.array([True, True, False, False, True])
        chosen = np.array([2, 3])
        loss, d = weight_loss_arrays(etas, is_lead, chosen, 0.5)
        xi = etas[chosen].mean()
        assert loss == pytest.approx(weight_loss([(L, e) for e in etas[is_lead]], xi, 0.5))
        for i in range(etas.size):
            up, down = etas.copy(), etas.copy()
            up[i] += 1e-7
            down[i] -= 1e-7
            num = (weight_loss_arrays(up, is_lead, chosen, 0.5)[0] - weight_loss_arrays(down, is_lead, chosen, 0.5)[0]) / 2e-7
            assert d[i] == pytest.approx(num, abs=1e-6)


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(1.0, 0.4) == pytest.approx(1.4)
        assert total_loss(0.7, 0.0) == 0.7

    @pytest.mark.parametrize("bad", [(math.nan, 0.0), (1.0, math.inf), (-1.0, 0.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            total_loss(*bad)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr, c.weight.K, c.weight.delta) == (32, 0.001, 5, 0.5)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(joint_epochs=0), dict(pretrain_epochs=-1),
                                     dict(dropout=1.0), dict(disc_target="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_json_roundtrip(self):
        c = tiny_cfg(weight=WeightLossConfig(K=3, delta=0.2, seed=9))
        assert TrainConfig.from_json(json.loads(json.dumps(c.to_json()))) == c

    def test_metrics_report_bounds(self):
        with pytest.raises(ValueError):
            MetricsReport({"group_hr@5": 1.5})
        with pytest.raises(ValueError):
            MetricsReport({}, loss=-1)


class TestPrepare:
    def test_leave_one_out(self, small_ds):
        p = prepare(small_ds, tiny_cfg())
        held = dict(zip(p.valid.entities.tolist(), p.valid.truth.tolist()))
        for g, item in held.items():
            assert item not in p.history[g].tolist()
            assert not p.group_pos[g, p.valid.negatives[p.valid.entities.tolist().index(g)]].any()
        for g in p.split.train_groups:
            assert sorted(p.history[g].tolist()) == sorted(small_ds.group_item.items_of(g))
        assert p.valid.negatives.shape[1] == 20

    def test_sample_negatives_avoid_positives(self, rng):
        pos = np.zeros((3, 10), dtype=bool)
        pos[:, :8] = True
        negs = sample_negatives(pos, np.array([0, 1, 2]), 5, rng)
        assert np.all(negs >= 8)


class TestWeightLossGradient:
    def test_attention_gradient_fd(self, small_ds):
        tr = Trainer(small_ds, tiny_cfg(weight=WeightLossConfig(K=3, delta=20.0)))
        r = np.random.default_rng(0)
        tr.model.att.weight[:] = r.normal(size=tr.model.att.weight.size)
        tr.model.emb.user[:] = r.normal(size=tr.model.emb.user.shape)
        tr.model.emb.item[:] = r.normal(size=tr.model.emb.item.shape)
        gids = np.array([g.id for g in small_ds.groups if g.size >= 2][:12])
        labels = np.where(np.arange(small_ds.num_groups) % 2 == 0, int(L), int(C))
        state = copy.deepcopy(tr.bench_rng)

        def run(grads=None):
            tr.bench_rng = copy.deepcopy(state)
            grads = grads if grads is not None else {"att_w": np.zeros_like(tr.model.att.weight),
                                                     "att_b": np.zeros_like(tr.model.att.bias)}
            return tr._weight_loss_grads(gids, labels, grads), grads

        loss, grads = run()
        assert loss > 0
        num = numeric_grads(lambda: run()[0], {"att_w": tr.model.att.weight, "att_b": tr.model.att.bias})
        assert rel_error(grads, num) < 1e-4
        assert np.abs(num["att_b"]).max() < 1e-6  # a shared bias cannot move a softmax


class TestPhases:
    def test_pretrain_leaves_discriminator_and_reduces_loss(self, small_ds):
        tr = Trainer(small_ds, tiny_cfg(pretrain_epochs=6))
        before = {k: v.copy() for k, v in tr.mlp.arrays().items()}
        att = tr.model.att.weight.copy()
        losses = tr.pretrain()
        assert len(losses) == 6 and losses[-1] <= losses[0]
        assert all(np.array_equal(before[k], v) for k, v in tr.mlp.arrays().items())
        assert np.array_equal(att, tr.model.att.weight)

    def test_pretrain_zero_epochs(self, small_ds):
        tr = Trainer(small_ds, tiny_cfg(pretrain_epochs=0))
        params = {k: v.copy() for k, v in tr.model.params().items()}
        tr.pretrain()
        assert all(np.array_equal(params[k], v) for k, v in tr.model.params().items())
        assert not np.array_equal(tr.std.mean, Standardizer.identity(8).mean)

    def test_gamma_sequence(self, small_ds):
        tr = Trainer(small_ds, tiny_cfg(joint_epochs=50))
        assert [tr.gamma_at(t) for t in range(50)] == [max(0.0, 1 - t / 50) for t in range(50)]

    def test_single_joint_epoch(self, small_ds):
        repo = Repository.create()
        tr = Trainer(small_ds, tiny_cfg(joint_epochs=1), repo)
        tr.pretrain()
        n = len(repo.versions)
        hist = tr.joint_train()
        assert len(hist) == 1 and len(repo.perf) == 1
        assert len(repo.versions) - n <= 1

    def test_ablation_labels_all_collaborative(self, small_ds):
        tr = Trainer(small_ds, tiny_cfg(use_dali=False))
        dec = tr.decide(1.0)
        assert np.all(dec.labels == int(C)) and dec.decisions == []


@pytest.fixture(scope="module")
def runs(small_ds, tmp_path_factory):
    out = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(name)
        repo = Repository.create(d / "repo")
        out.append((run_experiment(small_ds, tiny_cfg(joint_epochs=4), out_dir=d, repo=repo), d))
    return out


class TestRun:
    def test_outputs(self, runs):
        res, d = runs[0]
        for name in ("history.csv", "checkpoint.json", "metrics.json"):
            assert (d / name).is_file()
        with (d / "history.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
        assert {"gamma", "loss", "l_weight", "group_ndcg@10", "user_hr@5", "active_version"} <= set(rows[0])
        assert len(list((d / "audit").glob("epoch_*.jsonl"))) == 4

    def test_audit_gamma_matches_schedule(self, runs):
        _, d = runs[0]
        for e in range(1, 5):
            lines = (d / "audit" / f"epoch_{e:03d}.jsonl").read_text().splitlines()
            assert {json.loads(l)["gamma"] for l in lines} == {max(0.0, 1 - (e - 1) / 4)}

    def test_metrics_ordered(self, runs):
        res, _ = runs[0]
        for row in res.history:
            assert row["group_hr@5"] <= row["group_hr@10"] and row["group_ndcg@5"] <= row["group_ndcg@10"]
            assert row["loss"] >= row["l_group"]
        assert res.test["user_hr@5"] <= res.test["user_hr@10"]

    def test_deterministic(self, runs):
        (a, da), (b, db) = runs
        assert (da / "history.csv").read_bytes() == (db / "history.csv").read_bytes()
        assert a.test.metrics == b.test.metrics

    def test_checkpoint_reload_evaluates_identically(self, small_ds, runs):
        res, d = runs[0]
        tr = Trainer.from_checkpoint(small_ds, d / "checkpoint.json", Repository.open(d / "repo"))
        assert tr.evaluate("test").metrics == pytest.approx(res.test.metrics)
