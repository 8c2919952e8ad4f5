import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dali.data import Group
from dali.model import (
    AttentionParams,
    EmbeddingTable,
    MemberWeightVector,
    OptimizerState,
    RecModel,
    aggregate_group,
    attention_forward,
    attention_weights,
    group_loss,
    group_loss_arrays,
    init_model,
    load_checkpoint,
    new_model,
    optimizer_step,
    save_checkpoint,
    score,
    user_loss_arrays,
)
from gradcheck import numeric_grads, rel_error


def random_instance(rng, d=None, n_users=6, n_items=8):
    d = d or int(rng.integers(1, 5))
    model = RecModel(
        EmbeddingTable(rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d))),
        AttentionParams(rng.normal(size=3 * d), rng.normal(size=1)),
    )
    B = int(rng.integers(1, 4))
    c = int(rng.integers(2, 5))
    n_max = int(rng.integers(1, 5))
    members = np.zeros((B, n_max), dtype=np.int64)
    mask = np.zeros((B, n_max), dtype=bool)
    for r in range(B):
        n = int(rng.integers(1, n_max + 1))
        members[r, :n] = rng.choice(n_users, size=n, replace=False)
        mask[r, :n] = True
    cand = np.stack([rng.choice(n_items, size=c, replace=False) for _ in range(B)])
    leaders = np.array([members[r, 0] if rng.random() < 0.4 else -1 for r in range(B)])
    return model, members, mask, cand, leaders


def group_grad_error(rng, keep_mask=False):
    model, members, mask, cand, leaders = random_instance(rng)
    keep = (rng.random((cand.shape[0], model.dim)) < 0.7) / 0.7 if keep_mask else None
    _, grads = group_loss_arrays(model, members, mask, cand, leaders, keep=keep)
    num = numeric_grads(lambda: group_loss_arrays(model, members, mask, cand, leaders, keep=keep)[0],
                        model.params())
    return rel_error(grads, num)


class TestInit:
    def test_shapes_and_range(self):
        emb, att = init_model(5, 7, 8, seed=0)
        assert emb.user.shape == (5, 8) and emb.item.shape == (7, 8)
        assert att.weight.shape == (24,) and att.bias.shape == (1,)
        for a in (emb.user, emb.item, att.weight, att.bias):
            assert np.all(np.abs(a) <= 0.05)

    def test_deterministic(self):
        a, _ = init_model(5, 7, 8, seed=3)
        b, _ = init_model(5, 7, 8, seed=3)
        assert np.array_equal(a.user, b.user) and np.array_equal(a.item, b.item)

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            init_model(2, 2, 0, seed=0)


class TestAttention:
    def test_equal_members_uniform(self):
        m = new_model(4, 3, 4, seed=0)
        m.emb.user[:] = m.emb.user[0]
        w = attention_weights(Group(0, (0, 1, 2)), 1, m)
        np.testing.assert_allclose(w.weights, [1 / 3] * 3)

    def test_single_member(self):
        m = new_model(4, 3, 4, seed=0)
        assert attention_weights(Group(0, (2,)), 0, m).weights.tolist() == [1.0]

    def test_closed_form_logits(self):
        # logits (ln 2, 0, 0) through the first block: p_u . w[:d]
        d = 1
        m = RecModel(EmbeddingTable(np.array([[math.log(2)], [0.0], [0.0]]), np.zeros((1, 1))),
                     AttentionParams(np.array([1.0, 0.0, 0.0]), np.zeros(1)))
        np.testing.assert_allclose(attention_weights(Group(0, (0, 1, 2)), 0, m).weights, [0.5, 0.25, 0.25])
        assert m.dim == d

    def test_unknown_ids(self):
        m = new_model(3, 3, 2, seed=0)
        with pytest.raises(IndexError):
            attention_weights(Group(0, (0, 5)), 0, m)
        with pytest.raises(IndexError):
            attention_weights(Group(0, (0, 1)), 9, m)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
    def test_sums_to_one_and_bias_shift_invariant(self, seed, shift):
        rng = np.random.default_rng(seed)
        model, members, mask, cand, _ = random_instance(rng)
        a = attention_forward(model, members, mask, cand).alpha
        np.testing.assert_allclose(a.sum(axis=2), 1.0, atol=1e-9)
        assert np.all(a[~np.broadcast_to(mask[:, None, :], a.shape)] == 0)
        model.att.bias += shift
        b = attention_forward(model, members, mask, cand).alpha
        np.testing.assert_allclose(a, b, atol=1e-9)
        np.testing.assert_array_equal(a.argmax(axis=2), b.argmax(axis=2))


class TestAggregateAndScore:
    def test_one_hot(self):
        embs = np.arange(12, dtype=float).reshape(3, 4)
        assert np.array_equal(aggregate_group(embs, [0.0, 1.0, 0.0]), embs[1])

    def test_uniform_identical(self):
        v = np.array([0.3, -1.0])
        np.testing.assert_allclose(aggregate_group([v, v, v], MemberWeightVector(0, [1 / 3] * 3)), v)

    def test_half_half(self):
        np.testing.assert_allclose(aggregate_group([[1, 0], [0, 1]], [0.5, 0.5]), [0.5, 0.5])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            aggregate_group([[1, 0]], [0.5, 0.5])

    def test_score(self):
        assert score([0, 0], [0, 0]) == 0
        assert score([1, 2], [3, 4]) == 11
        assert score([1, 2], [3, 4]) == score([3, 4], [1, 2])
        with pytest.raises(ValueError):
            score([1], [1, 2])

    def test_weight_vector_validation(self):
        with pytest.raises(ValueError):
            MemberWeightVector(0, [0.6, 0.6])
        with pytest.raises(ValueError):
            MemberWeightVector(0, [])


class TestGroupLoss:
    def test_equal_scores_ln2(self):
        m = new_model(2, 2, 2, seed=0)
        m.emb.item[:] = 0.0
        loss, _ = group_loss([(Group(0, (0, 1)), 0, [1])], m)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_dominant_positive(self):
        m = new_model(1, 2, 1, seed=0)
        m.emb.user[:] = 1.0
        m.emb.item[:] = [[60.0], [-60.0]]
        loss, _ = group_loss([(Group(0, (0,)), 0, [1])], m)
        assert loss < 1e-40

    def test_empty_and_bad_batches(self):
        m = new_model(2, 3, 2, seed=0)
        with pytest.raises(ValueError):
            group_loss([], m)
        with pytest.raises(ValueError):
            group_loss([(Group(0, (0,)), 0, [])], m)

    def test_leader_rows_use_leader_embedding(self):
        rng = np.random.default_rng(0)
        m = RecModel(EmbeddingTable(rng.normal(size=(3, 2)), rng.normal(size=(4, 2))),
                     AttentionParams(rng.normal(size=6), np.zeros(1)))
        g = Group(0, (0, 1, 2))
        led, _ = group_loss([(g, 0, [1, 2])], m, {0: 2})
        lone, _ = group_loss([(Group(0, (2,)), 0, [1, 2])], m)
        assert led == pytest.approx(lone, abs=1e-12)

    def test_gradients_fd(self):
        rng = np.random.default_rng(42)
        errs = [group_grad_error(rng, keep_mask=k % 3 == 0) for k in range(30)]
        assert max(errs) < 1e-4

    def test_user_loss_gradients_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            model, _, _, cand, _ = random_instance(rng)
            users = rng.integers(0, model.emb.user.shape[0], size=cand.shape[0])
            _, grads = user_loss_arrays(model, users, cand)
            num = numeric_grads(lambda: user_loss_arrays(model, users, cand)[0],
                                {"user": model.emb.user, "item": model.emb.item})
            assert rel_error(grads, num) < 1e-4


class TestOptimizer:
    def test_zero_gradient_leaves_params(self):
        p = {"x": np.array([1.0, -2.0])}
        optimizer_step(p, {"x": np.zeros(2)}, OptimizerState())
        assert p["x"].tolist() == [1.0, -2.0]

    def test_step_counter(self):
        st_ = OptimizerState()
        optimizer_step({"x": np.zeros(1)}, {"x": np.ones(1)}, st_)
        assert st_.step == 1

    def test_first_step_hand_value(self):
        # m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1; step = -lr * 1 / (1 + 1e-8)
        p = {"x": np.zeros(1)}
        optimizer_step(p, {"x": np.ones(1)}, OptimizerState(lr=0.001))
        assert p["x"][0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            optimizer_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, OptimizerState())
        with pytest.raises(FloatingPointError):
            optimizer_step({"x": np.zeros(1)}, {"x": np.array([np.nan])}, OptimizerState())
        with pytest.raises(KeyError):
            optimizer_step({"x": np.zeros(1)}, {"y": np.zeros(1)}, OptimizerState())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = new_model(4, 5, 3, seed=9)
        save_checkpoint(tmp_path / "c.json", m, {"extra": {"a": np.arange(3.0), "b": "text"}})
        back, sections = load_checkpoint(tmp_path / "c.json")
        for k, v in m.params().items():
            assert np.array_equal(v, back.params()[k])
        assert back.seed == 9
        assert sections["extra"]["b"] == "text"
        assert np.array_equal(sections["extra"]["a"], np.arange(3.0))

    def test_bad_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.json")
        (tmp_path / "x.json").write_text('{"magic": "nope"}')
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(tmp_path / "x.json")
