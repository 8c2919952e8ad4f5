import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dali.data import Label
from dali.neural import (
    DiscriminatorTrainer,
    MlpParams,
    Standardizer,
    cross_entropy,
    init_mlp,
    label_of,
    mlp_backward,
    mlp_forward,
    mlp_predict,
)
from dali.rules import extract_features, neural_inputs
from gradcheck import numeric_grads, rel_error


def reference_forward(p, x):
    # written out column by column, no shared helpers with the package
    h1 = [max(0.0, sum(x[i] * p.W1[i, j] for i in range(len(x))) + p.b1[j]) for j in range(p.W1.shape[1])]
    h2 = [np.tanh(sum(h1[i] * p.W2[i, j] for i in range(len(h1))) + p.b2[j]) for j in range(p.W2.shape[1])]
    z = [sum(h2[i] * p.W3[i, j] for i in range(len(h2))) + p.b3[j] for j in range(2)]
    e = [np.exp(v - max(z)) for v in z]
    return np.array(e) / sum(e)


def random_params(rng, m=8, h1=16, h2=8):
    p = init_mlp(m, h1, h2, seed=int(rng.integers(1 << 30)))
    p.b1[:] = rng.normal(scale=0.5, size=h1)
    p.b2[:] = rng.normal(scale=0.5, size=h2)
    p.b3[:] = rng.normal(scale=0.5, size=2)
    return p


class TestForward:
    def test_zero_params(self):
        probs, _ = mlp_forward(MlpParams.zeros(8), np.ones(8))
        assert probs.tolist() == [0.5, 0.5]

    def test_reference_on_known_weights(self):
        p = init_mlp(8, seed=11)
        raw = extract_features([0.7, 0.1, 0.1, 0.1]).as_array()
        x = neural_inputs(raw[None, :])[0]
        probs, _ = mlp_forward(p, x)
        np.testing.assert_allclose(probs, reference_forward(p, x), atol=1e-12)
        again, _ = mlp_forward(p, x)
        assert np.array_equal(probs, again)

    def test_non_finite_input(self):
        with pytest.raises(ValueError):
            mlp_forward(MlpParams.zeros(2), [np.nan, 0.0])

    def test_large_logits_stay_finite(self):
        p = MlpParams.zeros(1, 1, 1)
        p.b3[:] = [1000.0, -1000.0]
        probs, _ = mlp_forward(p, [0.0])
        assert np.all(np.isfinite(probs)) and probs[0] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_output_is_a_distribution(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng)
        probs, _ = mlp_forward(p, rng.normal(size=(5, 8)))
        assert np.all(probs > 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_output_width_checked(self):
        with pytest.raises(ValueError):
            MlpParams(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(3))


class TestBackward:
    def test_finite_difference_many_triples(self):
        rng = np.random.default_rng(2024)
        errs = []
        for _ in range(100):
            p = random_params(rng)
            x = rng.normal(size=8)
            t = int(rng.integers(2))
            probs, cache = mlp_forward(p, x)
            grads = mlp_backward(p, x, t, cache)
            num = numeric_grads(lambda: cross_entropy(mlp_forward(p, x)[0], t), p.arrays())
            errs.append(rel_error(grads, num))
        assert max(errs) < 1e-4

    def test_batch_gradient_is_mean(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        X = rng.normal(size=(4, 8))
        t = np.array([0, 1, 1, 0])
        _, cache = mlp_forward(p, X)
        batch = mlp_backward(p, X, t, cache)
        parts = []
        for i in range(4):
            _, c = mlp_forward(p, X[i])
            parts.append(mlp_backward(p, X[i], t[i], c))
        for k in batch:
            np.testing.assert_allclose(batch[k], np.mean([g[k] for g in parts], axis=0), atol=1e-12)

    def test_zero_input_zero_bias_gives_zero_w1_grad(self):
        p = init_mlp(8, seed=0)
        x = np.zeros(8)
        _, cache = mlp_forward(p, x)
        assert np.all(mlp_backward(p, x, 0, cache)["W1"] == 0)

    def test_stale_cache(self):
        p = init_mlp(8, seed=0)
        x = np.ones(8)
        _, cache = mlp_forward(p, x)
        p.W1 += 0.1
        p.touch()
        with pytest.raises(ValueError, match="stale"):
            mlp_backward(p, x, 0, cache)
        _, cache = mlp_forward(p, x)
        with pytest.raises(ValueError, match="stale"):
            mlp_backward(init_mlp(8, seed=0), x, 0, cache)
        with pytest.raises(ValueError, match="stale"):
            mlp_backward(p, x + 1, 0, cache)

    def test_separable_toy_set_loss_decreases(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(60, 8))
        y = (X[:, 0] + X[:, 1] < 0).astype(int)
        losses = DiscriminatorTrainer(init_mlp(8, seed=4)).train(X, y, 100)
        assert losses[-1] < 0.5 * losses[0]
        assert all(np.isfinite(losses))


class TestPredict:
    @pytest.mark.parametrize("probs,label", [((0.9, 0.1), Label.LEADERSHIP), ((0.5, 0.5), Label.COLLABORATIVE),
                                             ((0.2, 0.8), Label.COLLABORATIVE)])
    def test_label_of(self, probs, label):
        assert label_of(probs) is label

    def test_predict_zero_params_ties(self):
        assert mlp_predict(MlpParams.zeros(8), np.zeros(8)) is Label.COLLABORATIVE


class TestStandardizer:
    def test_fit_transform(self):
        X = np.array([[1.0, 5.0], [3.0, 5.0]])
        s = Standardizer.identity(2).fit(X)
        out = s.transform(X)
        np.testing.assert_allclose(out[:, 0], [-1, 1])
        assert np.all(out[:, 1] == 0)  # constant column hits the floor, not a division by zero

    def test_frozen_ignores_fit(self):
        s = Standardizer.identity(2).freeze()
        s.fit(np.ones((3, 2)) * 7)
        assert s.mean.tolist() == [0, 0]
