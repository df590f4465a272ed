import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uqgate.evidential import (EvidentialModel, TrainConfig, anneal, evidence, evidential_loss,
                               kl_dirichlet_uniform, loss_gradients, mean_loss, one_hot,
                               predict_alphas, softplus, train)

from conftest import two_clusters


class TestAnchors:
    def test_softplus_zero(self):
        assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_relu_option(self):
        np.testing.assert_array_equal(evidence([-1.0, 2.0], "relu"), [0.0, 2.0])

    def test_evidence_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            evidence([np.nan, 0.0])

    def test_kl_hand_value(self):
        assert kl_dirichlet_uniform([2.0, 1.0]) == pytest.approx(math.log(2) - 0.5, abs=1e-14)

    def test_kl_zero_at_uniform(self):
        assert kl_dirichlet_uniform([1.0, 1.0, 1.0]) == 0.0

    def test_loss_at_flat_dirichlet(self):
        assert evidential_loss([1.0, 1.0], [1.0, 0.0], 1.0) == pytest.approx(0.5 + 1 / 6, abs=1e-14)

    def test_confident_correct_prediction(self):
        a = np.array([101.0, 1.0])
        y = np.array([1.0, 0.0])
        assert evidential_loss(a, y, 0.0) < 1e-3
        assert evidential_loss(a, y, 1.0) == evidential_loss(a, y, 0.0)

    @pytest.mark.parametrize("epoch, expected", [(0, 0.0), (5, 0.5), (10, 1.0), (25, 1.0)])
    def test_anneal(self, epoch, expected):
        assert anneal(epoch, 10) == expected

    def test_zero_model_alphas(self):
        a = predict_alphas(EvidentialModel.zeros(3, 4), np.ones(4))
        np.testing.assert_allclose(a, 1 + math.log(2))


class TestValidation:
    def test_loss_shape_mismatch(self):
        with pytest.raises(ValueError):
            evidential_loss([1.0, 2.0], [1.0, 0.0, 0.0], 0.5)

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            evidential_loss([1.0, 2.0], [1.0, 0.0], 1.5)

    def test_predict_dimension_mismatch(self):
        with pytest.raises(ValueError):
            predict_alphas(EvidentialModel.zeros(2, 3), np.ones(2))

    @pytest.mark.parametrize("kwargs", [{"epochs": -1}, {"learning_rate": 0}, {"anneal_epochs": 0},
                                        {"evidence": "exp"}])
    def test_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


alpha_vec = st.lists(st.floats(1.0, 50.0), min_size=2, max_size=5)


class TestProperties:
    @settings(max_examples=200)
    @given(alpha_vec)
    def test_kl_non_negative(self, a):
        assert kl_dirichlet_uniform(a) >= 0.0

    @settings(max_examples=100)
    @given(alpha_vec, st.floats(1e-3, 5.0))
    def test_kl_positive_away_from_uniform(self, a, bump):
        a = np.array(a)
        a[0] += bump
        assert kl_dirichlet_uniform(a) > 0.0

    @settings(max_examples=200)
    @given(alpha_vec, st.integers(0, 4), st.floats(0, 1), st.randoms())
    def test_loss_permutation_invariant(self, a, label, lam, rnd):
        a = np.array(a)
        y = one_hot(label % a.size, a.size)
        perm = list(range(a.size))
        rnd.shuffle(perm)
        assert evidential_loss(a[perm], y[perm], lam) == pytest.approx(evidential_loss(a, y, lam), rel=1e-12, abs=1e-14)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=5))
    def test_alphas_strictly_above_one(self, z):
        m = EvidentialModel(np.zeros((len(z), 1)), np.array(z))
        a = predict_alphas(m, [0.0])
        # softplus underflows to exactly 0 for logits below about -745
        assert np.all(a >= 1.0)
        assert np.all(a[np.array(z) > -30] > 1.0)
        assert a.size / a.sum() <= 1.0


def _finite_difference(model, X, Y, lam, h=1e-5):
    gW = np.zeros_like(model.W)
    gb = np.zeros_like(model.b)
    for arr, out in ((model.W, gW), (model.b, gb)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = mean_loss(model, X, Y, lam)
            arr[idx] = orig - h
            down = mean_loss(model, X, Y, lam)
            arr[idx] = orig
            out[idx] = (up - down) / (2 * h)
    return gW, gb


def gradient_relative_error(seed: int) -> float:
    g = np.random.default_rng(seed)
    k = int(g.integers(2, 5))
    d = int(g.integers(1, 4))
    n = int(g.integers(1, 6))
    model = EvidentialModel(g.normal(0, 1.5, (k, d)), g.normal(0, 1.5, k))
    X = g.normal(0, 1, (n, d))
    Y = one_hot(g.integers(0, k, n), k)
    lam = float(g.uniform(0, 1))
    aW, ab = loss_gradients(model, X, Y, lam)
    fW, fb = _finite_difference(model, X, Y, lam)
    a = np.concatenate([aW.ravel(), ab])
    f = np.concatenate([fW.ravel(), fb])
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-12))


def test_gradient_matches_finite_difference_relu():
    g = np.random.default_rng(4)
    model = EvidentialModel(g.normal(0, 1, (2, 2)), g.normal(0, 1, 2), "relu")
    X = g.normal(0, 1, (4, 2))
    Y = one_hot([0, 1, 1, 0], 2)
    aW, ab = loss_gradients(model, X, Y, 0.7)
    fW, fb = _finite_difference(model, X, Y, 0.7)
    np.testing.assert_allclose(aW, fW, rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(ab, fb, rtol=1e-4, atol=1e-8)


class TestTraining:
    def test_separable_accuracy(self):
        X, y = two_clusters(11, 200)
        model = train(X, y, TrainConfig(seed=11))
        acc = np.mean(predict_alphas(model, X).argmax(axis=1) == y)
        assert acc >= 0.95
        assert model.loss_trace[-1] <= model.loss_trace[0]
        assert len(model.loss_trace) == 1001

    def test_on_cluster_u_below_half(self):
        X, y = two_clusters(11, 200)
        model = train(X, y)
        a = predict_alphas(model, [2.0, 2.0])
        assert a.size / a.sum() < 0.5

    def test_zero_epochs_is_identity(self):
        X, y = two_clusters(0, 20)
        model = train(X, y, TrainConfig(epochs=0))
        np.testing.assert_array_equal(model.W, 0)
        np.testing.assert_array_equal(model.b, 0)

    def test_deterministic(self):
        X, y = two_clusters(2, 60)
        a, b = train(X, y, TrainConfig(epochs=50)), train(X, y, TrainConfig(epochs=50))
        np.testing.assert_array_equal(a.W, b.W)
        assert a.loss_trace == b.loss_trace

    def test_single_class_converges_to_confident(self):
        X, _ = two_clusters(5, 100)
        model = train(X, np.zeros(100, dtype=int))
        a = predict_alphas(model, X)
        assert np.all(a.argmax(axis=1) == 0)
        assert np.max(a.shape[1] / a.sum(axis=1)) < 0.2

    def test_one_hot_labels_accepted(self):
        X, y = two_clusters(3, 40)
        m1 = train(X, y, TrainConfig(epochs=20))
        m2 = train(X, one_hot(y, 2), TrainConfig(epochs=20))
        np.testing.assert_array_equal(m1.W, m2.W)

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            train(np.zeros((3, 2)), [0, 1])

    def test_divergence_reports_epoch(self):
        X, y = two_clusters(3, 40)
        with pytest.raises(FloatingPointError, match="epoch"):
            train(X * 1e150, y, TrainConfig(epochs=5, learning_rate=1e300))

    def test_model_json_round_trip(self):
        X, y = two_clusters(3, 40)
        m = train(X, y, TrainConfig(epochs=10))
        back = EvidentialModel.from_json(m.to_json())
        np.testing.assert_array_equal(back.W, m.W)
        np.testing.assert_array_equal(back.b, m.b)
