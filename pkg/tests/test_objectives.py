import math

import numpy as np
import pytest

from oracles import central_diff, rel_err, softmax_loss_naive
from pcfedavg.numerics import RngStream
from pcfedavg.objectives import (Dataset, NoisyQuadraticObjective, PersonalizationWeights, QuadraticObjective,
                                 SoftmaxObjective, grad_full, grad_stochastic, loss, smoothness_constant)


def _toy(n=40, D=5, K=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, D)), np.arange(n) % K, K)


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    return A @ A.T + 0.1 * np.eye(n)


def test_softmax_at_zero_is_log_classes():
    ds = _toy(K=10)
    assert loss(SoftmaxObjective(ds), np.zeros(50)) == pytest.approx(math.log(10), abs=1e-12)


def test_quadratic_example_value():
    assert loss(QuadraticObjective(np.eye(2), np.zeros(2)), np.array([3.0, 4.0])) == 12.5


def test_softmax_matches_per_sample_oracle():
    ds = _toy(n=4, D=3, K=3, seed=4)
    w = np.random.default_rng(5).standard_normal(9)
    want = softmax_loss_naive(ds.features.tolist(), ds.labels.tolist(), w.tolist(), 3)
    assert loss(SoftmaxObjective(ds), w) == pytest.approx(want, abs=1e-12)


def test_softmax_is_stable_for_large_logits():
    ds = _toy()
    val = loss(SoftmaxObjective(ds), 1e4 * np.ones(15))
    assert np.isfinite(val)


def test_quadratic_gradient_closed_form_and_stationarity():
    Q, b = _spd(5, 1), np.arange(5.0)
    o = QuadraticObjective(Q, b)
    w = np.linspace(-1, 1, 5)
    assert np.array_equal(grad_full(o, w), Q @ w - b)
    assert np.linalg.norm(grad_full(o, o.minimizer())) < 1e-10


def test_softmax_full_batch_stochastic_equals_full():
    o = SoftmaxObjective(_toy())
    w = np.random.default_rng(0).standard_normal(15)
    assert np.array_equal(grad_stochastic(o, w, RngStream(0), 1.0), grad_full(o, w))


def test_noiseless_quadratic_stochastic_equals_full():
    o = NoisyQuadraticObjective(np.eye(3), np.ones(3), 0.0)
    w = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(o.stochastic_grad(w, RngStream(0)), o.grad(w))


@pytest.mark.parametrize("Q,want", [(np.diag([1.0, 2.0, 3.0]), 3.0), (np.eye(4), 1.0)])
def test_smoothness_examples(Q, want):
    assert smoothness_constant(QuadraticObjective(Q, np.zeros(len(Q)))) == pytest.approx(want, rel=1e-9)


def test_smoothness_matches_dense_eigensolver():
    Q = _spd(10, 7)
    got = smoothness_constant(QuadraticObjective(Q, np.zeros(10)))
    assert got == pytest.approx(np.linalg.eigvalsh(Q)[-1], rel=1e-7)


def test_softmax_smoothness_certifies_gradient_lipschitz():
    o = SoftmaxObjective(_toy(n=60))
    rng = np.random.default_rng(3)
    L = o.smoothness()
    for _ in range(200):
        w, y = rng.standard_normal(15) * 3, rng.standard_normal(15) * 3
        assert np.linalg.norm(o.grad(w) - o.grad(y)) <= L * np.linalg.norm(w - y) * (1 + 1e-8)


def test_softmax_convexity_first_order():
    o = SoftmaxObjective(_toy(n=60))
    rng = np.random.default_rng(4)
    for _ in range(200):
        w, y = rng.standard_normal(15) * 2, rng.standard_normal(15) * 2
        assert o.loss(y) >= o.loss(w) + o.grad(w) @ (y - w) - 1e-9


def test_stochastic_softmax_unbiased():
    o = SoftmaxObjective(_toy(n=50))
    w = np.random.default_rng(1).standard_normal(15)
    rng = RngStream(2)
    draws = np.array([o.stochastic_grad(w, rng, 0.1) for _ in range(10_000)])
    se = draws.std(axis=0, ddof=1) / 100
    assert np.all(np.abs(draws.mean(axis=0) - o.grad(w)) <= 4 * se + 1e-15)


def test_weights_validation():
    assert PersonalizationWeights((0.0, 0.5)).max == 0.5
    with pytest.raises(ValueError):
        PersonalizationWeights((-0.1,))
    with pytest.raises(ValueError):
        SoftmaxObjective(_toy()).loss(np.zeros(3))
    with pytest.raises(ValueError):
        QuadraticObjective(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))


def test_softmax_gradient_finite_differences():
    o = SoftmaxObjective(_toy(n=30, D=4, K=3, seed=9))
    rng = np.random.default_rng(9)
    for _ in range(10):
        w = rng.standard_normal(12)
        assert rel_err(o.grad(w), central_diff(o.loss, w)) < 1e-5


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0]), 3)
    ds = _toy().with_bias()
    assert ds.n_features == 6 and np.all(ds.features[:, -1] == 1)
