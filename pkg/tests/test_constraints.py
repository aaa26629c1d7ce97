import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, l1_project_bisection, rel_err
from pcfedavg import constraints as cs

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 30), elements=finite)
radii = st.floats(0.01, 40)

SETS = [cs.L1Ball(1.0), cs.L1Ball(7.5), cs.Box(-1.0, 2.0), cs.Unconstrained()]


def test_interior_point_is_fixed():
    assert np.array_equal(cs.project(cs.L1Ball(1.0), np.array([0.2, -0.3])), [0.2, -0.3])


def test_axis_point_clips_to_boundary():
    assert np.allclose(cs.project(cs.L1Ball(1.0), np.array([2.0, 0.0])), [1.0, 0.0], atol=0)


def test_diagonal_point_matches_bisection_oracle():
    got = cs.project(cs.L1Ball(1.0), np.array([1.0, 1.0]))
    want = l1_project_bisection([1.0, 1.0], 1.0)
    assert np.allclose(want, [0.5, 0.5], atol=1e-12)
    assert np.allclose(got, want, atol=1e-12)


def test_distance_and_penalty_examples():
    S = cs.L1Ball(1.0)
    x = np.array([2.0, 0.0])
    assert cs.distance_sq(S, x) == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(cs.penalty_grad(S, x), [1.0, 0.0])
    assert cs.distance_sq(S, np.array([0.1, 0.2])) == 0.0
    assert np.array_equal(cs.penalty_grad(S, np.array([0.1, 0.2])), [0.0, 0.0])


def test_distance_is_consistent_with_projection():
    rng = np.random.default_rng(1)
    for S in SETS:
        for _ in range(50):
            x = 3 * rng.standard_normal(8)
            assert cs.distance_sq(S, x) == pytest.approx(float(np.sum((x - cs.project(S, x)) ** 2)), abs=1e-12)


def test_penalty_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    for S in SETS[:3]:
        for _ in range(20):
            x = 3 * rng.standard_normal(6)
            fd = central_diff(lambda v: 0.5 * cs.distance_sq(S, v), x)
            assert rel_err(cs.penalty_grad(S, x), fd) < 1e-5 or np.linalg.norm(fd) < 1e-8


def test_from_tau_maps_infinity_to_unconstrained():
    assert isinstance(cs.from_tau(float("inf")), cs.Unconstrained)
    assert cs.from_tau(2.0) == cs.L1Ball(2.0)


def test_invalid_sets_rejected():
    with pytest.raises(ValueError):
        cs.L1Ball(0.0)
    with pytest.raises(ValueError):
        cs.Box(np.array([1.0]), np.array([0.0]))


def test_ties_do_not_change_result():
    x = np.array([1.0, -1.0, 1.0, 0.5])
    assert np.allclose(cs.project_l1_ball(x, 1.0), l1_project_bisection(x, 1.0), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors, radii)
def test_l1_projection_idempotent_and_feasible(x, tau):
    p = cs.project_l1_ball(x, tau)
    assert np.abs(p).sum() <= tau * (1 + 1e-12)
    assert np.allclose(cs.project_l1_ball(p, tau), p, atol=1e-12, rtol=0)


@settings(max_examples=200, deadline=None)
@given(vectors, radii)
def test_l1_projection_is_soft_threshold(x, tau):
    assert np.max(np.abs(cs.project_l1_ball(x, tau) - l1_project_bisection(x, tau))) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))), st.sampled_from(SETS))
def test_projection_nonexpansive(pair, S):
    x, y = pair
    lhs = np.linalg.norm(cs.project(S, x) - cs.project(S, y))
    assert lhs <= np.linalg.norm(x - y) * (1 + 1e-12) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))),
    st.floats(0, 1), st.sampled_from(SETS))
def test_half_squared_distance_is_convex(pair, lam, S):
    x, y = pair
    h = lambda v: 0.5 * cs.distance_sq(S, v)  # noqa: E731
    assert h(lam * x + (1 - lam) * y) <= lam * h(x) + (1 - lam) * h(y) + 1e-10 * (1 + h(x) + h(y))
