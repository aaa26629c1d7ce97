import numpy as np
import pytest

from pcfedavg.numerics import (KSTAR, MINIBATCH, NOISE, RngStream, as_param, axpy, sample_indices, stream)


@pytest.mark.parametrize("a,x,y,want", [
    (0.0, (1, 2), (3, 4), (3, 4)),
    (1.0, (1, 2), (0, 0), (1, 2)),
    (2.0, (1, -1), (1, 1), (3, -1)),
])
def test_axpy_examples(a, x, y, want):
    assert np.array_equal(axpy(a, np.array(x, float), np.array(y, float)), np.array(want, float))


def test_axpy_is_exact_on_integers():
    rng = np.random.default_rng(0)
    x = rng.integers(-1000, 1000, 50).astype(float)
    y = rng.integers(-1000, 1000, 50).astype(float)
    assert np.array_equal(axpy(3.0, x, y), 3 * x + y)


def test_axpy_rejects_mismatch_and_overflow():
    with pytest.raises(ValueError):
        axpy(1.0, np.zeros(2), np.zeros(3))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        axpy(1e308, np.array([1e308]), np.array([0.0]))


def test_as_param_checks_length_and_finiteness():
    assert as_param([1, 2]).dtype == np.float64
    with pytest.raises(ValueError):
        as_param([1, 2], n=3)
    with pytest.raises(FloatingPointError):
        as_param([np.nan])


def test_exhaustive_draw_is_permutation():
    idx = sample_indices(RngStream(3, 0), 5, 5)
    assert sorted(idx.tolist()) == [0, 1, 2, 3, 4]


def test_single_index_frequencies_within_three_sigma():
    rng = RngStream(11, 0)
    counts = np.bincount([sample_indices(rng, 10, 1)[0] for _ in range(100_000)], minlength=10)
    sd = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) <= 3 * sd)


def test_same_stream_replays_and_distinct_streams_differ():
    a = [sample_indices(RngStream(5, 7), 100, 10) for _ in range(1)]
    b = [sample_indices(RngStream(5, 7), 100, 10) for _ in range(1)]
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(RngStream(5, 7).normal(8), RngStream(5, 8).normal(8))
    assert not np.array_equal(RngStream(5, 7).normal(8), RngStream(6, 7).normal(8))


def test_role_namespaces_do_not_collide():
    ids = {stream(0, role, i).stream_id for role in (MINIBATCH, NOISE, KSTAR) for i in range(100)}
    assert len(ids) == 300


def test_sample_indices_bounds():
    with pytest.raises(ValueError):
        sample_indices(RngStream(0), 3, 4)
    with pytest.raises(ValueError):
        sample_indices(RngStream(0), 3, 0)


def test_seed_range_is_validated():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(0, 1 << 64)
