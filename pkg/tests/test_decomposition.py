import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from vde.decomposition import (Decomposition, NonFiniteInput, ZeroLatentNorm, decompose,
                               orthogonal_unit, recompose)
from vde.flow_core import DimensionMismatch


def test_parallel_velocity():
    x = np.array([1.0, -2.0, 0.5])
    d = decompose(3 * x, x, 0.1)
    assert d.alpha == pytest.approx(3.0, rel=1e-15)
    assert d.beta == 0.0
    assert abs(np.dot(d.u, x)) <= 1e-12 and np.isclose(np.linalg.norm(d.u), 1.0)


def test_pure_orthogonal():
    d = decompose([0, 2], [1, 0], 0.0)
    assert d.alpha == 0 and d.beta == 2 and np.allclose(d.u, [0, 1])


def test_hand_worked_example():
    d = decompose([2, 0], [1, 1], 0.3)
    assert d.alpha == pytest.approx(1.0)
    assert d.beta == pytest.approx(1.0)
    assert np.allclose(d.u, np.array([1, -1]) / np.sqrt(2))
    assert d.t == 0.3


def test_recompose_examples():
    d = Decomposition(1.0, 0.0, np.array([0.6, 0.8]), 0.0)
    assert np.allclose(recompose(d, [2, 3]), [2, 3])
    d = Decomposition(0.0, 1.0, np.array([0.0, 1.0]), 0.0)
    assert np.allclose(recompose(d, [3, 0]), [0, 3])


def test_errors():
    with pytest.raises(ZeroLatentNorm):
        decompose([1, 1], [0, 0], 0)
    with pytest.raises(NonFiniteInput):
        decompose([np.nan, 1], [1, 0], 0)
    with pytest.raises(DimensionMismatch):
        decompose([1, 1, 1], [1, 0], 0)
    with pytest.raises(DimensionMismatch):
        recompose(Decomposition(1, 0, np.array([0.0, 1.0]), 0), [1, 0, 0])


def test_degenerate_direction_prefers_previous_anchor():
    x = np.array([1.0, 1.0, 0.0])
    prev = np.array([0.0, 0.0, 1.0])
    d = decompose(2 * x, x, 0.0, fallback_u=prev)
    assert d.beta == 0 and np.allclose(d.u, prev)
    # without a previous direction: Gram-Schmidt on e1 against x
    d = decompose(2 * x, x, 0.0)
    assert np.allclose(d.u, np.array([1.0, -1.0, 0.0]) / np.sqrt(2))


def test_orthogonal_unit_skips_parallel_basis_vector():
    u = orthogonal_unit(np.array([1.0, 0.0]))
    assert np.allclose(np.abs(u), [0.0, 1.0])


@pytest.mark.parametrize("d", [2, 16, 4096])
def test_round_trip_random(d):
    rng = np.random.default_rng(d)
    for _ in range(200):
        x = rng.standard_normal(d) * rng.uniform(0.1, 10)
        v = rng.standard_normal(d) * rng.uniform(0.1, 10)
        dec = decompose(v, x, 0.5)
        assert np.linalg.norm(recompose(dec, x) - v) <= 1e-10 * np.linalg.norm(v)
        assert abs(np.dot(dec.u, x)) <= 1e-8 * np.linalg.norm(x)
        assert abs(np.linalg.norm(dec.u) - 1) <= 1e-10
        xx = np.dot(x, x)
        assert np.dot(v, v) == pytest.approx((dec.alpha**2 + dec.beta**2) * xx, rel=1e-9)


finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
pairs = st.integers(2, 12).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                       arrays(np.float64, n, elements=finite)))


@given(pairs, st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_scale_covariance(vx, c):
    v, x = vx
    assume(np.linalg.norm(x) > 1e-3)
    d0 = decompose(v, x, 0.0)
    assume(d0.beta * np.linalg.norm(x) > 1e-6 * max(np.linalg.norm(v), 1e-300))
    d1 = decompose(c * v, x, 0.0)
    assert d1.alpha == pytest.approx(c * d0.alpha, rel=1e-9, abs=1e-9)
    assert d1.beta == pytest.approx(abs(c) * d0.beta, rel=1e-9)
    assert np.allclose(d1.u, np.sign(c) * d0.u, atol=1e-9)


@given(pairs)
def test_round_trip_property(vx):
    v, x = vx
    assume(np.linalg.norm(x) > 1e-3)
    d = decompose(v, x, 0.0)
    assert np.linalg.norm(recompose(d, x) - v) <= 1e-10 * max(np.linalg.norm(v), 1e-300) + 1e-12
    assert abs(np.dot(d.u, x)) <= 1e-8 * np.linalg.norm(x)
    assert d.beta >= 0
