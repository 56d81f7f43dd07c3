import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from persfit.errors import GimbalLock
from persfit.gravity import (
    GravityDir,
    angle_between,
    from_roll_pitch,
    retract,
    roll_pitch,
    roll_pitch_jacobian,
    tangent_basis,
)

unit_vectors = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


def test_upright_is_zero_roll_pitch():
    assert roll_pitch(GravityDir((0, 1, 0))) == (0.0, 0.0)


def test_looking_down():
    np.testing.assert_allclose(from_roll_pitch(0.0, math.pi / 2).vec, (0, 0, 1), atol=1e-16)


def test_round_trip_30_10():
    r, p = roll_pitch(from_roll_pitch(math.radians(30), math.radians(10)))
    assert r == pytest.approx(math.radians(30), abs=1e-9)
    assert p == pytest.approx(math.radians(10), abs=1e-9)


def test_pole_roll_convention():
    assert roll_pitch(GravityDir((0, 0, 1))) == (0.0, math.pi / 2)
    with pytest.raises(GimbalLock):
        roll_pitch(GravityDir((0, 0, -1)), strict=True)


def test_normalizes_and_is_read_only():
    g = GravityDir((0, 3, 4))
    np.testing.assert_allclose(g.vec, (0, 0.6, 0.8))
    with pytest.raises(ValueError):
        g.vec[0] = 1.0
    with pytest.raises(ValueError):
        GravityDir((0, 0, 0))


@given(st.floats(-math.pi + 1e-6, math.pi - 1e-6), st.floats(-1.5, 1.5))
def test_roll_pitch_round_trip(roll, pitch):
    g = from_roll_pitch(roll, pitch)
    assert abs(np.linalg.norm(g.vec) - 1) < 1e-12
    g2 = from_roll_pitch(*roll_pitch(g))
    assert angle_between(g.vec, g2.vec) < 1e-9


@given(st.floats(-3, 3), st.floats(-1.4, 1.4))
def test_roll_pitch_jacobian_matches_differences(roll, pitch):
    g = from_roll_pitch(roll, pitch)
    J = roll_pitch_jacobian(g)
    h = 1e-6
    num = np.zeros((2, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        # roll_pitch normalizes, so differentiate along the sphere only
        plus = np.array(roll_pitch(GravityDir(g.vec + e)))
        minus = np.array(roll_pitch(GravityDir(g.vec - e)))
        num[:, i] = (plus - minus) / (2 * h)
    B = tangent_basis(g)
    np.testing.assert_allclose(J @ B, num @ B, atol=1e-6)


@pytest.mark.parametrize("v", [(0, 1, 0), (0, 0, 1), (1, 0, 0), (1, 1, 1)])
def test_tangent_basis_fixed_cases(v):
    g = GravityDir(v)
    B = tangent_basis(g)
    np.testing.assert_allclose(B.T @ B, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(B.T @ g.vec, 0, atol=1e-12)


def test_tangent_basis_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        g = GravityDir(rng.normal(size=3))
        B = tangent_basis(g)
        np.testing.assert_allclose(B.T @ B, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(B.T @ g.vec, 0, atol=1e-12)
        # right-handed: b1 x b2 = g
        np.testing.assert_allclose(np.cross(B[:, 0], B[:, 1]), g.vec, atol=1e-12)


def test_retract_zero_is_identity():
    g = GravityDir((0.3, 0.9, -0.2))
    np.testing.assert_array_equal(retract(g, (0, 0)).vec, g.vec)


def test_retract_quarter_turn():
    g = GravityDir((0, 1, 0))
    assert angle_between(retract(g, (math.pi / 2, 0)).vec, g.vec) == pytest.approx(math.pi / 2, abs=1e-12)


@given(unit_vectors)
def test_retract_derivative_is_basis(v):
    g = GravityDir(v)
    h = 1e-6
    num = np.stack(
        [(retract(g, h * e).vec - retract(g, -h * e).vec) / (2 * h) for e in np.eye(2)],
        axis=1,
    )
    assert np.max(np.abs(num - tangent_basis(g))) < 1e-7


@given(unit_vectors, st.floats(-2, 2), st.floats(-2, 2))
def test_retract_is_geodesic(v, a, b):
    g = GravityDir(v)
    delta = np.array([a, b])
    n = np.linalg.norm(delta)
    out = retract(g, delta)
    assert abs(np.linalg.norm(out.vec) - 1) < 1e-12
    if n <= math.pi:
        assert angle_between(out.vec, g.vec) == pytest.approx(n, abs=1e-9)


def test_retract_small_step_series():
    g = GravityDir((0.1, 0.9, 0.4))
    tiny = retract(g, (1e-10, -2e-10))
    assert angle_between(tiny.vec, g.vec) == pytest.approx(math.sqrt(5) * 1e-10, rel=1e-6)
