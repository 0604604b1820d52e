import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from vgf_backstepping import taylor


def _exp_series(c, n):
    return np.array([c ** k / math.factorial(k) for k in range(n)])


def test_mul_matches_polynomial_product():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([4.0, 5.0])
    assert np.allclose(taylor.mul(a, b, 4), [4.0, 13.0, 22.0, 15.0])
    assert np.allclose(taylor.mul(a, b, 2), [4.0, 13.0])


def test_mul_truncates_and_broadcasts():
    a = np.ones((3, 5))
    b = np.arange(5.0)
    out = taylor.mul(a, b)
    assert out.shape == (3, 5)
    assert np.allclose(out[1], np.cumsum(np.arange(5.0)))


def test_exp_of_linear_stack():
    g = np.array([0.3, 2.0, 0.0, 0.0, 0.0, 0.0])
    assert np.allclose(taylor.exp(g), math.exp(0.3) * _exp_series(2.0, 6))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-2.0, 2.0), st.floats(-1.5, 1.5))
def test_power_inverts(u0, u1, p):
    u = np.array([u0, u1, 0.3, 0.0, 0.0, 0.0, 0.0])
    back = taylor.power(taylor.power(u, p), 1.0 / p) if abs(p) > 0.1 else u
    assert np.allclose(back, u, rtol=1e-9, atol=1e-9)


def test_diff_and_derivative_conversion():
    s = _exp_series(1.0, 6)
    assert np.allclose(taylor.to_derivatives(s), np.ones(6))
    assert np.allclose(taylor.diff(s), s[:-1])
    assert np.allclose(taylor.from_derivatives(taylor.to_derivatives(s)), s)
