import numpy as np
import pytest
from scipy import integrate

from insample.kernels import (
    get_kernel,
    kernel_l2,
    kernel_moment,
    selfconv_product_integral,
    selfconv_table,
)

KERNELS = ["epanechnikov", "quartic", "triangular"]


@pytest.mark.parametrize("p,expected", [(0, 1.0), (1, 0.0), (2, 0.2)])
def test_epanechnikov_moments(p, expected):
    assert kernel_moment("epanechnikov", p) == pytest.approx(expected, abs=1e-14)
    K = get_kernel("epanechnikov")
    quad, _ = integrate.quad(lambda u: u**p * K(u), -1, 1, epsabs=1e-14)
    assert kernel_moment("epanechnikov", p) == pytest.approx(quad, abs=1e-12)


@pytest.mark.parametrize("name,expected", [("epanechnikov", 0.6), ("quartic", 5 / 7),
                                           ("triangular", 2 / 3)])
def test_kernel_l2(name, expected):
    assert kernel_l2(name) == pytest.approx(expected, rel=1e-12)
    K = get_kernel(name)
    quad, _ = integrate.quad(lambda u: K(u) ** 2, -1, 1, points=[0.0], epsabs=1e-14)
    assert kernel_l2(name) == pytest.approx(quad, rel=1e-10)


@pytest.mark.parametrize("name", KERNELS)
def test_kernel_basic_shape(name):
    K = get_kernel(name)
    u = np.linspace(-1.5, 1.5, 3001)
    assert np.allclose(K(u), K(-u), atol=0, rtol=0)
    assert np.all(K(u[np.abs(u) > 1]) == 0)
    assert abs(kernel_moment(name, 0) - 1.0) <= 1e-10


@pytest.mark.parametrize("name", KERNELS)
def test_kernel_partial_moment_matches_quadrature(name):
    K = get_kernel(name)
    for s in (-0.7, 0.0, 0.35, 1.0):
        for k in (0, 1, 2):
            quad, _ = integrate.quad(lambda u: u**k * K(u), -1, s, points=[0.0] if s > 0 else None)
            assert float(K.partial_moment(s, k)) == pytest.approx(quad, abs=1e-12)


def test_moment_order_must_be_nonnegative():
    with pytest.raises(ValueError):
        kernel_moment("epanechnikov", -1)


def test_unknown_kernel():
    with pytest.raises(ValueError, match="unknown kernel"):
        get_kernel("gaussian")


@pytest.mark.parametrize("name", KERNELS)
def test_selfconv_table(name):
    u, kk = selfconv_table(name)
    assert u.size == 4001
    assert np.allclose(kk, kk[::-1], atol=1e-15)
    assert kk[0] == 0.0 and kk[-1] == 0.0
    assert abs(np.trapezoid(kk, u) - 1.0) < 1e-6
    K = get_kernel(name)
    for t in (0.0, 0.5, 1.3):
        ref, _ = integrate.quad(lambda s: K(s) * K(t - s), max(-1, t - 1), min(1, t + 1),
                                points=[0.0, t] if abs(t) < 1 else [t - 1], epsabs=1e-13)
        assert np.interp(t, u, kk) == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("name", KERNELS)
def test_selfconv_product_r1_matches_double_quadrature(name):
    K = get_kernel(name)

    def kk(t):
        lo, hi = max(-1.0, t - 1.0), min(1.0, t + 1.0)
        if hi <= lo:
            return 0.0
        return integrate.quad(lambda s: K(s) * K(t - s), lo, hi, epsabs=1e-12)[0]

    ref, _ = integrate.quad(lambda t: kk(t) ** 2, -2, 2, points=[-1.0, 0.0, 1.0], epsabs=1e-11)
    val = selfconv_product_integral(name, 1.0)
    assert val > 0
    assert val == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("name", KERNELS)
def test_selfconv_product_decreasing(name):
    vals = [selfconv_product_integral(name, r) for r in (1.0, 1.5, 2.0, 4.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_selfconv_product_large_r():
    assert selfconv_product_integral("epanechnikov", 50.0) < 0.02


def test_selfconv_product_requires_positive_r():
    with pytest.raises(ValueError):
        selfconv_product_integral("epanechnikov", 0.0)


@pytest.mark.parametrize("name", KERNELS)
@pytest.mark.parametrize("ratio", [0.5, 1.0, 2.0])
def test_sigma3_identity(name, ratio):
    c2 = 0.7
    c1 = ratio * c2
    lhs = selfconv_product_integral(name, c1 / c2) / c2
    rhs = selfconv_product_integral(name, c2 / c1) / c1
    assert abs(lhs - rhs) / abs(lhs) < 1e-6
