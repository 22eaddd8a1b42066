import math

import mpmath
import numpy as np
import pytest
from scipy import integrate as sint

from tailguard.errors import QuadratureError
from tailguard.quadrature import GAUSS_W, KRONROD_W, NODES, integrate, integrate_log


def test_rule_weights():
    assert KRONROD_W.sum() == pytest.approx(2.0, abs=1e-15)
    assert GAUSS_W.sum() == pytest.approx(2.0, abs=1e-15)
    # Kronrod is exact for degree-22 polynomials on [-1, 1]
    assert KRONROD_W @ NODES**22 == pytest.approx(2.0 / 23.0, rel=1e-13)


@pytest.mark.parametrize("f,a,b", [
    (np.exp, 0.0, 1.0),
    (lambda x: 1.0 / (1.0 + x * x), -50.0, 50.0),
    (lambda x: np.exp(-x * x), -10.0, 10.0),
    (lambda x: x**-1.5, 1.0, 1e4),
])
def test_against_scipy(f, a, b):
    ref, _ = sint.quad(f, a, b, epsabs=0, epsrel=1e-12, limit=500)
    assert integrate(f, a, b) == pytest.approx(ref, rel=1e-9)


def test_log_domain_beyond_float_range():
    # int_1^1e4 exp(0.1 x) 1.5 x^-2.5 dx is about exp(980)
    res = integrate_log(lambda x: 0.1 * x + math.log(1.5) - 2.5 * np.log(x), 1.0, 1e4)
    mpmath.mp.dps = 30
    ref = mpmath.quad(lambda x: mpmath.e ** (mpmath.mpf("0.1") * x - 1000) * 1.5 * x**-2.5,
                      [1, 10, 100, 1000, 5000, 9000, 9900, 10000])
    assert res.log_value == pytest.approx(float(mpmath.log(ref)) + 1000, abs=1e-9)
    assert res.value == math.inf


def test_narrow_bump_found_with_breakpoint():
    lf = lambda x: -0.5 * ((x - 7000.0) / 0.5) ** 2
    res = integrate_log(lf, 0.0, 1e4, breakpoints=[7000.0])
    assert res.value == pytest.approx(0.5 * math.sqrt(2 * math.pi), rel=1e-9)


def test_bad_interval():
    with pytest.raises(QuadratureError):
        integrate_log(lambda x: x, 1.0, 1.0)
    with pytest.raises(QuadratureError):
        integrate_log(lambda x: np.full_like(x, np.nan), 0.0, 1.0)
