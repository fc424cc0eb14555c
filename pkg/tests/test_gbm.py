import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from cases import SPOTS, double_case, single_case, solved
from floatbound.curves import ModelSpec, ParamCurve
from floatbound.errors import DomainError, UnsupportedRegimeError
from floatbound.gbm import (american_call_single_boundary, american_put, d_pm, eep_pi, european_call,
                            european_put, psi1_psi2)
from floatbound.oracle import FDGrid, richardson
from floatbound.solver import ExerciseBoundary, backward_grid, solve_call_boundary

E = ParamCurve.exp_affine
C = ParamCurve.constant


def const_model(r=0.05, q=0.02, sigma=0.3, T=1.0):
    return ModelSpec("gbm", 100.0, T, r=C(r), q=C(q), sigma=C(sigma))


def bs_put(x, K, tau, r, q, sigma):
    """Textbook constant-coefficient Black-Scholes put (independent oracle)."""
    sd = sigma * math.sqrt(tau)
    d1 = (math.log(x / K) + (r - q + 0.5 * sigma * sigma) * tau) / sd
    d2 = d1 - sd
    return K * math.exp(-r * tau) * norm.cdf(-d2) - x * math.exp(-q * tau) * norm.cdf(-d1)


def empty_boundary(t0=0.0, T=1.0, n=20):
    u = backward_grid(t0, T, n)
    nan = np.full(u.size, np.nan)
    z = np.zeros(u.size)
    return ExerciseBoundary(u, nan, nan.copy(), z.astype(int), z.astype(bool), z, z.astype(int),
                            np.ones(u.size, dtype=bool))


# --- d+- -------------------------------------------------------------------

@given(st.floats(0.05, 1.0))
def test_d_pm_at_the_money_zero_rates(sigma):
    m = const_model(0.0, 0.0, sigma)
    half = sigma * 0.5
    assert d_pm(m, 100.0, 100.0, 0.0, 1.0, +1) == pytest.approx(-half, rel=1e-14)
    assert d_pm(m, 100.0, 100.0, 0.0, 1.0, -1) == pytest.approx(half, rel=1e-14)


@given(st.floats(20.0, 300.0), st.floats(20.0, 300.0), st.floats(0.0, 0.9), st.floats(0.01, 0.1))
def test_d_plus_minus_difference(x, y, t, dt):
    m = ModelSpec("gbm", 100.0, 1.0, r=E(-0.1, 0.2, 0.05), q=E(-0.2, -0.5, 0.13), sigma=E(0.6, -0.2))
    u = t + dt
    sd = math.sqrt(m.sigma.integrate_sq(t, u))
    diff = d_pm(m, x, y, t, u, +1) - d_pm(m, x, y, t, u, -1)
    assert diff == pytest.approx(-sd, rel=1e-12)


def test_d_pm_constant_case():
    m = const_model(0.05, 0.02, 0.3)
    # log-moneyness 0, drift (r - q) = 0.03, half variance 0.045
    assert d_pm(m, 100.0, 100.0, 0.0, 1.0, -1) == pytest.approx(-(0.03 - 0.045) / 0.3, rel=1e-13)
    assert d_pm(m, 100.0, 100.0, 0.0, 1.0, +1) == pytest.approx(-(0.03 + 0.045) / 0.3, rel=1e-13)


def test_d_pm_domain():
    m = const_model()
    with pytest.raises(DomainError):
        d_pm(m, -1.0, 100.0, 0.0, 1.0, 1)
    with pytest.raises(DomainError):
        d_pm(m, 100.0, 100.0, 0.5, 0.5, 1)


# --- European --------------------------------------------------------------

@given(st.floats(30.0, 250.0), st.floats(0.0, 0.95), st.floats(-0.05, 0.1), st.floats(-0.05, 0.1),
       st.floats(0.05, 0.8))
def test_european_put_matches_black_scholes(x, t, r, q, sigma):
    m = const_model(r, q, sigma)
    assert european_put(m, t, x) == pytest.approx(bs_put(x, 100.0, 1.0 - t, r, q, sigma), rel=1e-11,
                                                  abs=1e-12)


def test_european_put_small_spot_limit():
    m = double_case()
    D = math.exp(-m.r.integrate(0.0, 1.0))
    Dq = math.exp(-m.q.integrate(0.0, 1.0))
    # deep in the money the put is the forward value K D - x D_q
    assert european_put(m, 0.0, 1e-8) == pytest.approx(100.0 * D - 1e-8 * Dq, rel=1e-14)
    assert european_put(m, 0.0, 1e-300) == pytest.approx(100.0 * D, rel=1e-15)


def test_european_put_at_maturity_is_intrinsic():
    m = double_case()
    assert european_put(m, 1.0, 50.0) == 50.0
    assert european_put(m, 1.0 - 1e-13, 50.0) == 50.0


def test_european_put_time_dependent_vs_fd_oracle():
    m = double_case(0.3)
    ref = richardson(m, FDGrid(M=800, Nt=400), 0.0, np.array([100.0]), american=False, levels=3)
    assert european_put(m, 0.0, 100.0) == pytest.approx(float(ref.extrapolated[0]), rel=1e-4)


@given(st.floats(20.0, 300.0), st.floats(0.0, 0.99))
def test_put_call_parity(x, t):
    m = ModelSpec("gbm", 100.0, 1.0, r=E(-0.04, 1.4, 0.02), q=E(-0.05, -0.5, -0.01), sigma=E(0.6, -0.2))
    D = math.exp(-m.r.integrate(t, 1.0))
    Dq = math.exp(-m.q.integrate(t, 1.0))
    lhs = european_call(m, t, x) - european_put(m, t, x)
    rhs = x * Dq - 100.0 * D
    assert abs(lhs - rhs) <= 1e-12 * max(abs(rhs), european_put(m, t, x), 100.0)


def test_european_put_decreasing_in_spot():
    m = double_case()
    xs = np.linspace(10.0, 300.0, 600)
    assert np.all(np.diff(european_put(m, 0.2, xs)) < 0.0)


def test_european_rejects_bad_spot():
    with pytest.raises(DomainError):
        european_put(const_model(), 0.0, 0.0)


# --- density functionals ---------------------------------------------------

def test_psi_limits():
    m = double_case()
    D = math.exp(-m.r.integrate(0.1, 0.6))
    Dq = math.exp(-m.q.integrate(0.1, 0.6))
    p1, p2 = psi1_psi2(m, 0.1, 100.0, 0.6, 1e12)
    assert p1 == pytest.approx(1.0, abs=1e-15)
    assert p2 == pytest.approx(Dq / D, rel=1e-14)
    p1, p2 = psi1_psi2(m, 0.1, 100.0, 0.6, 1e-12)
    assert p1 == pytest.approx(0.0, abs=1e-15) and p2 == pytest.approx(0.0, abs=1e-15)


def test_psi_zero_rates_at_the_money():
    m = const_model(0.0, 0.0, 0.3)
    p1, p2 = psi1_psi2(m, 0.0, 100.0, 1.0, 100.0)
    # P(X_1 < x) with log X_1 ~ N(log x - 0.045, 0.09)
    assert p1 == pytest.approx(norm.cdf(0.15), rel=1e-14)
    assert p2 == pytest.approx(norm.cdf(-0.15), rel=1e-14)
    assert p1 == pytest.approx(0.559618, abs=1e-6)


@given(st.floats(40.0, 200.0), st.floats(30.0, 200.0), st.floats(0.0, 0.8), st.floats(0.02, 0.2))
def test_psi_against_density_quadrature(x, b, t, dt):
    m = ModelSpec("gbm", 100.0, 1.0, r=E(0.05, 1.0, -0.03), q=E(0.01, -0.8, -0.04), sigma=C(0.4))
    u = t + dt
    mu = math.log(x) + m.r.integrate(t, u) - m.q.integrate(t, u) - 0.5 * m.sigma.integrate_sq(t, u)
    sd = math.sqrt(m.sigma.integrate_sq(t, u))
    dens = lambda s: norm.pdf((s - mu) / sd) / sd  # in log-space
    lo = mu - 12 * sd
    if math.log(b) <= lo:
        return
    ref1 = quad(dens, lo, math.log(b), epsabs=1e-13, epsrel=1e-12)[0]
    ref2 = quad(lambda s: math.exp(s) * dens(s), lo, math.log(b), epsabs=1e-12, epsrel=1e-12)[0]
    p1, p2 = psi1_psi2(m, t, x, u, b)
    assert p1 == pytest.approx(ref1, abs=1e-9)
    # psi2 is the partial first moment per unit spot: E[X_u; X_u < b] / x
    assert p2 * x == pytest.approx(ref2, rel=1e-8, abs=1e-9)


# --- premium and American price -------------------------------------------

def test_empty_boundary_gives_zero_premium():
    m = single_case()
    b = empty_boundary()
    assert eep_pi(m, 0.0, np.array([80.0, 100.0]), b) == pytest.approx([0.0, 0.0], abs=0.0)
    res = american_put(m, 0.0, np.array([80.0, 100.0]), b)
    assert np.array_equal(res.price, res.european)


def test_coincident_boundaries_contribute_nothing():
    m = double_case()
    u = backward_grid(0.0, 1.0, 20)
    lvl = np.full(u.size, 60.0)
    n = u.size
    b = ExerciseBoundary(u, lvl, lvl.copy(), np.full(n, 2), np.zeros(n, bool), np.zeros(n),
                         np.zeros(n, int), np.ones(n, bool))
    assert eep_pi(m, 0.0, 100.0, b) == pytest.approx(0.0, abs=1e-15)


def test_double_case_premium_positive():
    m, k, b, _ = solved("double")
    assert eep_pi(k, 0.0, 100.0, b) > 0.0


@pytest.mark.parametrize("name", ["single", "double", "mixed"])
def test_value_matching_on_boundary(name):
    m, k, b, _ = solved(name)
    for i in range(0, b.u.size - 1, 17):
        if b.state[i] == 0:
            continue
        t = float(b.u[i])
        x = float(b.upper[i])
        assert american_put(k, t, x, b).price[0] == pytest.approx(100.0 - x, abs=1e-6 * 100.0)


def test_premium_monotone_in_spot_floating_case():
    m, k, b, _ = solved("floating_0.54")
    eep = american_put(k, 0.0, SPOTS, b).eep
    assert np.all(np.diff(eep) < 0.0)


# --- American call --------------------------------------------------------

def test_call_without_dividends_is_european():
    m = const_model(0.05, 0.0, 0.3)
    res = american_call_single_boundary(m, 0.0, np.array([90.0, 100.0, 120.0]), None)
    assert np.array_equal(res.price, res.european)


def test_call_with_dividends_matches_fd_by_symmetry():
    # American call(x, K; r, q) equals American put(K, x; q, r); with r = q and
    # x = K the put is the oracle's own problem.
    m = const_model(0.05, 0.05, 0.3)
    b = solve_call_boundary(m)
    price = american_call_single_boundary(m, 0.0, np.array([100.0]), b).price[0]
    ref = richardson(m, FDGrid(), 0.0, np.array([100.0]), american=True, levels=2).extrapolated[0]
    assert price == pytest.approx(ref, rel=2e-3)
    assert price > european_call(m, 0.0, 100.0)


def test_call_requires_non_negative_yield():
    m = const_model(0.05, -0.01, 0.3)
    with pytest.raises(UnsupportedRegimeError):
        american_call_single_boundary(m, 0.0, np.array([100.0]), None)
