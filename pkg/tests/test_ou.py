import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import erf

from cases import K, SPOTS, ou_case, ou_kernel, solved
from floatbound.curves import ModelSpec, ParamCurve
from floatbound.errors import DomainError, GridError, UnsupportedRegimeError
from floatbound.oracle import FDGrid, fd_american, fd_european, quad_density_check, richardson
from floatbound.ou import (OUKernel, build_transform, density_functionals_ou, direct_eep, effective_rates,
                           european_put_ou, american_put_ou, greens_heat, ou_density, solve_gradient,
                           static_hedge, static_hedge_eep)
from floatbound.solver import EMPTY, SolverConfig, solve_boundary

E = ParamCurve.exp_affine
C = ParamCurve.constant


def ou(r=C(0.02), sigma=C(20.0), kappa=C(1.0), theta=C(90.0), K=100.0, T=1.0):
    return ModelSpec("ou", K, T, r=r, sigma=sigma, kappa=kappa, theta=theta)


def log_space_case():
    """Schwartz-style reading: the state is log price, all inputs in log units."""
    return ou(sigma=C(0.3), theta=C(math.log(90.0)), K=math.log(100.0))


def time_dependent_case():
    return ou(r=E(0.03, 1.0, -0.01), sigma=E(15.0, -0.5, 5.0), kappa=E(0.5, 2.0, 0.8),
              theta=E(10.0, 1.0, 85.0))


def fd_edge_gradient(model, t, M=6400, Nt=1600):
    fd = fd_european(model, FDGrid(M=M, Nt=Nt), t, np.array([model.K]))
    v, h = fd.values, fd.nodes[1] - fd.nodes[0]
    return (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)


# --- effective rates ------------------------------------------------------

def test_effective_rates_test_model():
    rb, qb = effective_rates(ou_case(), 0.5)
    assert float(rb) == pytest.approx(0.92, rel=1e-15)
    assert float(qb) == pytest.approx(1.02, rel=1e-15)


def test_effective_rates_without_reversion():
    rb, qb = effective_rates(ou(kappa=C(0.0)), np.array([0.1, 0.9]))
    assert np.all(rb == 0.02) and np.all(qb == 0.02)


def test_effective_rates_zero_level():
    rb, qb = effective_rates(ou(theta=C(0.0)), 0.3)
    assert float(rb) == 0.02 and float(qb) == pytest.approx(1.02)


def test_effective_rates_require_ou():
    with pytest.raises(DomainError):
        effective_rates(ModelSpec("gbm", 100.0, 1.0, r=0.05, sigma=0.3), 0.5)


# --- heat transform -------------------------------------------------------

def test_transform_without_reversion():
    m = ou(kappa=C(0.0), r=C(0.0))
    tr = build_transform(m)
    for t in (0.0, 0.25, 0.8):
        tau = 1.0 - t
        assert float(tr.gamma(t)) == 1.0
        assert float(tr.phi(t)) == pytest.approx(400.0 * tau / 2.0, rel=1e-13)
        assert float(tr.y(t)) == pytest.approx(-400.0 * tau, rel=1e-13)
        # d beta/dt = r - sigma^2 / 2 integrated back from T
        assert float(tr.beta(t)) == pytest.approx(400.0 * tau / 2.0, rel=1e-13)


def test_transform_vanishes_at_maturity():
    tr = build_transform(time_dependent_case())
    assert float(tr.phi(1.0)) == 0.0
    assert float(tr.y(1.0)) == 0.0
    assert float(tr.beta(1.0)) == 0.0
    assert float(tr.gamma(1.0)) == 1.0


@pytest.mark.parametrize("t", [0.0, 0.3, 0.77])
def test_transform_functions_vs_quadrature(t):
    m = time_dependent_case()
    tr = build_transform(m)

    def gamma(s):
        return math.exp(-quad(lambda v: float(m.kappa(v)), s, 1.0, epsabs=1e-15)[0])

    def q(f):
        return quad(f, t, 1.0, epsabs=1e-13, epsrel=1e-13, limit=200)[0]

    phi = 0.5 * q(lambda s: float(m.sigma(s)) ** 2 * gamma(s) ** 2)
    y = q(lambda s: float(m.kappa(s) * m.theta(s)) * gamma(s)) - 2.0 * phi
    beta = -q(lambda s: float(m.r(s)) + gamma(s) * float(m.kappa(s) * m.theta(s))
              - 0.5 * gamma(s) ** 2 * float(m.sigma(s)) ** 2)
    assert float(tr.gamma(t)) == pytest.approx(gamma(t), rel=1e-13)
    assert float(tr.phi(t)) == pytest.approx(phi, rel=1e-10)
    assert float(tr.y(t)) == pytest.approx(y, rel=1e-10)
    assert float(tr.beta(t)) == pytest.approx(beta, rel=1e-10)


def test_transform_roundtrip():
    tr = build_transform(time_dependent_case())
    rng = np.random.default_rng(7)
    ts = rng.uniform(0.0, 0.999, 1000)
    xs = rng.uniform(0.0, 300.0, 1000)
    tau, z = tr.to_heat(ts, xs)
    t_back, x_back = tr.from_heat(tau, z)
    assert np.max(np.abs(t_back - ts)) <= 1e-12
    assert np.max(np.abs(x_back - xs) / np.maximum(1.0, np.abs(xs))) <= 1e-12


def test_transform_rejects_negative_tau():
    with pytest.raises(DomainError):
        build_transform(ou_case()).t_of_tau(-1.0)


# --- Green's function -----------------------------------------------------

def test_greens_function_vanishes_on_the_edge():
    for y in (-3.0, 0.0, 12.5):
        assert greens_heat(y, y + 0.7, 0.4, y) == 0.0


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.01, 3.0))
def test_greens_function_symmetric_and_non_negative(a, b, tau):
    y = -1.0
    g1 = greens_heat(y + a, y + b, tau, y)
    g2 = greens_heat(y + b, y + a, tau, y)
    assert g1 >= 0.0
    assert g1 == pytest.approx(g2, rel=1e-14, abs=1e-300)


@given(st.floats(0.0, 6.0), st.floats(0.01, 3.0))
def test_greens_function_mass_sub_stochastic(a, tau):
    y = 0.5
    mass = quad(lambda xi: greens_heat(y + a, xi, tau, y), y, np.inf, epsabs=1e-13)[0]
    assert mass <= 1.0 + 1e-12


def test_greens_function_mass_closed_form():
    tau, y = 0.3, 1.2
    z = y + 2.0 * math.sqrt(tau)
    mass = quad(lambda xi: greens_heat(z, xi, tau, y), y, np.inf, epsabs=1e-14, epsrel=1e-13)[0]
    # mass of the absorbed heat kernel: erf((z - y) / (2 sqrt(tau)))
    assert mass == pytest.approx(erf(1.0), abs=1e-10)


def test_greens_function_needs_positive_tau():
    with pytest.raises(DomainError):
        greens_heat(1.0, 1.0, 0.0, 0.0)


# --- edge gradient --------------------------------------------------------

def test_gradient_residual():
    assert ou_kernel().profile.residual <= 1e-8


def test_gradient_grid_too_small():
    with pytest.raises(GridError):
        solve_gradient(ou_case(), n=2)


def test_gradient_refinement_converges():
    m = ou_case()
    tr = build_transform(m)
    ts = np.array([0.0, 0.3, 0.6, 0.9])
    slopes = []
    for n, res in ((80, 0.4), (160, 0.2), (320, 0.1)):
        prof = solve_gradient(m, tr, n=n, drift_resolution=res)
        k = OUKernel(m, tr, prof, None)
        slopes.append(np.array([float(k.edge_slope(t)) for t in ts]))
    d1 = np.max(np.abs(slopes[1] - slopes[0]))
    d2 = np.max(np.abs(slopes[2] - slopes[1]))
    assert d2 <= 0.6 * d1


@pytest.mark.parametrize("t", [0.0, 0.5, 0.9])
def test_edge_gradient_vs_fd_price_space(t):
    assert float(ou_kernel().edge_slope(t)) == pytest.approx(fd_edge_gradient(ou_case(), t), rel=0.01)


@pytest.fixture(scope="module")
def log_kernel():
    return OUKernel.build(log_space_case())


@pytest.mark.parametrize("t", [0.0, 0.5, 0.9])
def test_edge_gradient_vs_fd_log_space(log_kernel, t):
    m = log_space_case()
    assert float(log_kernel.edge_slope(t)) == pytest.approx(fd_edge_gradient(m, t), rel=0.01)


# --- European put ---------------------------------------------------------

def test_european_near_maturity_is_intrinsic():
    k = ou_kernel()
    xs = np.array([50.0, 99.0, 150.0])
    assert np.allclose(k.european(1.0 - 1e-14, xs), np.maximum(K - xs, 0.0))


@pytest.mark.parametrize("t", [0.0, 0.4, 0.95])
def test_european_at_zero_pays_compounded_strike(t):
    k = ou_kernel()
    F = math.exp(0.02 * t)
    assert abs(float(k.european(t, 0.0)) - F * K) <= 1e-6 * K
    # and the pricer is continuous into the edge
    assert abs(float(k.european(t, 1e-9)) - F * K) <= 1e-6 * K


def test_european_vs_fd():
    k = ou_kernel()
    xs = np.array([50.0, 100.0, 150.0])
    ref = richardson(ou_case(), FDGrid(M=800, Nt=400), 0.0, xs, american=False, levels=2).extrapolated
    got = k.european(0.0, xs)
    assert np.all(np.abs(got / ref - 1.0) <= 0.005)


def test_european_far_field():
    k = ou_kernel()
    assert 0.0 <= float(k.european(0.0, 300.0)) <= 1e-6 * K


def test_european_decreasing_in_spot():
    xs = np.linspace(0.0, 250.0, 126)
    assert np.all(np.diff(ou_kernel().european(0.3, xs)) < 0.0)


def test_european_rejects_negative_spot():
    with pytest.raises(DomainError):
        european_put_ou(ou_case(), 0.0, -1.0, kernel=ou_kernel())


def test_european_time_dependent_vs_fd():
    m = time_dependent_case()
    xs = np.array([60.0, 100.0, 140.0])
    got = OUKernel.build(m).european(0.0, xs)
    ref = richardson(m, FDGrid(M=800, Nt=400), 0.0, xs, american=False, levels=2).extrapolated
    assert np.all(np.abs(got / ref - 1.0) <= 0.005)


# --- density functionals --------------------------------------------------

def test_functionals_limits():
    m = ou_case()
    p1, p2 = density_functionals_ou(m, 0.0, 100.0, np.array([0.5]), np.array([1e9]))
    # the spot is far from the absorbing edge: almost no mass is killed
    assert float(p1[0]) == pytest.approx(1.0, abs=1e-10)
    mean = math.exp(-0.5) * 100.0 + 90.0 * (1.0 - math.exp(-0.5))
    assert float(p2[0]) == pytest.approx(mean, rel=1e-10)
    p1, p2 = density_functionals_ou(m, 0.0, 100.0, np.array([0.5]), np.array([1e-12]))
    assert abs(float(p1[0])) <= 1e-15 and abs(float(p2[0])) <= 1e-15


def test_functionals_near_absorbing_edge_lose_mass():
    m = ou_case()
    p1, _ = density_functionals_ou(m, 0.0, 5.0, np.array([1.0]), np.array([1e9]))
    assert 0.0 < float(p1[0]) < 1.0


@pytest.mark.parametrize("x, u, b", [(100.0, 0.5, 80.0), (30.0, 0.2, 60.0), (70.0, 1.0, 120.0),
                                     (10.0, 0.9, 40.0)])
def test_functionals_vs_quadrature(x, u, b):
    m = ou_case()
    tr = build_transform(m)
    dens = lambda X: float(ou_density(m, 0.0, x, u, np.array([X]), tr)[0])
    r1 = quad(dens, 0.0, b, epsabs=1e-14, epsrel=1e-12, limit=400)[0]
    r2 = quad(lambda X: X * dens(X), 0.0, b, epsabs=1e-12, epsrel=1e-12, limit=400)[0]
    p1, p2 = density_functionals_ou(m, 0.0, x, np.array([u]), np.array([b]), tr)
    assert float(p1[0]) == pytest.approx(r1, abs=1e-8)
    assert float(p2[0]) == pytest.approx(r2, rel=1e-8, abs=1e-8)


@given(st.floats(0.0, 200.0), st.floats(0.01, 1.0), st.floats(0.0, 300.0))
def test_functionals_bounded(x, u, b):
    p1, p2 = density_functionals_ou(ou_case(), 0.0, x, np.array([u]), np.array([b]))
    assert -1e-15 <= float(p1[0]) <= 1.0 + 1e-12
    assert float(p2[0]) >= -1e-12
    assert float(p2[0]) <= b * float(p1[0]) + 1e-9


def test_functionals_domain():
    with pytest.raises(DomainError):
        density_functionals_ou(ou_case(), 0.5, 100.0, np.array([0.5]), np.array([80.0]))
    with pytest.raises(DomainError):
        density_functionals_ou(ou_case(), 0.0, -1.0, np.array([0.5]), np.array([80.0]))


def test_density_mass_quadrature_check():
    m = ou_case()
    assert quad_density_check(m, 0.0, 100.0, 0.5) == pytest.approx(1.0, abs=1e-6)
    assert quad_density_check(m, 0.0, 0.0, 0.5) == 0.0
    assert 0.0 < quad_density_check(m, 0.0, 5.0, 1.0) < 1.0


# --- American put ---------------------------------------------------------

def test_american_test_model_vs_fd():
    m, k, b, rep = solved("ou")
    assert np.all(b.converged)
    res = american_put_ou(m, 0.0, SPOTS, boundary=b, kernel=k)
    ref = richardson(m, FDGrid(M=800, Nt=400), 0.0, SPOTS, american=True, levels=2).extrapolated
    tol = np.maximum(0.002 * ref, 0.005 * K)
    assert np.all(np.abs(res.price - ref) <= tol)
    assert np.all(res.price >= res.european - 1e-8 * K)
    assert np.all(res.price >= np.maximum(K - SPOTS, 0.0) - 1e-8 * K)


def test_american_boundary_vs_fd_contact_edge():
    m, k, b, _ = solved("ou")
    fd = fd_american(m, FDGrid(M=1600, Nt=800), 0.0, np.array([K]))
    for t in (0.1, 0.3, 0.5, 0.7):
        kk = fd.time_index(t)
        up, _ = b.at(float(fd.times[kk]))
        hi = max(e[1] for e in fd.contact_edges(kk) if e[1] > 0.0)
        assert abs(up - hi) <= 2.0 * fd.cell


def test_american_without_reversion_dominates_european():
    m = ou(kappa=C(0.0), sigma=C(15.0))
    k = OUKernel.build(m)
    b = solve_boundary(k, config=SolverConfig(N=40))
    res = american_put_ou(m, 0.0, np.array([70.0, 90.0, 110.0]), boundary=b, kernel=k)
    assert np.all(res.eep >= -1e-8 * K)
    assert np.all(res.price >= res.european)


def empty_regime_case():
    # r_bar = r + kappa theta / K < 0 < q_bar: r_bar K - q_bar x < 0 for all x > 0
    return ou(r=C(0.01), theta=C(-20.0))


def test_american_in_empty_regime_is_european():
    m = empty_regime_case()
    k = OUKernel.build(m)
    b = solve_boundary(k, config=SolverConfig(N=40))
    assert np.all(b.state == EMPTY)
    xs = np.array([0.5, 50.0, 100.0])
    res = american_put_ou(m, 0.0, xs, boundary=b, kernel=k)
    assert np.array_equal(res.price, res.european)
    # the oracle finds no contact set either (the Dirichlet node at zero
    # equals the payoff at t = 0 by construction)
    fd = fd_american(m, FDGrid(M=800, Nt=400), 0.0, xs)
    for t in (0.0, 0.3, 0.6, 0.9):
        assert not [e for e in fd.contact_edges(fd.time_index(t)) if e[1] > 0.0]


def test_american_rejects_negative_short_rate():
    # the compounded strike paid at the barrier drops below K: exercise near
    # zero happens where H < 0, outside the premium decomposition
    m = ou(r=C(-0.01), theta=C(0.0))
    with pytest.raises(UnsupportedRegimeError):
        american_put_ou(m, 0.0, np.array([50.0]), kernel=OUKernel.build(m))


# --- static hedge ---------------------------------------------------------

def test_static_hedge_matches_direct_premium():
    m, k, b, _ = solved("ou")
    for x in (80.0, 100.0):
        static = static_hedge_eep(k, 0.0, x, b)
        direct = direct_eep(k, 0.0, x, b)
        assert static == pytest.approx(direct, abs=1e-4 * K)
        assert static > 0.0


def test_static_hedge_incremental_maturity():
    m, k, b, _ = solved("ou")
    full = static_hedge(k, 0.0, 80.0, b)
    for kk in (5, 57, b.u.size - 1):
        assert full.extend(kk) == pytest.approx(static_hedge(k, 0.0, 80.0, b, upto=kk).eep, abs=1e-10)


def test_static_hedge_empty_boundary():
    k = OUKernel.build(empty_regime_case())
    b = solve_boundary(k, config=SolverConfig(N=20))
    assert static_hedge_eep(k, 0.0, 80.0, b) == 0.0


def test_static_hedge_csv():
    m, k, b, _ = solved("ou")
    text = static_hedge(k, 0.0, 80.0, b).to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "u,X_star,P_CON,P_AON,slice_contribution"
    assert len(lines) == b.u.size + 1
    contrib = np.array([float(ln.split(",")[-1]) for ln in lines[1:]])
    assert contrib.sum() == pytest.approx(static_hedge_eep(k, 0.0, 80.0, b), abs=1e-10)
