"""Mean-reverting (OU / Hull-White-Schwartz) branch.

The underlying follows ``dX = kappa (theta - X) dt + sigma dW`` with an
absorbing barrier at zero, where the put pays the compounded strike
``F(0, t) K`` (``F(0, t) = exp(int_0^t r)``).  With

    gamma(t) = exp(int_T^t kappa),        alpha = -gamma,
    phi(t)   = 1/2 int_t^T sigma^2 gamma^2,
    y(t)     = int_t^T gamma (kappa theta - gamma sigma^2),
    beta(t)  = int_T^t [r - alpha/2 (2 kappa theta + alpha sigma^2)],

the substitution ``P = exp(beta + alpha x) (u + g)``, ``z = gamma x + y``,
``tau = phi`` turns the pricing equation into ``u_tau = u_zz + lambda(tau)``
on ``z > y(tau)`` with ``u = 0`` on the moving edge, ``g = exp(-beta) F K``
and ``lambda = -dg/dtau``.  Green's identity with the image kernel reflected
about the *current* edge gives the exact representation

    u(tau, z) = int K(z, xi; tau, 0) u0(xi) dxi
                - int_0^tau K(z, y(s); tau, s) Psi(s) ds
                + int_0^tau lambda(s) int_{y(s)}^inf K(z, xi; tau, s) dxi ds,

where ``Psi = u_z`` on the edge solves a linear Volterra equation of the
second kind.  All pieces are evaluated in log space: the tilt
``exp(beta - gamma x)`` and the Gaussian factors are combined before
exponentiation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtr

from ._numerics import CumulativeIntegral, gauss_legendre
from .curves import ModelSpec
from .errors import DomainError, GridError, UnsupportedRegimeError
from .gbm import U_GUARD, PricingResult, american_put, boundary_from, eep_integrand, endpoint_limit
from .gbm import trapezoid_weights

SQRT_PI = math.sqrt(math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# quadrature in the scaled variable v of t' = t + (m - t) v^2 (and mirrored
# near T): geometric panels resolve kernels that peak at v ~ x / (sigma sqrt T)
_V_BREAKS = np.array([0.0, 1e-3, 1e-2, 0.04, 0.1, 0.2, 0.35, 0.55, 0.78, 1.0])
_GL_ORDER = 12


def _require_ou(model: ModelSpec):
    if model.kind != "ou":
        raise DomainError("OU model required")


def effective_rates(model: ModelSpec, u):
    """``(r_bar, q_bar)`` with ``r_bar = r + kappa theta / K`` and ``q_bar = r + kappa``."""
    _require_ou(model)
    r = np.asarray(model.r(u), dtype=float)
    k = np.asarray(model.kappa(u), dtype=float)
    return r + k * np.asarray(model.theta(u), dtype=float) / model.K, r + k


def log_ndtr_diff(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a <= b``, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    right = a > 0.0
    hi = np.where(right, log_ndtr(-a), log_ndtr(b))
    lo = np.where(right, log_ndtr(-b), log_ndtr(a))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = np.exp(lo - hi)
        out = hi + np.log1p(-np.minimum(d, 1.0))
    return np.where(b > a, out, -np.inf)


# ---------------------------------------------------------------------------
# heat transform


@dataclass(frozen=True)
class HeatTransform:
    """Time functions of the heat-equation reduction for an OU model.

    ``constants`` are the integration constants ``C1..C5`` (scale of gamma,
    slope of the tilt alpha, and the offsets of phi, y, beta at maturity).
    """

    model: ModelSpec
    constants: tuple = (1.0, -1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        _require_ou(self.model)
        t_lo = min(0.0, self.model.t0)
        m, T = self.model, self.model.T
        probe = np.linspace(t_lo, T, 129)
        vals = [m.kappa(probe), m.theta(probe), m.sigma(probe), m.r(probe)]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise DomainError("OU coefficients must be finite on [0, T]")
        object.__setattr__(self, "_lo", t_lo)

    # -- elementary functions ----------------------------------------------
    def gamma(self, t):
        return np.exp(-self.model.kappa.integrate(t, self.model.T))

    def alpha(self, t):
        return -self.gamma(t)

    def _sig2g2(self, s):
        g = self.gamma(s)
        return self.model.sigma(s) ** 2 * g * g

    def _kthg(self, s):
        return self.model.kappa(s) * self.model.theta(s) * self.gamma(s)

    def _beta_rate(self, s):
        # d beta / dt = r + gamma kappa theta - gamma^2 sigma^2 / 2
        return self.model.r(s) + self._kthg(s) - 0.5 * self._sig2g2(s)

    @cached_property
    def _int_sig2g2(self):
        return CumulativeIntegral(self._sig2g2, self._lo, self.model.T, anchor=self.model.T)

    @cached_property
    def _int_kthg(self):
        return CumulativeIntegral(self._kthg, self._lo, self.model.T, anchor=self.model.T)

    @cached_property
    def _int_beta(self):
        return CumulativeIntegral(self._beta_rate, self._lo, self.model.T, anchor=self.model.T)

    def phi(self, t):
        return -0.5 * np.asarray(self._int_sig2g2(t))

    def kth_int(self, t):
        """``int_t^T kappa theta gamma``."""
        return -np.asarray(self._int_kthg(t))

    def y(self, t):
        return self.kth_int(t) - 2.0 * self.phi(t)

    def beta(self, t):
        return np.asarray(self._int_beta(t))

    def dphi_dt(self, t):
        return -0.5 * self._sig2g2(t)

    def dy_dtau(self, t):
        """``dy/dtau = 2 (kappa theta - gamma sigma^2) / (sigma^2 gamma)``."""
        g = self.gamma(t)
        s2 = self.model.sigma(t) ** 2
        return 2.0 * (self.model.kappa(t) * self.model.theta(t) - g * s2) / (s2 * g)

    def forward_factor(self, t):
        """``F(0, t) = 1 / D(0, t)``."""
        return np.exp(self.model.r.integrate(0.0, t))

    @cached_property
    def table(self) -> "TransformTable":
        return TransformTable(self)

    # -- coordinates ---------------------------------------------------------
    def to_heat(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        return self.phi(t), self.gamma(t) * x + self.y(t)

    def t_of_tau(self, tau: float) -> float:
        T = self.model.T
        if tau < 0.0:
            raise DomainError("tau must be non-negative")
        if tau == 0.0:
            return T
        top = float(self.phi(self._lo))
        if tau > top * (1 + 1e-15):
            raise DomainError("tau beyond the transform range")
        return brentq(lambda s: float(self.phi(s)) - tau, self._lo, T, xtol=1e-15, rtol=4.0 * np.finfo(float).eps,
                      maxiter=200)

    def from_heat(self, tau, z):
        tau_a = np.atleast_1d(np.asarray(tau, dtype=float))
        t = np.array([self.t_of_tau(float(v)) for v in tau_a.ravel()]).reshape(tau_a.shape)
        x = (np.asarray(z, dtype=float) - self.y(t)) / self.gamma(t)
        if np.ndim(tau) == 0 and np.ndim(z) == 0:
            return float(t[0]), float(np.ravel(x)[0])
        return t, x


class TransformTable:
    """Cubic-spline tabulation of ``phi``, ``y`` and ``beta`` for fast
    evaluation at many quadrature points (interpolation error ~1e-14)."""

    def __init__(self, tr: HeatTransform, n: int = 4096):
        ts = np.linspace(tr._lo, tr.model.T, n + 1)
        self.phi = CubicSpline(ts, tr.phi(ts))
        self.y = CubicSpline(ts, tr.y(ts))
        self.beta = CubicSpline(ts, tr.beta(ts))


def build_transform(model: ModelSpec) -> HeatTransform:
    return HeatTransform(model)


def greens_heat(z, xi, tau, y_tau):
    """Image Green's function of ``u_tau = u_zz`` on ``z > y_tau`` (absorbing)."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0.0):
        raise DomainError("tau must be positive")
    z = np.asarray(z, dtype=float)
    xi = np.asarray(xi, dtype=float)
    c = 1.0 / (2.0 * np.sqrt(np.pi * tau))
    a = (z - xi) ** 2 / (4.0 * tau)
    b = (z + xi - 2.0 * y_tau) ** 2 / (4.0 * tau)
    # exp(-a) - exp(-b) without cancellation when a ~ b
    out = c * np.exp(-a) * -np.expm1(a - b)
    return out if out.ndim else float(out)


def _gamma_heat(w, dtau):
    return np.exp(-w * w / (4.0 * dtau)) / (2.0 * np.sqrt(np.pi * dtau))


# ---------------------------------------------------------------------------
# graded quadrature on (t, T)


def _v_rule():
    gx, gw = gauss_legendre(_GL_ORDER)
    a, b = _V_BREAKS[:-1, None], _V_BREAKS[1:, None]
    v = (0.5 * (a + b) + 0.5 * (b - a) * gx).ravel()
    w = (0.5 * (b - a) * gw).ravel()
    return v, w


_V, _VW = _v_rule()
_SPLIT_GRID = np.linspace(0.0, 1.0, 41) ** 2
# both-ends graded rule on [0, 1]
_U = np.concatenate([0.5 * _V ** 2, (1.0 - 0.5 * _V ** 2)[::-1]])
_UW = np.concatenate([_V * _VW, (_V * _VW)[::-1]])


def graded_nodes(t: float, T: float, both_ends: bool = True):
    """Nodes and weights for ``int_t^T f dt'`` graded toward ``t`` (and ``T``)."""
    if both_ends:
        m = 0.5 * (t + T)
        n1 = t + (m - t) * _V ** 2
        w1 = 2.0 * (m - t) * _V * _VW
        n2 = T - (T - m) * _V ** 2
        w2 = 2.0 * (T - m) * _V * _VW
        return np.concatenate([n1, n2[::-1]]), np.concatenate([w1, w2[::-1]])
    return t + (T - t) * _V ** 2, 2.0 * (T - t) * _V * _VW


# ---------------------------------------------------------------------------
# gradient at the moving edge


@dataclass(frozen=True)
class GradientProfile:
    """Edge gradient on a grid graded toward maturity.

    The physical gradient is ``Psi = exp(-beta) * (A / sqrt(tau) + reg)``: the
    ``1/sqrt(tau)`` part comes from the jump between the payoff at zero and
    the compounded strike, and ``reg`` is bounded.
    """

    t: np.ndarray  # descending from T
    tau: np.ndarray  # ascending from 0
    reg: np.ndarray
    A: float
    residual: float

    def scaled(self, tau) -> np.ndarray:
        """``exp(beta) Psi`` at ``tau > 0``."""
        tau = np.asarray(tau, dtype=float)
        return self.A / np.sqrt(tau) + np.interp(tau, self.tau, self.reg)


def _free_term(tr: HeatTransform, t_i: float, g0: float) -> float:
    """``exp(beta) f`` at the node ``t_i`` (initial data and source parts)."""
    m = tr.model
    K, T = m.K, m.T
    tau = float(tr.phi(t_i))
    y = float(tr.y(t_i))
    beta = float(tr.beta(t_i))
    s = math.sqrt(2.0 * tau)
    D = math.exp(-m.r.integrate(t_i, T))
    # exp(xi) (K - xi)^+ part: w = xi - y ~ N(2 tau, 2 tau) truncated to (-y, K - y)
    mu = 2.0 * tau
    lo, hi = -y, K - y
    a, b = (lo - mu) / s, (hi - mu) / s
    Z = float(ndtr(b) - ndtr(a))
    pa = math.exp(-0.5 * a * a - LOG_SQRT_2PI)
    pb = math.exp(-0.5 * b * b - LOG_SQRT_2PI)
    W1 = mu * Z + s * (pa - pb)
    W2 = (mu * mu + s * s) * Z + s * ((mu + lo) * pa - (mu + hi) * pb)
    f_e = D / tau * ((K - y) * W1 - W2)
    f_g0 = -g0 * math.exp(beta - y * y / (4.0 * tau)) / math.sqrt(math.pi * tau)
    # source part: int_t^T exp(beta) g'(t') 2 Gamma(y - y', tau - tau') dt'
    tp, wp = graded_nodes(t_i, T, both_ends=False)
    dtau = tau - tr.phi(tp)
    ok = dtau > 0.0
    tp, wp, dtau = tp[ok], wp[ok], dtau[ok]
    gam = tr.gamma(tp)
    lam = m.kappa(tp) * m.theta(tp) * 2.0 - gam * m.sigma(tp) ** 2
    d = y - tr.y(tp)
    expo = beta - tr.beta(tp) - d * d / (4.0 * dtau) + m.r.integrate(0.0, tp)
    f_l = float(np.sum(wp * -0.5 * K * gam * lam * np.exp(expo) / np.sqrt(np.pi * dtau)))
    return f_e + f_g0 + f_l


def _hat_weights_inv_sqrt(taus: np.ndarray, i: int) -> np.ndarray:
    """``int hat_j(s) (tau_i - s)^(-1/2) ds`` over ``[0, tau_i]`` for j <= i."""
    ti = taus[i]
    a, b = taus[:i], taus[1:i + 1]
    ra, rb = np.sqrt(ti - a), np.sqrt(np.maximum(ti - b, 0.0))
    I0 = 2.0 * (ra - rb)
    I1 = ti * I0 - (2.0 / 3.0) * (ra ** 3 - rb ** 3)
    h = b - a
    w = np.zeros(i + 1)
    w[:-1] += (b * I0 - I1) / h
    w[1:] += (I1 - a * I0) / h
    return w


def _hat_weights_arcsine(taus: np.ndarray, i: int) -> np.ndarray:
    """``int hat_j(s) s^(-1/2) (tau_i - s)^(-1/2) ds`` over ``[0, tau_i]``."""
    ti = taus[i]
    a, b = taus[:i], taus[1:i + 1]
    th_a = np.arcsin(np.sqrt(np.clip(a / ti, 0.0, 1.0)))
    th_b = np.arcsin(np.sqrt(np.clip(b / ti, 0.0, 1.0)))
    J0 = 2.0 * (th_b - th_a)
    J1 = ti * ((th_b - np.sin(th_b) * np.cos(th_b)) - (th_a - np.sin(th_a) * np.cos(th_a)))
    h = b - a
    w = np.zeros(i + 1)
    w[:-1] += (b * J0 - J1) / h
    w[1:] += (J1 - a * J0) / h
    return w


def gradient_grid(tr: HeatTransform, t_lo: float, n: int, grading: float = 2.0,
                  drift_resolution: float = 0.1, n_max: int = 8000) -> np.ndarray:
    """Times (descending from ``T``) for the edge-gradient equation.

    ``n`` nodes are graded toward maturity as ``T - (T - t_lo) s^grading``.
    Where the edge drifts fast in heat time the kernel narrows to a width
    ``~ 1 / (dy/dtau)``, so extra nodes are added with density
    ``(dy/dtau)^2 / drift_resolution`` per unit ``tau`` wherever that exceeds
    the graded density; the total is capped at ``n_max``.
    """
    T = tr.model.T
    s = np.linspace(0.0, 1.0, 4097)
    t = T - (T - t_lo) * s ** grading
    taus = tr.phi(t)
    drift = tr.dy_dtau(t) ** 2 * np.abs(np.gradient(taus, s)) / drift_resolution
    dens = np.maximum(n, drift)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
    total = int(min(max(math.ceil(cum[-1]), n), n_max))
    s_nodes = np.interp(np.linspace(0.0, cum[-1], total + 1), cum, s)
    s_nodes[0], s_nodes[-1] = 0.0, 1.0
    return T - (T - t_lo) * s_nodes ** grading


def solve_gradient(model: ModelSpec, transform: Optional[HeatTransform] = None,
                   n: int = 320, t_lo: Optional[float] = None, grading: float = 2.0,
                   drift_resolution: float = 0.1) -> GradientProfile:
    """Edge gradient by product integration and forward substitution.

    The kernel ``(y(s) - y(tau)) / (tau - s) Gamma(y(tau) - y(s), tau - s)``
    is ``m(tau, s) / sqrt(tau - s)`` with ``m`` smooth; ``m * Psi`` is taken
    piecewise linear and integrated exactly against the square-root weight.
    The known ``A / sqrt(s)`` singularity is subtracted first, its integral
    taken against the arcsine weight.
    """
    _require_ou(model)
    tr = transform or build_transform(model)
    if n < 4:
        raise GridError("gradient grid needs at least 4 intervals")
    T, K = model.T, model.K
    t_lo = model.t0 if t_lo is None else t_lo
    t = gradient_grid(tr, t_lo, n, grading, drift_resolution)
    n = t.size - 1
    taus = tr.phi(t)
    if np.any(np.diff(taus) <= 0.0):
        raise GridError("gradient grid is degenerate in tau")
    ys, betas = tr.y(t), tr.beta(t)
    g0 = float(tr.forward_factor(T)) * K
    A = (K - g0) / SQRT_PI
    diag = -tr.dy_dtau(t) / (2.0 * SQRT_PI)

    def m_row(i):
        dt = taus[i] - taus[:i]
        d = ys[i] - ys[:i]
        row = np.empty(i + 1)
        row[:i] = -d / dt * np.exp(betas[i] - betas[:i] - d * d / (4.0 * dt)) / (2.0 * SQRT_PI)
        row[i] = diag[i]
        return row

    reg = np.zeros(n + 1)
    rhs = np.zeros(n + 1)
    res = 0.0
    # limit at tau = 0: slope of the initial data plus the arcsine integral
    # of the singular part against the diagonal kernel value
    reg[0] = (K - 1.0) - A * math.pi * diag[0]
    rhs[0] = reg[0]
    for i in range(1, n + 1):
        mi = m_row(i)
        w = _hat_weights_inv_sqrt(taus, i) * mi
        sing = A * float(_hat_weights_arcsine(taus, i) @ mi)
        rhs[i] = _free_term(tr, float(t[i]), g0) - A / math.sqrt(taus[i]) - sing
        piv = 1.0 + w[i]
        if abs(piv) < 1e-12:
            raise GridError("singular diagonal weight in the gradient equation")
        reg[i] = (rhs[i] - w[:i] @ reg[:i]) / piv
        r = reg[i] + w @ reg[:i + 1] - rhs[i]
        res = max(res, abs(r) / max(1.0, abs(rhs[i])))
    return GradientProfile(t=t, tau=taus, reg=reg, A=A, residual=res)


# ---------------------------------------------------------------------------
# European put


def _trunc_put_mean(mu, s, K):
    """``E[(K - xi); 0 < xi < K]`` for ``xi ~ N(mu, s^2)``."""
    a = (0.0 - mu) / s
    b = (K - mu) / s
    pa = np.exp(-0.5 * a * a - LOG_SQRT_2PI)
    pb = np.exp(-0.5 * b * b - LOG_SQRT_2PI)
    return (K - mu) * (ndtr(b) - ndtr(a)) + s * (pb - pa)


class OUEuropean:
    """European put pricer; per-``t`` quadrature data is cached."""

    def __init__(self, model: ModelSpec, transform: HeatTransform, profile: GradientProfile):
        self.model = model
        self.tr = transform
        self.profile = profile
        self.g0 = float(transform.forward_factor(model.T)) * model.K
        self._cache: dict = {}

    def _slice(self, t: float):
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        m, tr, T = self.model, self.tr, self.model.T
        tp, wp = graded_nodes(t, T)
        tau = float(tr.phi(t))
        dtau = tau - tr.phi(tp)
        ok = dtau > 0.0
        tp, wp, dtau = tp[ok], wp[ok], dtau[ok]
        gam_p = tr.gamma(tp)
        tau_p = tr.phi(tp)
        data = dict(
            t=t, tau=tau, gamma=float(tr.gamma(t)), y=float(tr.y(t)), beta=float(tr.beta(t)),
            D=math.exp(-m.r.integrate(t, T)), F=float(tr.forward_factor(t)),
            wp=wp, dtau=dtau, yp=tr.y(tp),
            # exp(beta_t - beta') * edge gradient (scaled) * |dphi/dt'|
            log_psi_w=float(tr.beta(t)) - tr.beta(tp) + np.log(0.5 * m.sigma(tp) ** 2 * gam_p ** 2),
            psi=self.profile.scaled(np.maximum(tau_p, 1e-300)),
        )
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[t] = data
        return data

    def __call__(self, t: float, x):
        m = self.model
        K, T = m.K, m.T
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0.0):
            raise DomainError("OU spot must be non-negative (absorbing at zero)")
        if t > T or t < self.profile.t[-1] - 1e-12:
            raise DomainError("t outside the pricing range")
        if T - t <= U_GUARD:
            out = np.where(xa > 0.0, np.maximum(K - xa, 0.0), float(self.tr.forward_factor(T)) * K)
            return out if out.ndim else float(out)
        d = self._slice(float(t))
        xs = np.atleast_1d(xa).ravel()
        out = self._price(d, xs).reshape(np.shape(xa))
        out = np.where(xa == 0.0, d["F"] * K, out)
        return out if out.ndim else float(out)

    def _price(self, d, x):
        K = self.model.K
        gx = d["gamma"] * x
        tau, y, beta = d["tau"], d["y"], d["beta"]
        s2 = math.sqrt(2.0 * tau)
        # initial data: D [Q(gamma x + y + 2 tau) - exp(-2 gamma x) Q(y - gamma x + 2 tau)]
        ic = d["D"] * (_trunc_put_mean(gx + y + 2.0 * tau, s2, K)
                       - np.exp(-2.0 * gx) * _trunc_put_mean(y - gx + 2.0 * tau, s2, K))
        strike = self._strike_part(d, x)
        X = x[:, None]
        gxx = d["gamma"] * X
        dd = y - d["yp"][None, :]
        # edge-gradient term: kernel K(z, y'; tau, tau') with both images
        dt4 = 4.0 * d["dtau"][None, :]
        e1 = -(gxx + dd) ** 2 / dt4
        e2 = -(gxx - dd) ** 2 / dt4
        hi = np.maximum(e1, e2)
        # tilt and Gaussian combined in one exponent
        amp = np.exp(hi + d["log_psi_w"][None, :] - gxx)
        kern = amp * -np.expm1(np.minimum(e1, e2) - hi) * np.sign(e1 - e2) / np.sqrt(np.pi * dt4)
        edge = (kern * d["psi"][None, :]) @ d["wp"]
        return ic + strike - edge

    def _survival(self, d, gx, tp):
        """``J = int_{y(t')}^inf K(z, xi; tau, tau') dxi`` and ``log(1 - J)``."""
        tab = self.tr.table
        dd = d["y"] - tab.y(tp)
        sq = np.sqrt(2.0 * np.maximum(d["tau"] - tab.phi(tp), 1e-300))
        a, b = (gx + dd) / sq, (dd - gx) / sq
        log_j = log_ndtr_diff(b, a)
        log_1mj = np.logaddexp(log_ndtr(-a), log_ndtr(b))
        return log_j, log_1mj

    def _strike_part(self, d, x):
        """``exp(beta - gamma x) (g(t) + int g' J - g0 J(T))``.

        The amplitude ``exp(beta(t) - beta(t'))`` can be astronomically large,
        so the source integral is split at the time ``t_c`` where ``J``
        crosses 1/2: before it the integrand is written with ``1 - J`` (and the
        exact integral of ``g'`` moved into ``g(t_c)``), after it with ``J``.
        Every piece is then of the order of the price.
        """
        m, tr = self.model, self.tr
        tab = tr.table
        t, T, K = d["t"], m.T, m.K
        gx = d["gamma"] * x
        log_jT, _ = self._survival(d, gx, np.full_like(x, T))
        # the split is exact for any t_c, so locating the crossing on a coarse
        # grid (graded toward t, where it sits for small x) is enough
        probe = t + (T - t) * _SPLIT_GRID
        lj, _ = self._survival(d, gx[:, None], probe[None, :])
        below = np.exp(lj) < 0.5
        first = np.argmax(below, axis=1)
        tc = np.where(below.any(axis=1), probe[first], T)
        tc = np.where(x > 0.0, tc, t)
        beta_t = d["beta"]
        log_gtc = beta_t - tab.beta(tc) + m.r.integrate(0.0, tc) + math.log(K) - gx
        out = np.exp(log_gtc) - np.exp(beta_t + math.log(self.g0) - gx + log_jT)
        G = gx[:, None]
        for a, b, use_j in ((np.full_like(x, t), tc, False), (tc, np.full_like(x, T), True)):
            span = (b - a)[:, None]
            tp = a[:, None] + span * _U
            w = span * _UW
            gam = tr.gamma(tp)
            src = 2.0 * m.kappa(tp) * m.theta(tp) - gam * m.sigma(tp) ** 2
            log_amp = (beta_t - tab.beta(tp) + m.r.integrate(0.0, tp)
                       + np.log(0.5 * K * gam * np.abs(src) + 1e-300) - G)
            log_j, log_1mj = self._survival(d, G, tp)
            if use_j:
                out = out - np.sum(w * np.sign(src) * np.exp(log_amp + log_j), axis=1)
            else:
                out = out + np.sum(w * np.sign(src) * np.exp(log_amp + log_1mj), axis=1)
        return out


# ---------------------------------------------------------------------------
# transition density with absorption at zero (x-space)


def ou_moments(model: ModelSpec, t: float, u: float, x, transform: Optional[HeatTransform] = None):
    """Mean and variance of ``X_u`` given ``X_t = x`` without absorption, and
    ``A = int_t^u kappa theta gamma``."""
    tr = transform or build_transform(model)
    gt, gu = tr.gamma(t), tr.gamma(u)
    A = tr.kth_int(t) - tr.kth_int(u)
    dtau = tr.phi(t) - tr.phi(u)
    mean = (gt * np.asarray(x, dtype=float) + A) / gu
    var = 2.0 * dtau / gu ** 2
    return mean, float(var), float(A)


def ou_density(model: ModelSpec, t: float, x: float, u: float, X, transform=None):
    """Density of ``X_u`` on ``X > 0`` killed at zero (image about the
    straight-line edge in the variance clock; exact when the edge drift is
    constant in that clock)."""
    tr = transform or build_transform(model)
    X = np.asarray(X, dtype=float)
    if x <= 0.0:
        return np.zeros_like(X)
    gt, gu = float(tr.gamma(t)), float(tr.gamma(u))
    A = float(tr.kth_int(t) - tr.kth_int(u))
    dtau = float(tr.phi(t) - tr.phi(u))
    v = 2.0 * dtau / gu ** 2
    mean = (gt * x + A) / gu
    mean_img = (A - gt * x) / gu
    c = A * gt * x / dtau
    q1 = -(X - mean) ** 2 / (2 * v)
    q2 = -c - (X - mean_img) ** 2 / (2 * v)
    hi = np.maximum(q1, q2)
    dens = np.exp(hi) * -np.expm1(np.minimum(q1, q2) - hi) * np.sign(q1 - q2)
    return np.where(X > 0.0, dens / math.sqrt(2 * math.pi * v), 0.0)


class OUSlice:
    """Density functionals from ``t`` to the times ``u`` (same interface as
    :class:`floatbound.gbm.GBMSlice`)."""

    def __init__(self, model: ModelSpec, tr: HeatTransform, t: float, u):
        u = np.asarray(u, dtype=float)
        self.u = u
        self.D = np.exp(-model.r.integrate(t, u))
        self.r_eff, self.q_eff = effective_rates(model, u)
        self.at_t = u - t <= U_GUARD
        gt = float(tr.gamma(t))
        gu = tr.gamma(u)
        A = tr.kth_int(t) - tr.kth_int(u)
        dtau = np.maximum(tr.phi(t) - tr.phi(u), 1e-300)
        self._gt, self._gu, self._A, self._dtau = gt, gu, A, dtau
        self._s = np.sqrt(2.0 * dtau) / gu

    def _parts(self, x):
        gx = self._gt * x
        m1 = (gx + self._A) / self._gu
        m2 = (self._A - gx) / self._gu
        c = self._A * gx / self._dtau
        return m1, m2, c

    def functionals(self, x, b):
        x = np.asarray(x, dtype=float)
        b = np.asarray(b, dtype=float)
        present = np.isfinite(b) & (b > 0.0)
        bb = np.where(present, b, 1.0)
        m1, m2, c = self._parts(x)
        s = self._s
        a1, a2 = _band_moments(m1, m2, c, s, bb)
        a1 = np.where(present & (x > 0.0), a1, 0.0)
        a2 = np.where(present & (x > 0.0), a2, 0.0)
        return endpoint_limit(self.at_t, x, b, present, a1, a2)

    def mean(self, x):
        x = np.asarray(x, dtype=float)
        m1, m2, c = self._parts(x)
        _, a2 = _band_moments(m1, m2, c, self._s, np.inf)
        return np.where(x > 0.0, a2, 0.0)


def _band_moments(m1, m2, c, s, b):
    """``int_0^b p`` and ``int_0^b X p`` for the image density."""
    lo1, hi1 = -m1 / s, (b - m1) / s
    lo2, hi2 = -m2 / s, (b - m2) / s
    l1 = log_ndtr_diff(lo1, hi1)
    l2 = -c + log_ndtr_diff(lo2, hi2)
    with np.errstate(over="ignore", invalid="ignore"):
        p0 = np.exp(l1) - np.exp(l2)
        # Gaussian edge terms: s (phi(lo) - phi(hi)) for each image
        e_lo1 = -0.5 * lo1 ** 2 - LOG_SQRT_2PI
        e_hi1 = -0.5 * hi1 ** 2 - LOG_SQRT_2PI
        e_lo2 = -c - 0.5 * lo2 ** 2 - LOG_SQRT_2PI
        e_hi2 = -c - 0.5 * hi2 ** 2 - LOG_SQRT_2PI
        p1 = (m1 * np.exp(l1) + s * (np.exp(e_lo1) - np.exp(e_hi1))
              - m2 * np.exp(l2) - s * (np.exp(e_lo2) - np.exp(e_hi2)))
    return p0, p1


def density_functionals_ou(model: ModelSpec, t: float, x, u, b, transform=None):
    """``(int_0^b psi dX, int_0^b X psi dX)`` for the killed OU density."""
    if not t < np.min(u) or np.max(u) > model.T + 1e-12:
        raise DomainError("need t < u <= T")
    if np.any(np.asarray(x) < 0.0):
        raise DomainError("OU spot must be non-negative")
    tr = transform or build_transform(model)
    return OUSlice(model, tr, t, u).functionals(x, b)


# ---------------------------------------------------------------------------
# kernel for the boundary solver


@dataclass(frozen=True)
class OUKernel:
    model: ModelSpec
    transform: HeatTransform
    profile: GradientProfile
    pricer: OUEuropean = field(repr=False, compare=False)

    @classmethod
    def build(cls, model: ModelSpec, n_gradient: int = 320) -> "OUKernel":
        _require_ou(model)
        tr = build_transform(model)
        prof = solve_gradient(model, tr, n=n_gradient)
        return cls(model, tr, prof, OUEuropean(model, tr, prof))

    @property
    def K(self) -> float:
        return self.model.K

    @property
    def T(self) -> float:
        return self.model.T

    @property
    def t0(self) -> float:
        return self.model.t0

    def rates(self, u):
        return effective_rates(self.model, u)

    def european(self, t: float, x):
        return self.pricer(t, x)

    def european_call(self, t, x):
        raise UnsupportedRegimeError("calls are not implemented for the OU model")

    def prepare(self, t: float, u) -> OUSlice:
        return OUSlice(self.model, self.transform, t, u)

    def check_american(self):
        """The premium decomposition needs ``F(0, t) K >= K`` at the barrier.

        With a negative short rate the compounded strike paid on absorption
        falls below the intrinsic value ``K``, exercise just above zero
        becomes optimal where ``H < 0``, and the premium is no longer the
        integral of ``H`` over the exercise set.
        """
        m = self.model
        ts = np.linspace(m.t0, m.T, 257)
        if np.any(m.r(ts) < 0.0):
            raise UnsupportedRegimeError("American OU pricing requires r(t) >= 0")

    def edge_slope(self, t):
        """``dP_E/dx`` at ``x = 0`` implied by the edge gradient."""
        tr = self.transform
        tau = tr.phi(t)
        return tr.gamma(t) * (self.profile.scaled(tau) - tr.forward_factor(t) * self.K)


def european_put_ou(model: ModelSpec, t: float, x, kernel: Optional[OUKernel] = None):
    kernel = kernel or OUKernel.build(model)
    return kernel.european(t, x)


def american_put_ou(model: ModelSpec, t: float, x, boundary=None, config=None,
                    kernel: Optional[OUKernel] = None) -> PricingResult:
    """American put under the OU model: the boundary is solved (if not
    given) with the killed-density functionals and effective rates."""
    from .solver import solve_boundary

    kernel = kernel or OUKernel.build(model)
    kernel.check_american()
    if boundary is None:
        boundary = solve_boundary(kernel, config=config)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    return american_put(kernel, t, xs, boundary)


# ---------------------------------------------------------------------------
# static hedge


@dataclass
class StaticHedge:
    """Digital decomposition of the premium on the boundary grid.

    ``p_con`` is the cash (``K``) digital and ``p_aon`` the asset digital over
    the exercise band at each node (undiscounted); ``integrand`` is
    ``D (r_bar p_con - q_bar p_aon)``; ``panel[k]`` is the trapezoid
    contribution of ``[u_k, u_{k+1}]`` and ``cumulative[k]`` the premium up to
    ``u_k``.
    """

    u: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    p_con: np.ndarray
    p_aon: np.ndarray
    integrand: np.ndarray
    panel: np.ndarray
    cumulative: np.ndarray

    @property
    def eep(self) -> float:
        return float(self.cumulative[-1])

    def extend(self, k: int) -> float:
        """Premium through ``u_{k}`` from the premium through ``u_{k-1}``."""
        return float(self.cumulative[k - 1] + self.panel[k - 1])

    def slice_contribution(self) -> np.ndarray:
        return trapezoid_weights(self.u) * self.integrand

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["u", "X_star", "P_CON", "P_AON", "slice_contribution"])
        contrib = self.slice_contribution()
        for row in zip(self.u, self.upper, self.p_con, self.p_aon, contrib):
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()


def _digital_quadrature(model, tr, t, x, u, lo, hi):
    """Cash and asset digitals over ``(lo, hi)`` by Gauss-Legendre on the
    density (independent of the closed-form functionals)."""
    if not hi > lo:
        return 0.0, 0.0
    mean, var, _ = ou_moments(model, t, u, x, tr)
    sd = math.sqrt(var)
    a = max(lo, float(mean) - 14.0 * sd)
    b = min(hi, float(mean) + 14.0 * sd)
    if not b > a:
        return 0.0, 0.0
    panels = int(min(400, max(4, math.ceil((b - a) / (0.25 * sd)))))
    gx, gw = gauss_legendre(16)
    edges = np.linspace(a, b, panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])[:, None]
    half = 0.5 * (edges[1:] - edges[:-1])[:, None]
    X = (mid + half * gx).ravel()
    W = (half * gw).ravel()
    dens = ou_density(model, t, x, u, X, tr)
    return float(W @ dens), float(W @ (X * dens))


def static_hedge(model_or_kernel, t: float, x: float, boundary,
                 upto: Optional[int] = None) -> StaticHedge:
    """Digital decomposition of the premium; ``upto`` truncates the horizon
    after that boundary node (a shorter-maturity hedge on the same nodes)."""
    kernel = model_or_kernel if isinstance(model_or_kernel, OUKernel) else OUKernel.build(model_or_kernel)
    model, tr = kernel.model, kernel.transform
    if x <= 0.0:
        raise DomainError("spot must be positive")
    nodes, up, lo = boundary_from(boundary, t)
    if upto is not None:
        nodes, up, lo = nodes[:upto + 1], up[:upto + 1], lo[:upto + 1]
    K = model.K
    n = nodes.size
    p_con = np.zeros(n)
    p_aon = np.zeros(n)
    for k, u in enumerate(nodes):
        hi_k = up[k] if np.isfinite(up[k]) else 0.0
        lo_k = lo[k] if np.isfinite(lo[k]) and lo[k] > 0.0 else 0.0
        if not hi_k > lo_k:
            continue
        if u - t <= U_GUARD:
            inside = lo_k < x < hi_k
            edge = 0.5 if x in (lo_k, hi_k) else 0.0
            wgt = 1.0 if inside else edge
            p_con[k], p_aon[k] = K * wgt, x * wgt
            continue
        c, a = _digital_quadrature(model, tr, t, x, float(u), lo_k, hi_k)
        p_con[k], p_aon[k] = K * c, a
    D = np.exp(-model.r.integrate(t, nodes))
    r_bar, q_bar = effective_rates(model, nodes)
    integrand = D * (r_bar * p_con - q_bar * p_aon)
    panel = 0.5 * np.diff(nodes) * (integrand[:-1] + integrand[1:])
    cumulative = np.concatenate([[0.0], np.cumsum(panel)])
    return StaticHedge(nodes, up, lo, p_con, p_aon, integrand, panel, cumulative)


def static_hedge_eep(model_or_kernel, t: float, x: float, boundary) -> float:
    return static_hedge(model_or_kernel, t, x, boundary).eep


def direct_eep(kernel, t: float, x: float, boundary, upto: Optional[int] = None) -> float:
    """Premium assembled from the closed-form functionals, optionally
    truncated after node ``upto``."""
    nodes, up, lo = boundary_from(boundary, t)
    if upto is not None:
        nodes, up, lo = nodes[:upto + 1], up[:upto + 1], lo[:upto + 1]
    if nodes.size < 2:
        return 0.0
    vals = eep_integrand(kernel, t, np.array([x]), nodes, up, lo)
    return float(vals[0] @ trapezoid_weights(nodes))
