"""Closed-form kernels for the time-dependent Black-Scholes (GBM) model and
price assembly from solved exercise boundaries.

The assembly routines (:func:`eep_pi`, :func:`american_put`) work with any
*kernel* exposing ``european``, ``prepare`` and ``K``/``T``; the GBM kernel
lives here and the OU kernel in :mod:`floatbound.ou`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._numerics import norm_cdf
from .curves import ModelSpec
from .errors import ConsistencyError, DomainError, GridError, UnsupportedRegimeError

# smallest time gap used inside d+-; Phi saturates to a step there
U_GUARD = 1e-12


def _moments(model: ModelSpec, t, u):
    """Integrated drift r - q, variance and discount factors over [t, u]."""
    u = np.maximum(np.asarray(u, dtype=float), np.asarray(t, dtype=float) + U_GUARD)
    int_r = model.r.integrate(t, u)
    int_q = model.q.integrate(t, u)
    var = model.sigma.integrate_sq(t, u)
    return int_r, int_q, var


def d_pm(model: ModelSpec, x, y, t, u, sign: int):
    """``d_+`` (sign=+1) or ``d_-`` (sign=-1) for spot ``x`` and level ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise DomainError("d+- needs x > 0 and y > 0")
    if np.any(np.asarray(t) >= np.asarray(u)):
        raise DomainError("d+- needs t < u")
    int_r, int_q, var = _moments(model, t, u)
    out = (np.log(y / x) - (int_r - int_q + 0.5 * sign * var)) / np.sqrt(var)
    return out if np.ndim(out) else float(out)


def _terminal(model: ModelSpec, t) -> bool:
    return t >= model.T - U_GUARD


def european_put(model: ModelSpec, t: float, x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("spot must be positive")
    if t > model.T:
        raise DomainError("t must not exceed maturity")
    K = model.K
    if _terminal(model, t):
        out = np.maximum(K - x, 0.0)
    else:
        int_r, int_q, var = _moments(model, t, model.T)
        sd = math.sqrt(var)
        dm = (np.log(K / x) - (int_r - int_q - 0.5 * var)) / sd
        dp = dm - sd
        out = K * math.exp(-int_r) * norm_cdf(dm) - x * math.exp(-int_q) * norm_cdf(dp)
    return out if out.ndim else float(out)


def european_call(model: ModelSpec, t: float, x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("spot must be positive")
    K = model.K
    if _terminal(model, t):
        out = np.maximum(x - K, 0.0)
    else:
        int_r, int_q, var = _moments(model, t, model.T)
        sd = math.sqrt(var)
        dm = (np.log(K / x) - (int_r - int_q - 0.5 * var)) / sd
        dp = dm - sd
        out = x * math.exp(-int_q) * norm_cdf(-dp) - K * math.exp(-int_r) * norm_cdf(-dm)
    return out if out.ndim else float(out)


def psi1_psi2(model: ModelSpec, t: float, x, u, b):
    """``(Phi(d_-), D_q/D * Phi(d_+))`` evaluated at level ``b``."""
    dm = d_pm(model, x, b, t, u, -1)
    dp = d_pm(model, x, b, t, u, +1)
    int_r, int_q, _ = _moments(model, t, u)
    return norm_cdf(dm), np.exp(int_r - int_q) * norm_cdf(dp)


class GBMSlice:
    """Quantities from a fixed valuation time ``t`` to future times ``u``.

    ``functionals(x, b)`` returns ``P(X_u < b)`` and ``E[X_u; X_u < b]`` given
    ``X_t = x``; absent levels (NaN or <= 0) give zeros.
    """

    def __init__(self, model: ModelSpec, t: float, u: np.ndarray):
        u = np.asarray(u, dtype=float)
        int_r, int_q, var = _moments(model, t, u)
        self.u = u
        self.D = np.exp(-int_r)
        self.growth = np.exp(int_r - int_q)
        self.drift = int_r - int_q
        self.var = var
        self.sd = np.sqrt(var)
        self.r_eff = model.r(u)
        self.q_eff = model.q(u)
        self.at_t = u - t <= U_GUARD

    def mean(self, x):
        return np.asarray(x, dtype=float) * self.growth

    def functionals(self, x, b):
        x = np.asarray(x, dtype=float)
        b = np.asarray(b, dtype=float)
        present = np.isfinite(b) & (b > 0.0)
        bb = np.where(present, b, 1.0)
        lb = np.log(bb / x)
        dm = (lb - self.drift + 0.5 * self.var) / self.sd
        dp = dm - self.sd
        a1 = np.where(present, norm_cdf(dm), 0.0)
        a2 = np.where(present, x * self.growth * norm_cdf(dp), 0.0)
        return endpoint_limit(self.at_t, x, b, present, a1, a2)


def endpoint_limit(at_t, x, b, present, a1, a2):
    """Replace functionals at ``u == t`` by their exact limits (a step in
    ``b - x`` that takes the value 1/2 on the level itself)."""
    if not np.any(at_t):
        return a1, a2
    step = np.where(b > x, 1.0, np.where(b == x, 0.5, 0.0))
    step = np.where(present, step, 0.0)
    a1 = np.where(at_t, step, a1)
    a2 = np.where(at_t, x * step, a2)
    return a1, a2


@dataclass(frozen=True)
class GBMKernel:
    model: ModelSpec

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
        return self.model.r(u), self.model.q(u)

    def european(self, t: float, x):
        return european_put(self.model, t, x)

    def european_call(self, t: float, x):
        return european_call(self.model, t, x)

    def prepare(self, t: float, u: np.ndarray) -> GBMSlice:
        return GBMSlice(self.model, t, u)


def kernel_for(model_or_kernel):
    if isinstance(model_or_kernel, ModelSpec):
        if model_or_kernel.kind == "gbm":
            return GBMKernel(model_or_kernel)
        from .ou import OUKernel

        return OUKernel.build(model_or_kernel)
    return model_or_kernel


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    w = np.zeros_like(nodes)
    if nodes.size < 2:
        return w
    h = np.diff(nodes)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def boundary_from(boundary, t: float):
    """Nodes, upper and lower values of ``boundary`` restricted to ``[t, T]``.

    When ``t`` falls between grid nodes, a leading node at ``t`` is inserted
    with linearly interpolated values (state taken from the right neighbour).
    """
    u = np.asarray(boundary.u, dtype=float)
    up = np.asarray(boundary.upper, dtype=float)
    lo = np.asarray(boundary.lower, dtype=float)
    if t < u[0] - 1e-14 or t > u[-1]:
        raise GridError(f"boundary grid [{u[0]}, {u[-1]}] does not cover t={t}")
    k = int(np.searchsorted(u, t - 1e-14, side="left"))
    if abs(u[k] - t) <= 1e-14 * max(1.0, abs(t)):
        return u[k:], up[k:], lo[k:]
    # t strictly between u[k-1] and u[k]
    wr = (t - u[k - 1]) / (u[k] - u[k - 1])

    def interp(v):
        a, b = v[k - 1], v[k]
        if np.isfinite(a) and np.isfinite(b):
            return (1.0 - wr) * a + wr * b
        return b

    return (np.concatenate([[t], u[k:]]),
            np.concatenate([[interp(up)], up[k:]]),
            np.concatenate([[interp(lo)], lo[k:]]))


def eep_integrand(kernel, t: float, x, nodes, upper, lower, call: bool = False):
    """EEP integrand at each node for spots ``x``: shape ``(len(x), len(nodes))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    sl = kernel.prepare(t, nodes)
    a1u, a2u = sl.functionals(x, upper[None, :])
    a1l, a2l = sl.functionals(x, lower[None, :])
    K = kernel.K
    if call:
        # exercise above the upper level: complementary functionals
        mean = sl.mean(x)
        c1 = np.where(np.isfinite(upper), 1.0 - a1u, 0.0)
        c2 = np.where(np.isfinite(upper), mean - a2u, 0.0)
        return sl.D * (sl.q_eff * c2 - sl.r_eff * K * c1)
    return sl.D * (sl.r_eff * K * (a1u - a1l) - sl.q_eff * (a2u - a2l))


def eep_pi(model_or_kernel, t: float, x, boundary, call: bool = False):
    """Early-exercise premium by composite trapezoid on the boundary grid."""
    kernel = kernel_for(model_or_kernel)
    nodes, up, lo = boundary_from(boundary, t)
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("spot must be positive")
    if nodes.size < 2:
        out = np.zeros(np.shape(x))
        return out if out.ndim else float(out)
    vals = eep_integrand(kernel, t, x, nodes, up, lo, call=call)
    out = vals @ trapezoid_weights(nodes)
    return out.reshape(np.shape(x)) if np.ndim(x) else float(out[0])


@dataclass
class PricingResult:
    x: np.ndarray
    european: np.ndarray
    eep: np.ndarray
    price: np.ndarray
    residual: float = 0.0
    min_integrand: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eep_nonnegative: bool = True


def american_put(model_or_kernel, t: float, x, boundary, eep_tol: float = 1e-8) -> PricingResult:
    """European put plus early-exercise premium for the solved ``boundary``."""
    kernel = kernel_for(model_or_kernel)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xs <= 0.0):
        raise DomainError("spot must be positive")
    nodes, up, lo = boundary_from(boundary, t)
    pe = np.asarray(kernel.european(t, xs), dtype=float).reshape(xs.shape)
    if nodes.size >= 2:
        vals = eep_integrand(kernel, t, xs, nodes, up, lo)
        eep = vals @ trapezoid_weights(nodes)
        mins = vals.min(axis=1)
    else:
        eep = np.zeros_like(xs)
        mins = np.zeros_like(xs)
    if np.any(eep < -eep_tol * kernel.K):
        raise ConsistencyError(
            f"negative early-exercise premium {eep.min():.3e}; boundary is inconsistent")
    return PricingResult(
        x=xs, european=pe, eep=eep, price=pe + eep,
        residual=float(getattr(boundary, "vm_residual", 0.0)),
        min_integrand=mins, eep_nonnegative=bool(np.all(eep >= -eep_tol * kernel.K)),
    )


def american_call_single_boundary(model: ModelSpec, t: float, x, boundary) -> PricingResult:
    """American call from a single upper exercise boundary (exercise above it)."""
    if model.kind != "gbm":
        raise UnsupportedRegimeError("call pricing is implemented for the GBM model only")
    ts = np.linspace(t, model.T, 257)
    if np.any(model.q(ts) < 0.0):
        raise UnsupportedRegimeError("call requires q(u) >= 0 (single upper exercise region)")
    kernel = GBMKernel(model)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    ce = np.asarray(european_call(model, t, xs), dtype=float).reshape(xs.shape)
    if boundary is None:
        eep = np.zeros_like(xs)
    else:
        eep = np.atleast_1d(eep_pi(kernel, t, xs, boundary, call=True))
    return PricingResult(x=xs, european=ce, eep=eep, price=ce + eep)
