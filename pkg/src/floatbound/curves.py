"""Deterministic time-dependent model coefficients.

Every coefficient is either a constant or an exponential-affine function
``A * exp(-B t) + C``; both have closed-form integrals, as does their square
(needed for the integrated variance).  A piecewise composite of such curves is
available for regime experiments.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DomainError

B_EPS = 1e-12


def _check_finite(t) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("time argument must be finite")
    return arr


def _check_order(t, u) -> tuple[np.ndarray, np.ndarray]:
    t = _check_finite(t)
    u = _check_finite(u)
    if np.any(t > u):
        raise DomainError("integration requires t <= u")
    return t, u


def _exp_integral(b: float, t: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Integral of exp(-b s) over [t, u], stable for small b and short intervals."""
    if abs(b) < B_EPS:
        return u - t
    return -np.exp(-b * t) * np.expm1(-b * (u - t)) / b


@dataclass(frozen=True)
class ParamCurve:
    """Constant or exponential-affine coefficient ``A exp(-B t) + C``.

    For ``kind == "constant"`` only ``C`` is used (use :meth:`constant`).
    """

    kind: str = "constant"
    A: float = 0.0
    B: float = 0.0
    C: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "exp_affine"):
            raise DomainError(f"unknown curve kind {self.kind!r}")
        for name in ("A", "B", "C"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"curve parameter {name} must be finite")

    @classmethod
    def constant(cls, value: float) -> "ParamCurve":
        return cls("constant", 0.0, 0.0, float(value))

    @classmethod
    def exp_affine(cls, A: float, B: float, C: float = 0.0) -> "ParamCurve":
        return cls("exp_affine", float(A), float(B), float(C))

    @property
    def value(self) -> float:
        return self.C

    def __call__(self, t):
        t = _check_finite(t)
        if self.kind == "constant":
            return np.full_like(t, self.C) if t.ndim else float(self.C)
        out = self.A * np.exp(-self.B * t) + self.C
        return out if t.ndim else float(out)

    def integrate(self, t, u):
        t, u = _check_order(t, u)
        if self.kind == "constant":
            out = self.C * (u - t)
        else:
            out = self.A * _exp_integral(self.B, t, u) + self.C * (u - t)
        return out if np.ndim(out) else float(out)

    def integrate_sq(self, t, u):
        """Integral of the squared curve over [t, u]."""
        t, u = _check_order(t, u)
        if self.kind == "constant":
            out = self.C * self.C * (u - t)
        else:
            A, B, C = self.A, self.B, self.C
            out = (
                A * A * _exp_integral(2.0 * B, t, u)
                + 2.0 * A * C * _exp_integral(B, t, u)
                + C * C * (u - t)
            )
        return out if np.ndim(out) else float(out)

    def roots(self, t0: float, t1: float) -> list[float]:
        """Zeros in the open interval (t0, t1); an exp-affine curve has at most one."""
        if self.kind == "constant" or self.A == 0.0:
            return []
        if abs(self.B) < B_EPS:
            return []
        ratio = -self.C / self.A
        if ratio <= 0.0:
            return []
        s = -math.log(ratio) / self.B
        return [s] if t0 < s < t1 else []


@dataclass(frozen=True)
class PiecewiseCurve:
    """Curve equal to ``pieces[i]`` on ``[breaks[i], breaks[i+1])``.

    ``breaks`` has one more entry than ``pieces``; the first piece extends to
    -inf and the last to +inf so evaluation is total.
    """

    breaks: tuple[float, ...]
    pieces: tuple[ParamCurve, ...]
    kind: str = field(default="piecewise", init=False)

    def __post_init__(self):
        if len(self.breaks) != len(self.pieces) + 1 or len(self.pieces) == 0:
            raise DomainError("piecewise curve needs len(breaks) == len(pieces) + 1")
        if any(b1 <= b0 for b0, b1 in zip(self.breaks, self.breaks[1:])):
            raise DomainError("piecewise breaks must be strictly increasing")

    def _inner(self) -> np.ndarray:
        return np.asarray(self.breaks[1:-1], dtype=float)

    def __call__(self, t):
        t = _check_finite(t)
        idx = np.searchsorted(self._inner(), t, side="right")
        out = np.empty_like(t, dtype=float)
        for i, piece in enumerate(self.pieces):
            m = idx == i
            if np.any(m):
                out[m] = piece(t[m])
        return out if t.ndim else float(out)

    def _split(self, method: str, t, u):
        t, u = _check_order(t, u)
        tb, ub = np.broadcast_arrays(t, u)
        total = np.zeros(tb.shape)
        edges = [-np.inf, *self.breaks[1:-1], np.inf]
        for i, piece in enumerate(self.pieces):
            lo = np.clip(tb, edges[i], edges[i + 1])
            hi = np.clip(ub, edges[i], edges[i + 1])
            total = total + getattr(piece, method)(lo, hi)
        return total if total.ndim else float(total)

    def integrate(self, t, u):
        return self._split("integrate", t, u)

    def integrate_sq(self, t, u):
        return self._split("integrate_sq", t, u)

    def roots(self, t0: float, t1: float) -> list[float]:
        found = []
        edges = [-np.inf, *self.breaks[1:-1], np.inf]
        for i, piece in enumerate(self.pieces):
            lo, hi = max(t0, edges[i]), min(t1, edges[i + 1])
            if lo < hi:
                found.extend(piece.roots(lo, hi))
        return found


Curve = Union[ParamCurve, PiecewiseCurve]


def as_curve(value: Union[Curve, float, int]) -> Curve:
    if isinstance(value, (ParamCurve, PiecewiseCurve)):
        return value
    return ParamCurve.constant(float(value))


@dataclass(frozen=True)
class ModelSpec:
    """Model, contract and coefficient curves.

    ``kind`` is ``"gbm"`` (uses r, q, sigma) or ``"ou"`` (uses r, kappa, theta,
    sigma; sigma is then the normal volatility).
    """

    kind: str
    K: float
    T: float
    r: Curve
    sigma: Curve
    q: Curve = field(default_factory=lambda: ParamCurve.constant(0.0))
    kappa: Curve = field(default_factory=lambda: ParamCurve.constant(0.0))
    theta: Curve = field(default_factory=lambda: ParamCurve.constant(0.0))
    t0: float = 0.0

    def __post_init__(self):
        for name in ("r", "q", "sigma", "kappa", "theta"):
            object.__setattr__(self, name, as_curve(getattr(self, name)))
        if self.kind not in ("gbm", "ou"):
            raise DomainError(f"unknown model kind {self.kind!r}")
        if not (self.K > 0.0):
            raise DomainError("strike must be positive")
        if not (self.T > self.t0 >= 0.0):
            raise DomainError("need T > t0 >= 0")
        ts = np.linspace(self.t0, self.T, 257)
        if np.any(self.sigma(ts) <= 0.0):
            raise DomainError("sigma must be positive on [t0, T]")
        # kappa == 0 is kept as the arithmetic-Brownian limit of the OU model
        if self.kind == "ou" and np.any(self.kappa(ts) < 0.0):
            raise DomainError("kappa must be non-negative on [t0, T] for the OU model")

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)


def eval_curve(curve: Curve, t):
    return curve(t)


def integrate_curve(curve: Curve, t, u):
    return curve.integrate(t, u)


def discount_factors(model: ModelSpec, t, u):
    """Return ``(D, D_q)`` with ``D = exp(-int r)`` and ``D_q = exp(-int q)``."""
    t = _check_finite(t)
    u = _check_finite(u)
    if np.any(u > model.T + 1e-12):
        raise DomainError("u must not exceed maturity")
    D = np.exp(-model.r.integrate(t, u))
    Dq = np.exp(-model.q.integrate(t, u))
    return D, Dq


def sigma_bar(model: ModelSpec, t, u):
    """Root-mean-square volatility over [t, u]."""
    t = _check_finite(t)
    u = _check_finite(u)
    if np.any(t >= u):
        raise DomainError("sigma_bar requires t < u")
    out = np.sqrt(model.sigma.integrate_sq(t, u) / (u - t))
    return out if np.ndim(out) else float(out)
