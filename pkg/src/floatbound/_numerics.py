"""Small numerical helpers shared by the pricing modules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

SQRT_PI = math.sqrt(math.pi)


def norm_cdf(x):
    # scipy's ndtr switches to erfc in the tails, good to ~1e-16 relative there
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@dataclass
class RootResult:
    x: float
    fx: float
    iterations: int
    converged: bool


def bisect(f: Callable[[float], float], lo: float, hi: float, flo: float, fhi: float,
           xtol: float, max_iter: int = 200) -> RootResult:
    if flo == 0.0:
        return RootResult(lo, 0.0, 0, True)
    if fhi == 0.0:
        return RootResult(hi, 0.0, 0, True)
    if flo * fhi > 0.0:
        raise ValueError("bisection needs a sign change")
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0 or hi - lo <= xtol:
            return RootResult(mid, fm, it, True)
        if (fm < 0.0) == (flo < 0.0):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    mid = 0.5 * (lo + hi)
    return RootResult(mid, f(mid), max_iter, hi - lo <= xtol)


def safeguarded_newton(f: Callable[[float], float], x0: float, lo: float, hi: float,
                       xtol: float, ftol: float = 0.0, max_iter: int = 100,
                       fd_step: Optional[float] = None) -> RootResult:
    """Newton iteration with central-difference slope, kept inside ``[lo, hi]``.

    If a sign change is seen the bracket is tightened and steps that leave it
    are replaced by bisection.  Without a bracket a step leaving ``[lo, hi]`` is
    clipped to the nearer end; the result is flagged unconverged if no root is
    reached in ``max_iter`` iterations.
    """
    x = min(max(x0, lo), hi)
    fx = f(x)
    a, fa, b, fb = None, None, None, None  # bracket, once known
    h0 = fd_step if fd_step is not None else 1e-6 * max(abs(hi), 1.0)
    for it in range(1, max_iter + 1):
        if fx == 0.0 or (ftol > 0.0 and abs(fx) <= ftol):
            return RootResult(x, fx, it - 1, True)
        h = min(h0, 0.5 * (hi - lo))
        xl, xr = max(x - h, lo), min(x + h, hi)
        slope = (f(xr) - f(xl)) / (xr - xl) if xr > xl else 0.0
        step_ok = slope != 0.0 and math.isfinite(slope)
        x_new = x - fx / slope if step_ok else x
        if a is not None and not (min(a, b) < x_new < max(a, b)):
            x_new = 0.5 * (a + b)
        elif a is None:
            if not step_ok:
                x_new = x + (h0 if x + h0 <= hi else -h0)
            x_new = min(max(x_new, lo), hi)
        f_new = f(x_new)
        if f_new * fx < 0.0:
            a, fa, b, fb = x, fx, x_new, f_new
        elif a is not None:
            if f_new * fa < 0.0:
                b, fb = x_new, f_new
            else:
                a, fa = x_new, f_new
        dx = abs(x_new - x)
        x, fx = x_new, f_new
        if dx <= xtol * max(1.0, abs(x)) or (a is not None and abs(b - a) <= xtol * max(1.0, abs(x))):
            if a is not None and abs(fb) < abs(fx):
                x, fx = b, fb
            return RootResult(x, fx, it, True)
    return RootResult(x, fx, max_iter, False)


def sign_change_brackets(xs: np.ndarray, fs: np.ndarray) -> list[tuple[int, int]]:
    """Index pairs (i, i+1) where the sampled function changes sign."""
    s = np.sign(fs)
    idx = np.nonzero(s[:-1] * s[1:] < 0)[0]
    return [(int(i), int(i) + 1) for i in idx]


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


class CumulativeIntegral:
    """Antiderivative ``F(t) = int_{anchor}^t f`` of a smooth vectorised ``f``.

    Panels of Gauss-Legendre rules are tabulated once; evaluation integrates
    from the nearest tabulated node, so values are accurate to roughly machine
    precision for analytic integrands.
    """

    def __init__(self, f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                 anchor: float, panels: int = 64, order: int = 16):
        self.f = f
        self.lo, self.hi = float(lo), float(hi)
        self.nodes = np.linspace(lo, hi, panels + 1)
        self._gx, self._gw = gauss_legendre(order)
        pieces = self._panel(self.nodes[:-1], self.nodes[1:])
        table = np.concatenate([[0.0], np.cumsum(pieces)])
        self._table = table
        self._shift = self._raw(np.asarray(anchor, dtype=float))

    def _panel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        pts = mid[..., None] + half[..., None] * self._gx
        return half * np.sum(self._gw * self.f(pts), axis=-1)

    def _raw(self, t: np.ndarray) -> np.ndarray:
        i = np.clip(np.searchsorted(self.nodes, t, side="right") - 1, 0, len(self.nodes) - 2)
        return self._table[i] + self._panel(self.nodes[i], t)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = self._raw(t) - self._shift
        return out if out.ndim else float(out)
