"""Exercise-region topology of the American put from the signs of r, q, r - q.

Near maturity the exercise set is determined by where the instantaneous
exercise benefit ``H(u, x) = r(u) K - q(u) x`` is positive below the strike.
:func:`segment_timeline` cuts ``[t0, T)`` at every sign change of ``r``, ``q``
and ``r - q`` and labels each piece.  The labels are advisory: boundaries do
not appear or vanish instantaneously at a switch time, so the solver follows
the actual roots of its equations rather than these labels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .curves import ModelSpec
from .errors import ComplexityError, DomainError

BAND_EMPTY = "empty"
BAND_BELOW_K = "X<K"
BAND_BELOW_KRQ = "X<K*r/q"
BAND_BETWEEN = "K*r/q<X<K"

MAX_SIGN_CHANGES = 64


@dataclass(frozen=True)
class RegimeSegment:
    t_start: float
    t_end: float
    n_boundaries: int
    band: str

    def contains(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


def classify_point(r_val: float, q_val: float) -> tuple[int, str]:
    """Number of put exercise boundaries near maturity and the exercise band."""
    r_val, q_val = float(r_val), float(q_val)
    if not (np.isfinite(r_val) and np.isfinite(q_val)):
        raise DomainError("rates must be finite")
    if r_val == 0.0:
        # H = -q x: positive for every x only when q < 0
        return (1, BAND_BELOW_K) if q_val < 0.0 else (0, BAND_EMPTY)
    if r_val > 0.0:
        if q_val > 0.0 and r_val <= q_val:
            return 1, BAND_BELOW_KRQ
        return 1, BAND_BELOW_K
    # r < 0
    if q_val < r_val:
        return 2, BAND_BETWEEN
    return 0, BAND_EMPTY


def _roots(f: Callable[[np.ndarray], np.ndarray], t0: float, t1: float, tol: float,
           n_brackets: int = 512) -> list[float]:
    """Sign changes of ``f`` on ``(t0, t1)`` by bracketing and bisection.

    A sample that lands exactly on a zero counts as a root only if the
    function has opposite signs on either side (tangency is not a switch).
    """
    ts = np.linspace(t0, t1, n_brackets + 1)
    fs = np.asarray(f(ts), dtype=float)
    found = []
    delta = 1e-9 * max(1.0, t1 - t0)
    for i in range(n_brackets):
        a, b, fa, fb = ts[i], ts[i + 1], fs[i], fs[i + 1]
        if fa == 0.0:
            if 0 < i:
                left = float(f(np.array([a - delta]))[0])
                right = float(f(np.array([a + delta]))[0])
                if np.sign(left) * np.sign(right) < 0.0:
                    found.append(float(a))
            continue
        # compare signs, not the product, which underflows for tiny values
        if fb == 0.0 or (fa > 0.0) == (fb > 0.0):
            continue
        while b - a > tol:
            m = 0.5 * (a + b)
            fm = float(f(np.array([m]))[0])
            if fm == 0.0:
                a = b = m
                break
            if (fm < 0.0) == (fa < 0.0):
                a, fa = m, fm
            else:
                b = m
        found.append(0.5 * (a + b))
    return found


def rate_functions(model: ModelSpec):
    """``(r, q)`` as vectorised callables; OU models use the effective rates."""
    if model.kind == "gbm":
        return model.r, model.q
    from .ou import effective_rates

    return (lambda t: effective_rates(model, t)[0]), (lambda t: effective_rates(model, t)[1])


def switch_times(model: ModelSpec, root_tol: float = 1e-12, t_start: Optional[float] = None) -> list[float]:
    if not root_tol > 0.0:
        raise DomainError("root_tol must be positive")
    r, q = rate_functions(model)
    t0 = model.t0 if t_start is None else t_start
    T = model.T
    found = []
    for f in (r, q, lambda t: np.asarray(r(t)) - np.asarray(q(t))):
        found.extend(_roots(f, t0, T, root_tol))
        if len(found) > MAX_SIGN_CHANGES:
            raise ComplexityError(f"more than {MAX_SIGN_CHANGES} sign changes of r, q, r-q")
    # a zero within rounding distance of an end point would only cut a sliver
    edge = max(root_tol, 1e-10 * (T - t0))
    found = sorted(t for t in found if t0 + edge < t < T - edge)
    merged: list[float] = []
    for t in found:
        if not merged or t - merged[-1] > root_tol:
            merged.append(t)
    return merged


def segment_timeline(model: ModelSpec, root_tol: float = 1e-12) -> list[RegimeSegment]:
    """Sign-homogeneous segments of ``[t0, T)`` with their boundary counts."""
    r, q = rate_functions(model)
    cuts = [model.t0, *switch_times(model, root_tol), model.T]
    segs = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = np.array([0.5 * (a + b)])
        n, band = classify_point(float(r(mid)[0]), float(q(mid)[0]))
        segs.append(RegimeSegment(float(a), float(b), n, band))
    return segs


def timeline_csv(segments: list[RegimeSegment]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_start", "t_end", "n_boundaries", "band"])
    for s in segments:
        w.writerow([f"{s.t_start:.17g}", f"{s.t_end:.17g}", s.n_boundaries, s.band])
    return buf.getvalue()
