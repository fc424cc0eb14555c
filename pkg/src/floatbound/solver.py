"""Backward-in-time solution of the value-matching Volterra equations for the
early-exercise boundaries.

Each time node ``u_k`` is solved with all later nodes frozen.  With the
composite trapezoid rule in time the unknown boundary values enter only
through the ``u = u_k`` endpoint term, where the transition probabilities
degenerate to step functions.  For a spot ``x`` sitting on either boundary of
an ordinary band ``X** < x < X*`` that endpoint term is ``H(u_k, x) / 2``, so
both boundaries are roots of the same scalar function

    F(x) = K - x - P_E(u_k, x) - pi_future(x) - w_k * H(u_k, x) / 2,

and the discrete exercise set is ``{x : F(x) > 0}``.  The solver scans ``F``
to find the topology of that set (empty, a band touching zero, or a band with
two edges) and then polishes the edges with the three-step procedure of
:func:`solve_step3` (double nodes) or a safeguarded Newton iteration (single
nodes).  Topology changes between neighbouring nodes are located by
bisection in time with the later nodes frozen; the probe solves closest to
each change are kept as event nodes.  They pin collapse, reappearance and
emergence times and resolve the square-root closing of the gap without
disturbing the grading of the pricing grid.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from ._numerics import RootResult, bisect, safeguarded_newton
from .curves import ModelSpec
from .errors import DomainError, GridError, UnsupportedRegimeError
from .gbm import GBMKernel, eep_integrand, kernel_for, trapezoid_weights
from .regime import classify_point

log = logging.getLogger(__name__)

EMPTY, SINGLE, DOUBLE = 0, 1, 2
STATE_NAMES = {EMPTY: "empty", SINGLE: "single", DOUBLE: "double"}


@dataclass(frozen=True)
class SolverConfig:
    N: int = 200
    tol_root: float = 1e-12
    small_eps_rel: float = 1e-6
    gap_eps_rel: float = 1e-4
    max_iter: int = 100
    scan_points: int = 256
    refine_events: bool = True
    refine_steps: int = 30
    tol_vm: float = 1e-6

    def __post_init__(self):
        if self.N < 2:
            raise GridError("need at least two time steps")
        if not (0.0 < self.tol_root < 1e-3):
            raise DomainError("tol_root must lie in (0, 1e-3)")
        if self.scan_points < 16:
            raise DomainError("scan_points must be at least 16")


def backward_grid(t0: float, T: float, N: int) -> np.ndarray:
    """Ascending grid with ``T - u`` proportional to ``k**2`` near maturity."""
    if N < 1:
        raise GridError("N must be positive")
    if not T > t0:
        raise GridError("need T > t0")
    k = np.arange(N, -1, -1, dtype=float)
    u = T - (T - t0) * (k / N) ** 2
    u[0], u[-1] = t0, T
    return u


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ExerciseBoundary:
    """Boundary values on an ascending time grid ending at maturity.

    ``upper``/``lower`` are NaN where absent; ``state`` holds 0 (empty),
    1 (single: exercise region ``x < upper``) or 2 (double: band between the
    two values).  ``note`` keeps per-node solver remarks such as ``decoupled``
    (step-3 Newton did not converge) or ``inherited`` (values copied from
    the later node).  ``event_nodes`` holds ``(t, state, upper, lower)``
    probe solves bracketing each topology change; they sharpen event times
    and are not part of the pricing grid.
    """

    u: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    state: np.ndarray
    swapped: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    note: tuple = ()
    kind: str = "put"
    event_nodes: tuple = ()

    def __post_init__(self):
        for name in ("u", "upper", "lower", "state", "swapped", "residual", "iterations", "converged"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.u.size
        if any(getattr(self, f).shape != (n,) for f in ("upper", "lower", "state", "residual")):
            raise GridError("boundary arrays must share the grid length")
        if n < 2 or np.any(np.diff(self.u) <= 0.0):
            raise GridError("boundary grid must be strictly increasing")

    @property
    def vm_residual(self) -> float:
        """Largest value-matching residual over converged nodes."""
        r = self.residual[self.converged]
        r = r[np.isfinite(r)]
        return float(r.max()) if r.size else 0.0

    @property
    def gap(self) -> np.ndarray:
        """``X* - X**`` with empty nodes counted as 0 and single nodes as ``X*``."""
        up = np.where(self.state > 0, self.upper, 0.0)
        lo = np.where(self.state == DOUBLE, self.lower, 0.0)
        return np.where(self.state == EMPTY, 0.0, up - lo)

    def state_names(self) -> list[str]:
        return [STATE_NAMES[int(s)] for s in self.state]

    def at(self, t: float) -> tuple[float, float]:
        """Linearly interpolated ``(upper, lower)`` at ``t`` (NaN if absent)."""
        if t < self.u[0] or t > self.u[-1]:
            raise GridError("t outside the boundary grid")
        k = int(np.searchsorted(self.u, t))
        if self.u[k] == t or k == 0:
            return float(self.upper[k]), float(self.lower[k])
        w = (t - self.u[k - 1]) / (self.u[k] - self.u[k - 1])
        return (float((1 - w) * self.upper[k - 1] + w * self.upper[k]),
                float((1 - w) * self.lower[k - 1] + w * self.lower[k]))


@dataclass(frozen=True)
class Event:
    kind: str  # emergence | collapse | reappearance | swap | intersection
    time: float


@dataclass
class SolveReport:
    converged: np.ndarray
    max_residual: float
    events: list = field(default_factory=list)
    wall_time: float = 0.0

    def times(self, kind: str) -> list[float]:
        return [e.time for e in self.events if e.kind == kind]

    @property
    def t_star(self) -> Optional[float]:
        ts = self.times("emergence")
        return ts[0] if ts else None

    @property
    def t_e(self) -> Optional[float]:
        ts = self.times("collapse")
        return ts[0] if ts else None

    @property
    def t_s(self) -> Optional[float]:
        ts = self.times("reappearance")
        return ts[-1] if ts else None

    @property
    def intersections(self) -> list[float]:
        return self.times("intersection")


# ---------------------------------------------------------------------------
# terminal values


def terminal_boundary_values(model_or_kernel) -> tuple[Optional[float], Optional[float]]:
    """``(X*(T-), X**(T-))`` from the signs of the (effective) rates at ``T``."""
    kernel = kernel_for(model_or_kernel)
    K, T = kernel.K, kernel.T
    r, q = (float(v) for v in kernel.rates(T))
    if q < r < 0.0:
        return K, K * r / q
    if r > 0.0:
        if q <= 0.0:
            return K, None
        return K * min(1.0, r / q), None
    if r == 0.0 and q < 0.0:
        return K, None
    return None, None


def _terminal_state(up, lo) -> int:
    if up is None:
        return EMPTY
    return DOUBLE if lo is not None else SINGLE


# ---------------------------------------------------------------------------
# single-node problem


def _step(level, x):
    """Endpoint transition probability P(X_t < level | X_t = x): 1, 1/2 or 0."""
    if level is None or not np.isfinite(level):
        return 0.0
    if level > x:
        return 1.0
    return 0.5 if level == x else 0.0


class NodeProblem:
    """Value-matching equations at time ``t`` with the boundary frozen on
    the later nodes ``fut_u`` (ascending, all greater than ``t``)."""

    def __init__(self, kernel, t: float, fut_u, fut_up, fut_lo, call: bool = False):
        self.kernel = kernel
        self.K = kernel.K
        self.t = float(t)
        self.fut_u = np.asarray(fut_u, dtype=float)
        self.fut_up = np.asarray(fut_up, dtype=float)
        self.fut_lo = np.asarray(fut_lo, dtype=float)
        self.call = call
        w = trapezoid_weights(np.concatenate([[self.t], self.fut_u]))
        self.w0, self.wf = float(w[0]), w[1:]
        r_t, q_t = kernel.rates(self.t)
        self.r_t, self.q_t = float(r_t), float(q_t)
        self.evals = 0

    def european(self, x):
        if self.call:
            return self.kernel.european_call(self.t, x)
        return self.kernel.european(self.t, x)

    def future(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vals = eep_integrand(self.kernel, self.t, x, self.fut_u, self.fut_up, self.fut_lo,
                             call=self.call)
        self.evals += x.size
        return vals @ self.wf

    def _base(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        pe = np.atleast_1d(self.european(x))
        if self.call:
            return x - self.K - pe - self.future(x)
        return self.K - x - pe - self.future(x)

    def f_on(self, x):
        """Residual for a spot lying on an edge of an ordinary exercise set."""
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        if self.call:
            h = self.q_t * xa - self.r_t * self.K
        else:
            h = self.r_t * self.K - self.q_t * xa
        out = self._base(xa) - self.w0 * 0.5 * h
        return out if np.ndim(x) else float(out[0])

    def residual(self, x: float, a: Optional[float], b: Optional[float]) -> float:
        """Residual at spot ``x`` for candidate node values ``a = X*``, ``b = X**``."""
        s = _step(a, x) - _step(b, x)
        h = self.r_t * self.K - self.q_t * x
        return float(self._base(x)[0] - self.w0 * s * h)

    def pair_residual(self, a: float, b: float) -> np.ndarray:
        return np.array([self.residual(a, a, b), self.residual(b, a, b)])


# ---------------------------------------------------------------------------
# scans and topology


@dataclass
class Band:
    """Positive set of ``F`` found at a node: ``(lo_bracket, hi_bracket)`` for
    each present edge; ``lo_bracket`` is None when the set reaches ``x_min``."""

    lo_bracket: Optional[tuple[float, float, float, float]]
    hi_bracket: Optional[tuple[float, float, float, float]]


def _scan_grid(K: float, small_eps: float, n: int, extra: Sequence[float] = ()) -> np.ndarray:
    n_low = max(8, n // 6)
    low = np.geomspace(small_eps, 0.02 * K, n_low)
    high = np.linspace(0.02 * K, K * (1.0 - 1e-9), n - n_low)
    pts = [low, high]
    for e in extra:
        if e is not None and np.isfinite(e) and small_eps < e < K:
            d = 1e-3 * K
            pts.append(np.clip([e - d, e, e + d], small_eps, K * (1.0 - 1e-9)))
    return np.unique(np.concatenate(pts))


def _bands_from_scan(xs: np.ndarray, fs: np.ndarray) -> list[Band]:
    pos = fs > 0.0
    bands = []
    i, n = 0, len(xs)
    while i < n:
        if not pos[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and pos[j + 1]:
            j += 1
        lo = None if i == 0 else (xs[i - 1], xs[i], fs[i - 1], fs[i])
        hi = None if j == n - 1 else (xs[j], xs[j + 1], fs[j], fs[j + 1])
        bands.append(Band(lo, hi))
        i = j + 1
    return bands


def _band_extent(b: Band, x_min: float, x_max: float) -> tuple[float, float]:
    lo = x_min if b.lo_bracket is None else b.lo_bracket[1]
    hi = x_max if b.hi_bracket is None else b.hi_bracket[0]
    return lo, hi


def _probe_narrow(prob: NodeProblem, ref_lo: float, ref_hi: float, x_min: float, x_max: float,
                  xtol: float) -> Optional[Band]:
    """Look for a narrow positive set near a reference band missed by the scan."""
    width = max(ref_hi - ref_lo, 1e-3 * prob.K)
    a = max(x_min, ref_lo - 0.5 * width)
    b = min(x_max, ref_hi + 0.5 * width)
    if not b > a:
        return None
    res = minimize_scalar(lambda x: -prob.f_on(x), bounds=(a, b), method="bounded",
                          options={"xatol": xtol})
    xm, fm = float(res.x), -float(res.fun)
    if not fm > 0.0:
        return None
    fa, fb = prob.f_on(a), prob.f_on(b)
    if fa > 0.0 and a > x_min:
        a, fa = x_min, prob.f_on(x_min)
    if fb > 0.0 and b < x_max:
        b, fb = x_max, prob.f_on(x_max)
    lo = None if fa > 0.0 else (a, xm, fa, fm)
    hi = None if fb > 0.0 else (xm, b, fm, fb)
    return Band(lo, hi)


@dataclass
class NodeResult:
    state: int
    upper: float = math.nan
    lower: float = math.nan
    iterations: int = 0
    converged: bool = True
    swapped: bool = False
    note: str = ""


class BoundarySolver:
    """Backward sweep shared by :func:`solve_single`, :func:`solve_double` and
    :func:`solve_mixed`.

    ``mode`` controls the admissible topology: ``"single"`` never reports a
    lower boundary (the band is read as ``x < X*``), ``"auto"`` follows the
    roots of the discrete equations.
    """

    def __init__(self, kernel, config: SolverConfig, mode: str = "auto"):
        if mode not in ("auto", "single"):
            raise ValueError(f"unknown mode {mode!r}")
        self.kernel = kernel
        self.cfg = config
        self.mode = mode
        self.K = kernel.K
        self.small_eps = config.small_eps_rel * self.K
        self.x_min = self.small_eps
        self.x_max = self.K * (1.0 - 1e-9)
        self.xtol = config.tol_root * self.K

    # -- topology ---------------------------------------------------------
    def _find_band(self, prob: NodeProblem, ref_up: float, ref_lo: float) -> Optional[Band]:
        if not prob.call and classify_point(prob.r_t, prob.q_t)[0] == 0:
            # H = rK - qx <= 0 for every x > 0: exercising is never optimal.
            # The discrete node term -w0 H / 2 would otherwise open a
            # spurious band wherever the continuation margin is small.
            return None
        xs = _scan_grid(self.K, self.small_eps, self.cfg.scan_points, (ref_up, ref_lo))
        fs = prob.f_on(xs)
        bands = _bands_from_scan(xs, fs)
        if not bands:
            if np.isfinite(ref_up):
                lo_ref = ref_lo if np.isfinite(ref_lo) else self.x_min
                return _probe_narrow(prob, lo_ref, ref_up, self.x_min, self.x_max, 1e-3 * self.xtol)
            return None
        if len(bands) == 1:
            return bands[0]
        # several disjoint positive sets: keep the one overlapping the
        # reference band most, otherwise the widest
        def score(b):
            lo, hi = _band_extent(b, self.x_min, self.x_max)
            if np.isfinite(ref_up):
                rlo = ref_lo if np.isfinite(ref_lo) else self.x_min
                ov = min(hi, ref_up) - max(lo, rlo)
                return (1, ov) if ov > 0 else (0, hi - lo)
            return (0, hi - lo)
        return max(bands, key=score)

    def _state_of(self, band: Optional[Band]) -> int:
        if band is None:
            return EMPTY
        if band.lo_bracket is None or self.mode == "single":
            return SINGLE
        return DOUBLE

    # -- edge polishing ---------------------------------------------------
    def _edge(self, f, bracket, guess) -> RootResult:
        xl, xr, fl, fr = bracket
        if guess is not None and np.isfinite(guess) and xl <= guess <= xr:
            res = safeguarded_newton(f, guess, xl, xr, xtol=self.cfg.tol_root,
                                     max_iter=self.cfg.max_iter, fd_step=1e-7 * self.K)
            if res.converged and xl <= res.x <= xr and abs(res.fx) <= 1e-8 * self.K:
                return res
        return bisect(f, xl, xr, fl, fr, xtol=self.xtol, max_iter=self.cfg.max_iter + 100)

    def _solve_node(self, prob: NodeProblem, warm_up: float, warm_lo: float) -> NodeResult:
        band = self._find_band(prob, warm_up, warm_lo)
        state = self._state_of(band)
        if state == EMPTY:
            return NodeResult(EMPTY)
        if band.hi_bracket is None:
            # exercise set reaches the strike; cannot happen for a put with
            # a consistent future boundary, keep the cap and flag it
            return NodeResult(SINGLE, upper=self.x_max, converged=False, note="capped")
        if state == SINGLE:
            res = self._edge(prob.f_on, band.hi_bracket, warm_up)
            return NodeResult(SINGLE, upper=res.x, iterations=res.iterations, converged=res.converged)
        return solve_step3(prob, (warm_up, warm_lo), band, self)

    # -- sweep ------------------------------------------------------------
    def _problem(self, t, us, ups, los, call=False) -> NodeProblem:
        return NodeProblem(self.kernel, t, us, ups, los, call=call)

    def _probe(self, t, fu, fup, flo, ref_up, ref_lo) -> NodeResult:
        return self._solve_node(self._problem(t, fu, fup, flo), ref_up, ref_lo)

    def _refine(self, t_a: float, res_a: NodeResult, fu, fup, flo, ref_up, ref_lo):
        """Bisect ``(t_a, fu[0])`` for the topology change seen between them.

        Probes reuse the frozen later nodes, so they are node solves of the
        same discrete equations at intermediate times.  Returns the two probe
        results closest to the change (state of ``t_a`` side, state of
        ``fu[0]`` side)."""
        state_b = int(self._state_nodes[-1])
        lo, hi = t_a, float(fu[0])
        r_lo, r_hi = res_a, None
        for _ in range(self.cfg.refine_steps):
            if hi - lo <= 1e-14 * max(1.0, abs(hi)):
                break
            mid = 0.5 * (lo + hi)
            r = self._probe(mid, fu, fup, flo, ref_up, ref_lo)
            if r.state == state_b:
                hi, r_hi = mid, r
            else:
                lo, r_lo = mid, r
        out = [(lo, r_lo)]
        if r_hi is not None:
            out.append((hi, r_hi))
        return out

    def solve(self, grid: np.ndarray) -> ExerciseBoundary:
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0.0):
            raise GridError("grid must be strictly increasing")
        if abs(grid[-1] - self.kernel.T) > 1e-12 * max(1.0, self.kernel.T):
            raise GridError("grid must end at maturity")
        up_T, lo_T = terminal_boundary_values(self.kernel)
        if self.mode == "single":
            lo_T = None
        # lists hold nodes in *descending* time order while sweeping
        us = [grid[-1]]
        ups = [math.nan if up_T is None else up_T]
        los = [math.nan if lo_T is None else lo_T]
        self._state_nodes = [_terminal_state(up_T, lo_T)]
        its, conv, swp, notes = [0], [True], [False], ["terminal"]
        event_nodes = []
        for t in grid[-2::-1]:
            fu, fup, flo = np.array(us[::-1]), np.array(ups[::-1]), np.array(los[::-1])
            res = self._probe(t, fu, fup, flo, ups[-1], los[-1])
            if self.cfg.refine_events and res.state != self._state_nodes[-1]:
                for t_p, r_p in self._refine(t, res, fu, fup, flo, ups[-1], los[-1]):
                    if t < t_p < fu[0]:
                        event_nodes.append((t_p, r_p.state,
                                            r_p.upper if r_p.state > 0 else math.nan,
                                            r_p.lower if r_p.state == DOUBLE else math.nan))
            self._append(us, ups, los, its, conv, swp, notes, t, res, res.note)

        u = np.array(us[::-1])
        upper = np.array(ups[::-1])
        lower = np.array(los[::-1])
        state = np.array(self._state_nodes[::-1], dtype=int)
        resid = value_matching_residuals(self.kernel, u, upper, lower, state)
        return ExerciseBoundary(u=u, upper=upper, lower=lower, state=state,
                                swapped=np.array(swp[::-1], dtype=bool), residual=resid,
                                iterations=np.array(its[::-1], dtype=int),
                                converged=np.array(conv[::-1], dtype=bool), note=tuple(notes[::-1]),
                                event_nodes=tuple(sorted(event_nodes)))

    def _append(self, us, ups, los, its, conv, swp, notes, t, res: NodeResult, note: str):
        if not res.converged and res.note != "capped":
            # keep sweeping: inherit the later node's values
            log.warning("node t=%.6g did not converge; inheriting neighbour values", t)
            res = NodeResult(self._state_nodes[-1], ups[-1], los[-1], res.iterations, False,
                             swp[-1], "inherited")
            note = "inherited"
        us.append(float(t))
        ups.append(res.upper if res.state > 0 else math.nan)
        los.append(res.lower if res.state == DOUBLE else math.nan)
        self._state_nodes.append(res.state)
        its.append(res.iterations)
        conv.append(res.converged)
        swp.append(res.swapped)
        notes.append(note)


# ---------------------------------------------------------------------------
# three-step procedure


def _newton2(F, x0: np.ndarray, lo: float, hi: float, xtol: float, ftol: float, max_iter: int,
             h: float) -> tuple[np.ndarray, int, bool]:
    """2x2 Newton with finite-difference Jacobian and halving line search."""
    x = np.array(x0, dtype=float)
    fx = F(x)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(fx)) <= ftol:
            return x, it - 1, True
        J = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            J[:, j] = (F(np.clip(x + e, lo, hi)) - F(np.clip(x - e, lo, hi))) / (
                np.clip(x + e, lo, hi)[j] - np.clip(x - e, lo, hi)[j])
        try:
            dx = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError:
            return x, it, False
        if not np.all(np.isfinite(dx)):
            return x, it, False
        lam, n0 = 1.0, np.max(np.abs(fx))
        while True:
            xn = np.clip(x + lam * dx, lo, hi)
            fn = F(xn)
            if np.max(np.abs(fn)) < n0 or lam < 1e-6:
                break
            lam *= 0.5
        step = np.max(np.abs(xn - x))
        x, fx = xn, fn
        if step <= xtol:
            return x, it, bool(np.max(np.abs(fx)) <= max(ftol, 1e3 * ftol))
    return x, max_iter, False


def step3_guess(x1: float, x2: float, small_eps: float) -> tuple[float, float]:
    """Initial guess for the coupled Newton solve (step 3)."""
    if x1 < small_eps or x2 < small_eps:
        return x1, x2
    if x1 > x2:
        return 1.05 * x1, 0.95 * x2
    return 0.95 * x1, 1.05 * x2


def solve_step3(prob: NodeProblem, warm: tuple[float, float], band: Optional[Band] = None,
                solver: Optional[BoundarySolver] = None) -> NodeResult:
    """Node solve for a double section by the three-step procedure.

    1. X* equation alone with X** frozen at its warm value, started at the warm X*;
    2. X** equation alone with X* frozen, started at the warm X**;
    3. coupled 2x2 Newton from ``step3_guess(X*_1, X**_1)``.

    ``band`` (from the node scan) supplies safeguarding brackets; when the
    Newton iterations leave them, the bracketed edge roots are used instead.
    If the coupled solve fails the step-1/step-2 values are returned and the
    node is noted ``decoupled``.
    """
    K = prob.K
    cfg = solver.cfg if solver is not None else SolverConfig()
    small_eps = cfg.small_eps_rel * K
    lo_b, hi_b = small_eps, K * (1.0 - 1e-9)
    a_w, b_w = warm
    a_w = a_w if a_w is not None and np.isfinite(a_w) else K
    b_w = b_w if b_w is not None and np.isfinite(b_w) else max(small_eps, 0.5 * K * abs(prob.r_t / prob.q_t)
                                                                if prob.q_t != 0.0 else small_eps)
    b_w = min(max(b_w, lo_b), hi_b)
    fd = 1e-7 * K

    def scalar(f, guess, bracket):
        if bracket is not None:
            xl, xr, fl, fr = bracket
            if xl <= guess <= xr:
                r = safeguarded_newton(f, guess, xl, xr, xtol=cfg.tol_root, max_iter=cfg.max_iter,
                                       fd_step=fd)
            else:
                r = safeguarded_newton(f, guess, lo_b, hi_b, xtol=cfg.tol_root,
                                       max_iter=cfg.max_iter, fd_step=fd)
                if not (r.converged and xl <= r.x <= xr):
                    fl, fr = f(xl), f(xr)
                    if fl * fr <= 0.0:
                        r = bisect(f, xl, xr, fl, fr, xtol=cfg.tol_root * K, max_iter=cfg.max_iter + 100)
            return r
        return safeguarded_newton(f, guess, lo_b, hi_b, xtol=cfg.tol_root, max_iter=cfg.max_iter,
                                  fd_step=fd)

    hi_br = band.hi_bracket if band is not None else None
    lo_br = band.lo_bracket if band is not None else None
    # step 1 and step 2
    r1 = scalar(lambda a: prob.residual(a, a, b_w), min(max(a_w, lo_b), hi_b), hi_br)
    r2 = scalar(lambda b: prob.residual(b, a_w, b), b_w, lo_br)
    x1, x2 = r1.x, r2.x
    iters = r1.iterations + r2.iterations
    # step 3
    g = np.array(step3_guess(x1, x2, small_eps))
    F = lambda v: prob.pair_residual(v[0], v[1])
    ftol = max(1e-9 * K, 10.0 * cfg.tol_root * K)
    if np.max(np.abs(F(np.array([x1, x2])))) <= 0.1 * ftol:
        sol, it3, ok = np.array([x1, x2]), 0, True
    else:
        sol, it3, ok = _newton2(F, g, lo_b, hi_b, cfg.tol_root * K, ftol, cfg.max_iter, fd)
    iters += it3
    note = ""
    if not ok:
        sol = np.array([x1, x2])
        note = "decoupled"
        ok = bool(r1.converged and r2.converged)
    a, b = float(sol[0]), float(sol[1])
    # the scan brackets identify the edges of the exercise band; keep the
    # Newton answer only if it lands on them
    if band is not None and hi_br is not None and lo_br is not None:
        in_hi = hi_br[0] <= a <= hi_br[1] or abs(prob.f_on(a)) <= ftol and _near(a, hi_br)
        in_lo = lo_br[0] <= b <= lo_br[1] or abs(prob.f_on(b)) <= ftol and _near(b, lo_br)
        if not (in_hi and in_lo):
            ra = bisect(prob.f_on, *hi_br, xtol=cfg.tol_root * K, max_iter=cfg.max_iter + 100)
            rb = bisect(prob.f_on, *lo_br, xtol=cfg.tol_root * K, max_iter=cfg.max_iter + 100)
            a, b = ra.x, rb.x
            iters += ra.iterations + rb.iterations
            ok = ra.converged and rb.converged
            note = "bracketed"
    return NodeResult(DOUBLE, upper=a, lower=b, iterations=iters, converged=ok,
                      swapped=bool(b > a), note=note)


def _near(x, bracket) -> bool:
    xl, xr = bracket[0], bracket[1]
    w = max(xr - xl, 1e-12)
    return xl - w <= x <= xr + w


# ---------------------------------------------------------------------------
# residuals and public solve entry points


def value_matching_residuals(kernel, u, upper, lower, state, call: bool = False) -> np.ndarray:
    """``|P(u_k, b) - payoff(b)|`` at every present boundary value (max of both)."""
    out = np.zeros(len(u))
    K = kernel.K
    for k in range(len(u) - 1):
        xs = [v for v, ok in ((upper[k], state[k] > 0), (lower[k], state[k] == DOUBLE)) if ok]
        if not xs:
            continue
        xs = np.array(xs, dtype=float)
        nodes = u[k:]
        vals = eep_integrand(kernel, u[k], xs, nodes, upper[k:], lower[k:], call=call)
        eep = vals @ trapezoid_weights(nodes)
        if call:
            price = np.atleast_1d(kernel.european_call(u[k], xs)) + eep
            out[k] = float(np.max(np.abs(price - (xs - K))))
        else:
            price = np.atleast_1d(kernel.european(u[k], xs)) + eep
            out[k] = float(np.max(np.abs(price - (K - xs))))
    return out


def _grid_for(kernel, grid, config: SolverConfig) -> np.ndarray:
    if grid is None:
        return backward_grid(kernel.t0, kernel.T, config.N)
    return np.asarray(grid, dtype=float)


def solve_single(model, grid=None, config: Optional[SolverConfig] = None) -> ExerciseBoundary:
    """Single upper boundary (exercise below it); lower boundary read as 0."""
    config = config or SolverConfig()
    kernel = kernel_for(model)
    return BoundarySolver(kernel, config, mode="single").solve(_grid_for(kernel, grid, config))


def solve_double(model, grid=None, config: Optional[SolverConfig] = None) -> ExerciseBoundary:
    """Coupled double-boundary sweep (double nodes use :func:`solve_step3`)."""
    config = config or SolverConfig()
    kernel = kernel_for(model)
    check = getattr(kernel, "check_american", None)
    if check is not None:
        check()
    return BoundarySolver(kernel, config, mode="auto").solve(_grid_for(kernel, grid, config))


def solve_mixed(model, grid=None, config: Optional[SolverConfig] = None) -> ExerciseBoundary:
    """Sweep across regime switches; every node sees the full later history of
    both boundaries, with an absent lower boundary entering as level 0."""
    return solve_double(model, grid, config)


def solve_boundary(model, grid=None, config: Optional[SolverConfig] = None) -> ExerciseBoundary:
    return solve_double(model, grid, config)


def solve_call_boundary(model: ModelSpec, grid=None, config: Optional[SolverConfig] = None,
                        x_cap: float = 50.0) -> ExerciseBoundary:
    """Upper exercise boundary of the American call (exercise above it), GBM with q >= 0."""
    if model.kind != "gbm":
        raise UnsupportedRegimeError("call boundary is implemented for the GBM model only")
    config = config or SolverConfig()
    kernel = GBMKernel(model)
    g = _grid_for(kernel, grid, config)
    if np.any(model.q(np.linspace(g[0], g[-1], 257)) < 0.0):
        raise UnsupportedRegimeError("call boundary requires q(u) >= 0")
    K = model.K
    r_T, q_T = model.r(model.T), model.q(model.T)
    up_T = K * max(1.0, r_T / q_T) if q_T > 0.0 else math.nan
    us, ups = [g[-1]], [up_T]
    its, conv = [0], [True]
    xs = np.geomspace(K * (1.0 + 1e-9), x_cap * K, config.scan_points)
    for t in g[-2::-1]:
        fu, fup = np.array(us[::-1]), np.array(ups[::-1])
        prob = NodeProblem(kernel, t, fu, fup, np.full_like(fu, np.nan), call=True)
        fs = prob.f_on(xs)
        pos = fs > 0.0
        if not pos[-1]:
            us.append(t); ups.append(math.nan); its.append(0); conv.append(True)
            continue
        j = len(xs) - 1
        while j > 0 and pos[j - 1]:
            j -= 1
        if j == 0:
            us.append(t); ups.append(xs[0]); its.append(0); conv.append(False)
            continue
        res = bisect(prob.f_on, xs[j - 1], xs[j], fs[j - 1], fs[j], xtol=config.tol_root * K)
        us.append(t); ups.append(res.x); its.append(res.iterations); conv.append(res.converged)
    u = np.array(us[::-1])
    upper = np.array(ups[::-1])
    lower = np.full_like(upper, np.nan)
    state = np.where(np.isfinite(upper), SINGLE, EMPTY)
    resid = value_matching_residuals(kernel, u, upper, lower, state, call=True)
    return ExerciseBoundary(u=u, upper=upper, lower=lower, state=state,
                            swapped=np.zeros(u.size, dtype=bool), residual=resid,
                            iterations=np.array(its[::-1]), converged=np.array(conv[::-1]),
                            note=("",) * u.size, kind="call")


# ---------------------------------------------------------------------------
# events


def _crossing(t0, g0, t1, g1, level) -> float:
    if g1 == g0:
        return 0.5 * (t0 + t1)
    return t0 + (level - g0) * (t1 - t0) / (g1 - g0)


def detect_events(boundary: ExerciseBoundary, K: Optional[float] = None,
                  config: Optional[SolverConfig] = None, wall_time: float = 0.0) -> SolveReport:
    """Scan the gap and the lower boundary for emergence/collapse/reappearance/swap.

    Times are linear interpolations of the crossings in forward time.  A
    collapse followed by a reappearance is also reported as an intersection at
    the midpoint of the window the band spends closed, and as a swap at the
    collapse time (stored boundaries are always ordered, so the label
    exchange is reported rather than applied).  A sign change of the stored
    gap between two double nodes is a swap and an intersection as well.
    """
    config = config or SolverConfig()
    if K is None:
        fin = boundary.upper[np.isfinite(boundary.upper)]
        K = float(fin[-1]) if fin.size else 1.0
    small_eps, gap_eps = config.small_eps_rel * K, config.gap_eps_rel * K
    rows = [(float(t), int(s_), float(a), float(b)) for t, s_, a, b in
            zip(boundary.u, boundary.state, boundary.upper, boundary.lower)]
    rows.extend((float(t), int(s_), float(a), float(b)) for t, s_, a, b in boundary.event_nodes)
    rows.sort(key=lambda r: r[0])
    u = np.array([r[0] for r in rows])
    st = np.array([r[1] for r in rows])
    up = np.where(st > 0, [r[2] for r in rows], 0.0)
    lo = np.where(st == DOUBLE, [r[3] for r in rows], 0.0)
    both = (st == DOUBLE) & (up > small_eps) & (lo > small_eps)
    # unsigned band width for collapse/reappearance, signed for swaps
    width = np.where(st == EMPTY, 0.0, np.where(st == DOUBLE, np.abs(up - lo), np.inf))
    events = []
    for k in range(len(u) - 1):
        t0, t1 = u[k], u[k + 1]
        # lower boundary leaves small_eps (forward in time)
        had_lo = st[k] == DOUBLE and lo[k] > small_eps
        has_lo = st[k + 1] == DOUBLE and lo[k + 1] > small_eps
        if st[k] == SINGLE and has_lo:
            events.append(Event("emergence", _crossing(t0, 0.0, t1, lo[k + 1], small_eps)))
        elif st[k] == DOUBLE and not had_lo and has_lo:
            events.append(Event("emergence", _crossing(t0, lo[k], t1, lo[k + 1], small_eps)))
        w0, w1 = width[k], width[k + 1]
        if np.isfinite(w0) and np.isfinite(w1):
            if w0 >= gap_eps > w1:
                events.append(Event("collapse", _crossing(t0, w0, t1, w1, gap_eps)))
            elif w0 < gap_eps <= w1:
                events.append(Event("reappearance", _crossing(t0, w0, t1, w1, gap_eps)))
        if both[k] and both[k + 1]:
            g0, g1 = up[k] - lo[k], up[k + 1] - lo[k + 1]
            if g0 * g1 < 0.0:
                events.append(Event("swap", _crossing(t0, g0, t1, g1, 0.0)))
    events.extend(Event("intersection", e.time) for e in list(events) if e.kind == "swap")
    collapses = [e.time for e in events if e.kind == "collapse"]
    reapp = [e.time for e in events if e.kind == "reappearance"]
    for tc in collapses:
        later = [t for t in reapp if t > tc]
        if later:
            events.append(Event("intersection", 0.5 * (tc + later[0])))
            # branches continued through the pinch exchange order: the band
            # before the collapse carries the later band's labels swapped
            events.append(Event("swap", tc))
    events.sort(key=lambda e: (e.time, e.kind))
    return SolveReport(converged=boundary.converged.copy(), max_residual=boundary.vm_residual,
                       events=events, wall_time=wall_time)


def solve_with_report(model, grid=None, config: Optional[SolverConfig] = None,
                      mode: str = "auto") -> tuple[ExerciseBoundary, SolveReport]:
    config = config or SolverConfig()
    kernel = kernel_for(model)
    t0 = time.perf_counter()
    b = BoundarySolver(kernel, config, mode=mode).solve(_grid_for(kernel, grid, config))
    wall = time.perf_counter() - t0
    return b, detect_events(b, kernel.K, config, wall)
