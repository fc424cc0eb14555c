"""Finite-difference oracle for European and American puts under both models.

Crank-Nicolson in time (Rannacher start-up: the first two steps are replaced
by four implicit half steps to damp the payoff kink), central differences in
space, coefficients frozen at the midpoint of each step.  GBM is solved in
log-spot, OU in raw spot with absorbing Dirichlet data at zero.  The American
obstacle problem is solved at every step by policy (Howard) iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .curves import ModelSpec
from .errors import DomainError, GridError

CONTACT_EPS_REL = 1e-7


@dataclass(frozen=True)
class FDGrid:
    """Spatial intervals ``M``, time steps ``Nt``; domain chosen automatically
    from the queries unless ``x_min``/``x_max`` are given."""

    M: int = 800
    Nt: int = 400
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    theta: float = 0.5
    rannacher: bool = True
    margin_sd: float = 6.0

    def __post_init__(self):
        if self.M < 16 or self.Nt < 16:
            raise GridError("FD grid needs M, Nt >= 16")
        if self.M % 2:
            raise GridError("M must be even")

    def refined(self, factor: int = 2) -> "FDGrid":
        return replace(self, M=self.M * factor, Nt=self.Nt * factor)


@dataclass
class FDResult:
    x: np.ndarray  # query spots
    price: np.ndarray
    nodes: np.ndarray  # spot values of the grid nodes
    values: np.ndarray  # solution at time t on the nodes
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))  # descending from T
    contact: Optional[np.ndarray] = None  # (len(times), len(nodes)) bool
    flagged_steps: int = 0
    cell: float = 0.0  # spatial step (log units for GBM)

    def contact_edges(self, k: int) -> list[tuple[float, float]]:
        """Connected contact intervals ``(x_lo, x_hi)`` at time index ``k``."""
        if self.contact is None:
            return []
        mask = self.contact[k]
        out = []
        i, n = 0, mask.size
        while i < n:
            if mask[i]:
                j = i
                while j + 1 < n and mask[j + 1]:
                    j += 1
                out.append((float(self.nodes[i]), float(self.nodes[j])))
                i = j + 1
            else:
                i += 1
        return out

    def time_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))


def _sigma_bar_sqrt(model: ModelSpec, t: float) -> float:
    return math.sqrt(max(model.sigma.integrate_sq(t, model.T), 1e-300))


def _space(model: ModelSpec, grid: FDGrid, t: float, xq: np.ndarray):
    """Nodes in the solver coordinate, spot values, spacing, log flag."""
    K = model.K
    sd = _sigma_bar_sqrt(model, t)
    M = grid.M
    if model.kind == "gbm":
        drift = abs(model.r.integrate(t, model.T) - model.q.integrate(t, model.T))
        need = float(np.max(np.abs(np.log(xq / K)))) if xq.size else 0.0
        if grid.x_min is not None and grid.x_max is not None:
            L = min(math.log(K / grid.x_min), math.log(grid.x_max / K))
            if need + 5.0 * sd > L:
                raise GridError("FD domain does not cover the queries with a 5 sd margin")
        else:
            L = need + grid.margin_sd * sd + drift + 0.05
        s = math.log(K) + np.linspace(-L, L, M + 1)
        return s, np.exp(s), 2.0 * L / M, True
    # OU: raw spot on [0, x_max] with K on a node
    theta_max = float(np.max(model.theta(np.linspace(t, model.T, 65))))
    x_top = max(K, theta_max, float(np.max(xq)) if xq.size else K)
    x_max = grid.x_max if grid.x_max is not None else x_top + grid.margin_sd * sd * 1.5 + 0.1 * K
    if xq.size and float(np.max(xq)) + 5.0 * sd > x_max:
        raise GridError("FD domain does not cover the queries with a 5 sd margin")
    m_K = max(1, int(round(M * K / x_max)))
    h = K / m_K
    x = h * np.arange(M + 1)
    return x, x, h, False


def _coefficients(model: ModelSpec, tm: float, x: np.ndarray, log_space: bool):
    sig2 = model.sigma(tm) ** 2
    r = model.r(tm)
    if log_space:
        a = np.full_like(x, 0.5 * sig2)
        b = np.full_like(x, r - model.q(tm) - 0.5 * sig2)
    else:
        a = np.full_like(x, 0.5 * sig2)
        b = model.kappa(tm) * (model.theta(tm) - x)
    c = np.full_like(x, -r)
    return a, b, c


def _operator_bands(a, b, c, h):
    lo = a / h ** 2 - b / (2.0 * h)
    di = -2.0 * a / h ** 2 + c
    up = a / h ** 2 + b / (2.0 * h)
    return lo, di, up


def _apply(lo, di, up, v):
    out = di * v
    out[1:] += lo[1:] * v[:-1]
    out[:-1] += up[:-1] * v[1:]
    return out


def _boundary_values(model: ModelSpec, t: float, spots: np.ndarray, american: bool):
    """Dirichlet values at the two ends of the grid at time ``t``."""
    K, T = model.K, model.T
    if model.kind == "ou":
        F = math.exp(model.r.integrate(0.0, t))  # 1 / D(0, t)
        return K * F, 0.0
    x0 = spots[0]
    D = math.exp(-model.r.integrate(t, T))
    Dq = math.exp(-model.q.integrate(t, T))
    low = K * D - x0 * Dq
    if american:
        # a nearly worthless asset is effectively a deterministic claim:
        # exercise at the best deterministic date
        us = np.linspace(t, T, 129)
        Ds = np.exp(-model.r.integrate(t, us))
        Dqs = np.exp(-model.q.integrate(t, us))
        low = max(K - x0, float(np.max(K * Ds - x0 * Dqs)))
    return low, 0.0


def _solve(model: ModelSpec, grid: FDGrid, t: float, xq, american: bool, store_contact: bool):
    if not (model.t0 - 1e-12 <= t < model.T):
        raise DomainError("need t0 <= t < T")
    xq = np.atleast_1d(np.asarray(xq, dtype=float))
    if np.any(xq <= 0.0) and model.kind == "gbm":
        raise DomainError("GBM queries must be positive")
    s, spots, h, log_space = _space(model, grid, t, xq)
    K = model.K
    payoff = np.maximum(K - spots, 0.0)
    v = payoff.copy()
    # time steps: Rannacher start (two CN steps -> four implicit half steps)
    edges = np.linspace(model.T, t, grid.Nt + 1)
    steps = []
    for n in range(grid.Nt):
        t_hi, t_lo = edges[n], edges[n + 1]
        if grid.rannacher and n < 2:
            mid = 0.5 * (t_hi + t_lo)
            steps += [(t_hi, mid, 1.0), (mid, t_lo, 1.0)]
        else:
            steps.append((t_hi, t_lo, grid.theta))
    times = [model.T]
    contacts = [] if store_contact else None
    ceps = CONTACT_EPS_REL * K
    if store_contact:
        contacts.append((v - payoff <= ceps) & (payoff > 0.0))
    flagged = 0
    active = np.zeros(v.size, dtype=bool)
    for t_hi, t_lo, th in steps:
        dt = t_hi - t_lo
        tm = 0.5 * (t_hi + t_lo)
        a, b, c = _coefficients(model, tm, s, log_space)
        lo, di, up = _operator_bands(a, b, c, h)
        rhs = v + (1.0 - th) * dt * _apply(lo, di, up, v)
        # implicit matrix I - th*dt*L in banded form
        ab = np.zeros((3, v.size))
        ab[0, 1:] = -th * dt * up[:-1]
        ab[1, :] = 1.0 - th * dt * di
        ab[2, :-1] = -th * dt * lo[1:]
        lval, hval = _boundary_values(model, t_lo, spots, american)
        ab[1, 0], ab[0, 1] = 1.0, 0.0
        ab[1, -1], ab[2, -2] = 1.0, 0.0
        rhs[0], rhs[-1] = lval, hval
        if not american:
            v = solve_banded((1, 1), ab, rhs)
        else:
            v, active, ok = _policy_iteration(ab, rhs, payoff, active)
            flagged += 0 if ok else 1
        times.append(t_lo)
        if store_contact:
            contacts.append((v - payoff <= ceps) & (payoff > 0.0))
    cs = CubicSpline(s, v)
    sq = np.log(xq) if log_space else xq
    price = cs(sq)
    return FDResult(x=xq, price=price, nodes=spots, values=v, times=np.array(times),
                    contact=np.array(contacts) if store_contact else None, flagged_steps=flagged,
                    cell=h)


def _policy_iteration(ab, rhs, g, active, max_sweeps: int = 200):
    """Solve ``min(A v - rhs, v - g) = 0`` (boundary rows fixed) by Howard's method."""
    act = active.copy()
    act[0] = act[-1] = False
    v = None
    for sweep in range(max_sweeps):
        ab2 = ab.copy()
        r2 = rhs.copy()
        idx = np.nonzero(act)[0]
        ab2[1, idx] = 1.0
        r2[idx] = g[idx]
        # off-diagonals of row i live at ab[0, i+1] and ab[2, i-1]
        ab2[0, idx + 1] = 0.0
        ab2[2, idx - 1] = 0.0
        v = solve_banded((1, 1), ab2, r2)
        Av = ab[1] * v
        Av[:-1] += ab[0, 1:] * v[1:]
        Av[1:] += ab[2, :-1] * v[:-1]
        res_pde = Av - rhs
        new = (v - g) < res_pde
        new[0] = new[-1] = False
        if np.array_equal(new, act):
            return v, act, True
        act = new
    return v, act, False


def fd_european(model: ModelSpec, grid: Optional[FDGrid] = None, t: Optional[float] = None,
                x_query=None) -> FDResult:
    grid = grid or FDGrid()
    t = model.t0 if t is None else t
    xq = np.array([model.K]) if x_query is None else x_query
    return _solve(model, grid, t, xq, american=False, store_contact=False)


def fd_american(model: ModelSpec, grid: Optional[FDGrid] = None, t: Optional[float] = None,
                x_query=None, store_contact: bool = True) -> FDResult:
    grid = grid or FDGrid()
    t = model.t0 if t is None else t
    xq = np.array([model.K]) if x_query is None else x_query
    return _solve(model, grid, t, xq, american=True, store_contact=store_contact)


@dataclass
class Richardson:
    prices: list  # per refinement level (arrays over queries)
    extrapolated: np.ndarray
    ratio: np.ndarray  # (P0 - P1) / (P1 - P2) when three levels are available

    @property
    def error_estimate(self) -> np.ndarray:
        return np.abs(self.prices[-1] - self.prices[-2]) / 3.0


def richardson(model: ModelSpec, grid: Optional[FDGrid] = None, t: Optional[float] = None,
               x_query=None, american: bool = False, levels: int = 3) -> Richardson:
    """Prices on ``levels`` successively doubled grids, extrapolated assuming order 2."""
    grid = grid or FDGrid()
    solve = fd_american if american else fd_european
    prices = []
    g = grid
    for _ in range(levels):
        kw = {"store_contact": False} if american else {}
        prices.append(solve(model, g, t, x_query, **kw).price)
        g = g.refined()
    ext = prices[-1] + (prices[-1] - prices[-2]) / 3.0
    ratio = np.full_like(ext, np.nan)
    if levels >= 3:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (prices[-3] - prices[-2]) / (prices[-2] - prices[-1])
    return Richardson(prices=prices, extrapolated=ext, ratio=ratio)


def quad_density_check(model: ModelSpec, t: float, x: float, u: float) -> float:
    """Total mass of the transition density of ``X_u`` given ``X_t = x``."""
    if not t < u <= model.T:
        raise DomainError("need t < u <= T")
    if model.kind == "gbm":
        if x <= 0.0:
            raise DomainError("GBM spot must be positive")
        m = math.log(x) + model.r.integrate(t, u) - model.q.integrate(t, u) \
            - 0.5 * model.sigma.integrate_sq(t, u)
        v = model.sigma.integrate_sq(t, u)

        def dens(y):
            return math.exp(-(math.log(y) - m) ** 2 / (2 * v)) / (y * math.sqrt(2 * math.pi * v))

        c = math.exp(m)
        sd = math.sqrt(v)
        parts = [0.0, c * math.exp(-12 * sd), c, c * math.exp(12 * sd), math.inf]
    else:
        from .ou import ou_density, ou_moments

        if x <= 0.0:
            return 0.0
        mu, var, _ = ou_moments(model, t, u, x)
        sd = math.sqrt(var)

        def dens(y):
            return float(ou_density(model, t, x, u, np.array([y]))[0])

        parts = sorted({0.0, max(0.0, mu - 12 * sd), max(0.0, mu), max(0.0, mu + 12 * sd)}) + [math.inf]
    total = 0.0
    for a, b in zip(parts[:-1], parts[1:]):
        if b > a:
            total += quad(dens, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return total
