"""Shared model definitions and cached solves for the test suite.

Solves are expensive (seconds for GBM, tens of seconds for OU), so each
model is solved once per test session and reused across files.
"""

from __future__ import annotations

import functools

import numpy as np

from floatbound.curves import ModelSpec, ParamCurve
from floatbound.solver import SolverConfig, solve_with_report

E = ParamCurve.exp_affine
C = ParamCurve.constant

K = 100.0
SPOTS = np.arange(60.0, 141.0, 10.0)


def single_case() -> ModelSpec:
    """Positive decaying rate and yield; r(T)/q(T) > 1 so X*(T-) = K."""
    return ModelSpec("gbm", K, 1.0, r=E(0.05, 0.5), q=E(0.02, 0.2), sigma=C(0.3))


def double_case(sigma: float = 0.3) -> ModelSpec:
    """q < r < 0 on [0, 1]: two boundaries."""
    return ModelSpec("gbm", K, 1.0, r=E(-0.1, 0.2, 0.05), q=E(-0.2, -0.5, 0.13), sigma=C(sigma))


def mixed_case() -> ModelSpec:
    """r crosses zero at ln(2)/1.4; q < 0 throughout; rising volatility."""
    return ModelSpec("gbm", K, 1.0, r=E(-0.04, 1.4, 0.02), q=E(-0.05, -0.5, -0.01), sigma=E(0.6, -0.2))


def floating_case(sigma: float) -> ModelSpec:
    """r turns negative at ln(5/3) with q < 0: floating boundaries."""
    return ModelSpec("gbm", K, 1.0, r=E(0.05, 1.0, -0.03), q=E(0.01, -0.8, -0.04), sigma=C(sigma))


def ou_case() -> ModelSpec:
    return ModelSpec("ou", K, 1.0, r=C(0.02), sigma=C(20.0), kappa=C(1.0), theta=C(90.0))


FLOATING_SIGMAS = (0.2, 0.4, 0.5087, 0.54, 0.7)

GBM_CASES = {
    "single": single_case,
    "double": double_case,
    "double_lowvol": lambda: double_case(0.1),
    "mixed": mixed_case,
    **{f"floating_{s:g}": (lambda s=s: floating_case(s)) for s in FLOATING_SIGMAS},
}


def model(name: str) -> ModelSpec:
    if name == "ou":
        return ou_case()
    return GBM_CASES[name]()


@functools.lru_cache(maxsize=None)
def solved(name: str, N: int = 200):
    """``(model, kernel, boundary, report)`` for a named case."""
    from floatbound.gbm import kernel_for

    m = model(name)
    kernel = ou_kernel() if name == "ou" else kernel_for(m)
    b, rep = solve_with_report(kernel, config=SolverConfig(N=N))
    return m, kernel, b, rep


@functools.lru_cache(maxsize=None)
def ou_kernel():
    from floatbound.ou import OUKernel

    return OUKernel.build(ou_case())
