"""Integral-equation prices against the finite-difference oracle.

For each test model, solves the exercise boundary, prices the American put
at t = 0 over a spot ladder and compares with a Richardson-extrapolated
Crank-Nicolson price.

    python scripts/compare_oracle.py [--N 200] [--M 400] [--levels 2]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from cases import K, SPOTS, double_case, floating_case, mixed_case, ou_case, single_case  # noqa: E402

from floatbound.gbm import american_put  # noqa: E402
from floatbound.solver import kernel_for  # noqa: E402
from floatbound.oracle import FDGrid, richardson  # noqa: E402
from floatbound.solver import SolverConfig, solve_with_report  # noqa: E402

MODELS = {
    "single": single_case,
    "double": double_case,
    "mixed": mixed_case,
    "floating_0.54": lambda: floating_case(0.54),
    "ou": ou_case,
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=200)
    ap.add_argument("--M", type=int, default=400)
    ap.add_argument("--levels", type=int, default=2)
    args = ap.parse_args()

    for name, make in MODELS.items():
        m = make()
        kernel = kernel_for(m)
        b, _ = solve_with_report(kernel, config=SolverConfig(N=args.N))
        price = american_put(kernel, 0.0, SPOTS, b).price
        ref = richardson(m, FDGrid(M=args.M, Nt=args.M // 2), 0.0, SPOTS, american=True, levels=args.levels)
        err = np.abs(price - ref.extrapolated) / np.maximum(ref.extrapolated, 5e-3 * K)
        print(f"\n{name}: max relative deviation {err.max():.2e}")
        print("    spot   integral         fd       diff")
        for x, p, f in zip(SPOTS, price, ref.extrapolated):
            print(f"  {x:6.1f} {p:10.5f} {f:10.5f} {p - f:+10.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
