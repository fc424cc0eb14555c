"""Volatility study for the floating-boundary model.

Runs ``floatbound sweep`` on ``configs/floating.ini`` (sigma in
{0.2, 0.4, 0.5087, 0.54, 0.7}) and prints the event table.  The per-sigma
boundary CSVs are the data behind the boundary-curve figures.

    python scripts/sigma_sweep.py [--out out/floating] [--workers 2]
"""

import argparse
import csv
import sys
from pathlib import Path

from floatbound.cli import EXIT_OK, load_config, run

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "floating.ini"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.output_dir
    status = run("sweep", cfg, out, workers=args.workers)
    if status != EXIT_OK:
        print(f"sweep exited with status {status}; see {out / 'manifest.json'}", file=sys.stderr)
        return status
    with open(out / "sweep_events.csv") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    print(f"boundary and price CSVs written to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
