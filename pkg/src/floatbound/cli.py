"""Batch front-end: ``floatbound <subcommand> --config run.ini``.

Configuration is an INI file (sections of ``key = value`` lines).  Every key
is listed with its default in ``SCHEMA`` below and in ``configs/schema.ini``.
Environment variables ``FLOATBOUND_<SECTION>_<KEY>`` override file values.

Exit status: 0 ok, 2 configuration error, 3 numerical non-convergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import scipy

from .curves import ModelSpec, ParamCurve
from .errors import ComplexityError, ConfigError, DomainError, GridError, UnsupportedRegimeError
from .regime import segment_timeline, timeline_csv

log = logging.getLogger("floatbound")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_VERIFY = 0, 2, 3, 4
ENV_PREFIX = "FLOATBOUND_"
SUBCOMMANDS = ("regimes", "boundary", "price", "hedge", "verify", "sweep")


def _float_list(text: str) -> list[float]:
    """``"60, 70, 80"`` or ``"60:140:10"`` (inclusive range)."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0.0:
            raise ValueError("range must be start:stop:step with step > 0")
        n = int(math.floor((parts[1] - parts[0]) / parts[2] + 1e-9)) + 1
        return [parts[0] + i * parts[2] for i in range(n)]
    return [float(p) for p in text.replace(";", ",").split(",") if p.strip()]


_CURVE_RE = re.compile(r"^exp_affine\(\s*([^,]+),\s*([^,]+)(?:,\s*([^,]+))?\s*\)$")


def parse_curve(text: str) -> ParamCurve:
    """``0.05`` (constant) or ``exp_affine(A, B[, C])`` for ``A exp(-B t) + C``."""
    text = text.strip()
    m = _CURVE_RE.match(text)
    if m:
        a, b, c = m.group(1), m.group(2), m.group(3) or "0"
        return ParamCurve.exp_affine(float(a), float(b), float(c))
    return ParamCurve.constant(float(text))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def conv(text):
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t
    return conv


# (section, key) -> (converter, default, description)
SCHEMA: dict[tuple[str, str], tuple[Callable[[str], Any], Optional[str], str]] = {
    ("model", "kind"): (_choice("gbm", "ou"), "gbm", "gbm or ou"),
    ("model", "K"): (float, "100", "strike"),
    ("model", "T"): (float, "1", "maturity"),
    ("model", "t0"): (float, "0", "valuation start"),
    ("model", "r"): (parse_curve, "0.05", "interest rate curve"),
    ("model", "q"): (parse_curve, "0", "dividend yield curve (gbm)"),
    ("model", "sigma"): (parse_curve, "0.3", "volatility curve (normal vol for ou)"),
    ("model", "kappa"): (parse_curve, "0", "mean-reversion speed (ou)"),
    ("model", "theta"): (parse_curve, "0", "mean-reversion level (ou)"),
    ("solver", "N"): (int, "200", "time steps of the boundary grid"),
    ("solver", "tol_root"): (float, "1e-12", "relative root tolerance"),
    ("solver", "small_eps_rel"): (float, "1e-6", "lower-boundary floor, fraction of K"),
    ("solver", "gap_eps_rel"): (float, "1e-4", "band-collapse threshold, fraction of K"),
    ("solver", "max_iter"): (int, "100", "Newton iteration cap"),
    ("solver", "scan_points"): (int, "256", "topology scan points per node"),
    ("solver", "refine_events"): (_bool, "true", "bisect event times between nodes"),
    ("solver", "refine_steps"): (int, "30", "bisection steps per event"),
    ("solver", "mode"): (_choice("auto", "single"), "auto", "auto or single"),
    ("price", "spots"): (_float_list, "60:140:10", "spot grid"),
    ("price", "times"): (_float_list, "0", "valuation times"),
    ("hedge", "spot"): (float, "100", "spot for the static hedge"),
    ("hedge", "t"): (float, "0", "valuation time for the static hedge"),
    ("verify", "fd_M"): (int, "800", "FD spatial intervals (coarsest level)"),
    ("verify", "fd_Nt"): (int, "400", "FD time steps (coarsest level)"),
    ("verify", "price_rel_tol"): (float, "0.002", "relative price tolerance"),
    ("verify", "price_abs_tol"): (float, "0.005", "absolute price tolerance, fraction of K"),
    ("verify", "boundary_cells"): (float, "2", "boundary tolerance in FD cells"),
    ("verify", "boundary_times"): (_float_list, "0.1,0.3,0.5,0.7", "times for boundary checks (fraction of T)"),
    ("verify", "ratio_lo"): (float, "3.5", "Richardson ratio lower bound"),
    ("verify", "ratio_hi"): (float, "4.5", "Richardson ratio upper bound"),
    ("sweep", "sigmas"): (_float_list, "0.2,0.4,0.5087,0.54,0.7", "volatility list"),
    ("output", "dir"): (str, "out", "output directory"),
}


@dataclass
class RunConfig:
    model: ModelSpec
    solver: dict
    price: dict
    hedge: dict
    verify: dict
    sweep: dict
    output_dir: Path
    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def solver_config(self):
        from .solver import SolverConfig

        opts = {k: v for k, v in self.solver.items() if k != "mode"}
        return SolverConfig(**opts)


def _line_numbers(text: str) -> dict:
    """``(section, key) -> line`` for location-bearing messages."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
            continue
        if "=" in s and section is not None:
            out[(section, s.split("=", 1)[0].strip())] = i
    return out


def load_config(path: Optional[str], env: Optional[dict] = None, text: Optional[str] = None) -> RunConfig:
    env = os.environ if env is None else env
    if text is None:
        if path is None:
            text = ""
        else:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
    where = path or "<config>"
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (K vs k)
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    lines = _line_numbers(text)
    sections = {s for s, _ in SCHEMA}
    values: dict[tuple[str, str], str] = {}
    for sec in parser.sections():
        if sec not in sections:
            raise ConfigError(f"{where}:{lines.get((sec, None), '?')}: unknown section [{sec}]")
        for key, val in parser.items(sec):
            if (sec, key) not in SCHEMA:
                raise ConfigError(f"{where}:{lines.get((sec, key), '?')}: unknown key '{key}' in [{sec}]")
            values[(sec, key)] = val
    by_env = {f"{ENV_PREFIX}{s.upper()}_{k.upper()}": (s, k) for s, k in SCHEMA}
    for name, val in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in by_env:
            raise ConfigError(f"environment: unknown override {name}")
        values[by_env[name]] = val
    parsed: dict[tuple[str, str], Any] = {}
    raw: dict[str, str] = {}
    for (sec, key), (conv, default, _) in SCHEMA.items():
        text_val = values.get((sec, key), default)
        raw[f"{sec}.{key}"] = text_val
        try:
            parsed[(sec, key)] = conv(text_val)
        except (ValueError, DomainError) as exc:
            loc = lines.get((sec, key))
            src = f"{where}:{loc}" if loc and (sec, key) in values else "default/environment"
            raise ConfigError(f"{src}: bad value for {sec}.{key} = {text_val!r}: {exc}") from exc

    def section(name):
        return {k: parsed[(s, k)] for s, k in SCHEMA if s == name}

    m = section("model")
    try:
        model = ModelSpec(kind=m["kind"], K=m["K"], T=m["T"], r=m["r"], sigma=m["sigma"], q=m["q"],
                          kappa=m["kappa"], theta=m["theta"], t0=m["t0"])
    except DomainError as exc:
        raise ConfigError(f"{where}: invalid model: {exc}") from exc
    cfg = RunConfig(model=model, solver=section("solver"), price=section("price"),
                    hedge=section("hedge"), verify=section("verify"), sweep=section("sweep"),
                    output_dir=Path(parsed[("output", "dir")]), raw=raw)
    try:
        cfg.solver_config()
    except (DomainError, GridError) as exc:
        raise ConfigError(f"{where}: invalid solver block: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# CSV helpers


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.17g}"


def write_csv(path: Path, header: list[str], rows, footer: Optional[list[list]] = None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    for row in footer or []:
        buf.write("#" + ",".join(fmt(v) for v in row) + "\n")
    path.write_text(buf.getvalue())
    return path


def boundary_rows(b):
    return [(u, up, lo, s, sw, res, it, ok) for u, up, lo, s, sw, res, it, ok in
            zip(b.u, b.upper, b.lower, b.state, b.swapped, b.residual, b.iterations, b.converged)]


BOUNDARY_HEADER = ["u", "upper", "lower", "state", "swapped", "vm_residual", "iterations", "converged"]


def event_footer(report) -> list[list]:
    rows = []
    for label, val in (("t_star", report.t_star), ("t_e", report.t_e), ("t_s", report.t_s)):
        rows.append(["event", label, val if val is not None else "none"])
    for e in report.events:
        rows.append(["event_detail", e.kind, e.time])
    return rows


# ---------------------------------------------------------------------------
# subcommands


class NonConvergence(RuntimeError):
    pass


class VerificationFailure(RuntimeError):
    pass


def _kernel(model):
    from .gbm import kernel_for

    return kernel_for(model)


def _solve(cfg: RunConfig, model=None):
    from .solver import solve_with_report

    model = model or cfg.model
    kernel = _kernel(model)
    b, rep = solve_with_report(kernel, config=cfg.solver_config(), mode=cfg.solver["mode"])
    return kernel, b, rep


def cmd_regimes(cfg: RunConfig, out: Path, workers: int) -> dict:
    segs = segment_timeline(cfg.model)
    (out / "regimes.csv").write_text(timeline_csv(segs))
    return {"outputs": ["regimes.csv"], "segments": len(segs)}


def cmd_boundary(cfg: RunConfig, out: Path, workers: int) -> dict:
    kernel, b, rep = _solve(cfg)
    write_csv(out / "boundary.csv", BOUNDARY_HEADER, boundary_rows(b), event_footer(rep))
    info = {"outputs": ["boundary.csv"], "solve_seconds": rep.wall_time,
            "unconverged_nodes": int(np.sum(~b.converged))}
    if not np.all(b.converged):
        raise NonConvergence(info)
    return info


def _price_rows(kernel, b, times, spots):
    from .gbm import american_put

    rows = []
    K = kernel.K
    for t in times:
        res = american_put(kernel, t, np.asarray(spots, dtype=float), b)
        for x, pe, eep, pa in zip(res.x, res.european, res.eep, res.price):
            rows.append((t, x, pe, eep, pa, max(K - x, 0.0)))
    return rows


PRICE_HEADER = ["t", "x", "european", "eep", "american", "payoff"]


def cmd_price(cfg: RunConfig, out: Path, workers: int) -> dict:
    kernel, b, rep = _solve(cfg)
    rows = _price_rows(kernel, b, cfg.price["times"], cfg.price["spots"])
    write_csv(out / "price.csv", PRICE_HEADER, rows)
    write_csv(out / "boundary.csv", BOUNDARY_HEADER, boundary_rows(b), event_footer(rep))
    info = {"outputs": ["price.csv", "boundary.csv"], "solve_seconds": rep.wall_time}
    if not np.all(b.converged):
        raise NonConvergence(info)
    return info


def cmd_hedge(cfg: RunConfig, out: Path, workers: int) -> dict:
    from .ou import direct_eep, static_hedge

    if cfg.model.kind != "ou":
        raise ConfigError("hedge requires [model] kind = ou")
    kernel, b, rep = _solve(cfg)
    t, x = cfg.hedge["t"], cfg.hedge["spot"]
    h = static_hedge(kernel, t, x, b)
    (out / "hedge.csv").write_text(h.to_csv())
    direct = direct_eep(kernel, t, x, b)
    write_csv(out / "hedge_summary.csv", ["t", "x", "eep_static", "eep_direct", "difference"],
              [(t, x, h.eep, direct, h.eep - direct)])
    info = {"outputs": ["hedge.csv", "hedge_summary.csv"], "eep_static": h.eep, "eep_direct": direct}
    if not np.all(b.converged):
        raise NonConvergence(info)
    return info


def verify_rows(cfg: RunConfig, kernel, b) -> list[tuple]:
    """``(check, value, tolerance, passed)`` rows comparing solver and FD oracle."""
    from .gbm import american_put
    from .oracle import FDGrid, fd_american, richardson

    model = cfg.model
    v = cfg.verify
    K, t0, T = model.K, model.t0, model.T
    grid = FDGrid(M=v["fd_M"], Nt=v["fd_Nt"])
    spots = np.asarray(cfg.price["spots"], dtype=float)
    rows = []
    ra = richardson(model, grid, t0, spots, american=True, levels=2)
    ours = american_put(kernel, t0, spots, b).price
    for x, p, ref in zip(spots, ours, ra.extrapolated):
        tol = max(v["price_rel_tol"] * abs(ref), v["price_abs_tol"] * K)
        err = abs(p - ref)
        rows.append((f"price_x={x:g}", err, tol, err <= tol))
    re_ = richardson(model, grid, t0, np.array([K]), american=False, levels=3)
    ratio = float(re_.ratio[0])
    rows.append(("richardson_ratio_european", ratio, f"[{v['ratio_lo']:g},{v['ratio_hi']:g}]",
                 v["ratio_lo"] <= ratio <= v["ratio_hi"]))
    fine = fd_american(model, grid.refined(), t0, spots)
    for frac in v["boundary_times"]:
        t = t0 + frac * (T - t0)
        k = fine.time_index(t)
        tk = float(fine.times[k])
        edges = fine.contact_edges(k)
        up, lo = b.at(tk)
        cell = fine.cell
        if not edges:
            ok = not np.isfinite(up)
            rows.append((f"boundary_upper_t={tk:.6g}", up if np.isfinite(up) else 0.0, "absent", ok))
            continue
        hi_fd = max(e[1] for e in edges)
        if model.kind == "gbm":
            dist = abs(math.log(up / hi_fd)) / cell if np.isfinite(up) else math.inf
        else:
            dist = abs(up - hi_fd) / cell if np.isfinite(up) else math.inf
        rows.append((f"boundary_upper_t={tk:.6g}", dist, v["boundary_cells"], dist <= v["boundary_cells"]))
    return rows


def cmd_verify(cfg: RunConfig, out: Path, workers: int) -> dict:
    kernel, b, rep = _solve(cfg)
    rows = verify_rows(cfg, kernel, b)
    write_csv(out / "verify.csv", ["check", "value", "tolerance", "pass"], rows)
    failed = [r[0] for r in rows if not r[3]]
    info = {"outputs": ["verify.csv"], "failed": failed}
    if not np.all(b.converged):
        raise NonConvergence(info)
    if failed:
        raise VerificationFailure(info)
    return info


def _sweep_one(args):
    raw, sigma, text = args
    cfg = load_config(None, env={}, text=text)
    model = cfg.model.replace(sigma=ParamCurve.constant(sigma))
    kernel, b, rep = _solve(cfg, model)
    prices = _price_rows(kernel, b, cfg.price["times"], cfg.price["spots"])
    return sigma, boundary_rows(b), event_footer(rep), prices, bool(np.all(b.converged)), rep.wall_time


def _config_text(cfg: RunConfig) -> str:
    """Canonical INI text of the resolved configuration (no environment)."""
    lines = []
    current = None
    for key in sorted(cfg.raw):
        sec, k = key.split(".", 1)
        if sec != current:
            lines.append(f"[{sec}]")
            current = sec
        lines.append(f"{k} = {cfg.raw[key]}")
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg: RunConfig, out: Path, workers: int) -> dict:
    text = _config_text(cfg)
    jobs = [(cfg.raw, s, text) for s in cfg.sweep["sigmas"]]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    outputs, summary, all_ok = [], [], True
    for sigma, brows, footer, prices, ok, wall in results:
        tag = f"{sigma:g}".replace(".", "p")
        write_csv(out / f"boundary_sigma_{tag}.csv", BOUNDARY_HEADER, brows, footer)
        write_csv(out / f"price_sigma_{tag}.csv", PRICE_HEADER, prices)
        outputs += [f"boundary_sigma_{tag}.csv", f"price_sigma_{tag}.csv"]
        ev = {r[1]: r[2] for r in footer if r[0] == "event"}
        cross = [r[2] for r in footer if r[0] == "event_detail" and r[1] == "intersection"]
        summary.append((sigma, ev["t_star"], ev["t_e"], ev["t_s"], cross[0] if cross else "none", int(ok)))
        all_ok &= ok
    write_csv(out / "sweep_events.csv", ["sigma", "t_star", "t_e", "t_s", "t_intersection", "converged"], summary)
    outputs.append("sweep_events.csv")
    info = {"outputs": outputs}
    if not all_ok:
        raise NonConvergence(info)
    return info


COMMANDS = {
    "regimes": cmd_regimes, "boundary": cmd_boundary, "price": cmd_price,
    "hedge": cmd_hedge, "verify": cmd_verify, "sweep": cmd_sweep,
}


def _versions() -> dict:
    from importlib import metadata

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - running from a checkout
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "package": pkg}


def run(subcommand: str, cfg: RunConfig, out: Optional[Path] = None, workers: int = 1) -> int:
    out = Path(out) if out is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    status, info = EXIT_OK, {}
    try:
        info = COMMANDS[subcommand](cfg, out, workers)
    except NonConvergence as exc:
        status, info = EXIT_NONCONVERGED, exc.args[0]
        log.error("numerical non-convergence: %s", info)
    except VerificationFailure as exc:
        status, info = EXIT_VERIFY, exc.args[0]
        log.error("verification failed: %s", info.get("failed"))
    except ComplexityError as exc:
        status, info = EXIT_NONCONVERGED, {"error": str(exc)}
        log.error("%s", exc)
    except (ConfigError, DomainError, UnsupportedRegimeError, GridError) as exc:
        status, info = EXIT_CONFIG, {"error": str(exc)}
        log.error("%s", exc)
    manifest = {
        "subcommand": subcommand, "exit_status": status, "config_sha256": cfg.digest,
        "config": cfg.raw, "versions": _versions(),
        "wall_seconds": time.perf_counter() - t_start, "details": info,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="floatbound", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep entries")
    p.add_argument("--log-level", default="warn", choices=["error", "warn", "info", "debug"])
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}[args.log_level]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.subcommand, cfg, Path(args.out) if args.out else None, args.workers)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
