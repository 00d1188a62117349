"""Command-line front end: ``fpmv <command> <scenario> [options]``.

Exit codes: 0 success, 2 invalid scenario or failed hypotheses, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import evolve as ev
from . import grid as gr
from . import sde
from .coeffs import Mode, check_hypotheses
from .expr import EvalDomainError
from .resolvent import FixedPointStall, IdentityStall, accretivity_suite, resolve_extended
from .scenario import ParseError, Scenario, ValidationError, bundled_names, load_scenario

log = logging.getLogger("fpmv")

COMMANDS = ("check", "resolve", "suite", "evolve", "expcheck", "viscosity", "simulate",
            "compare", "convergence")


class CheckFailed(Exception):
    """Raised when a command ran but its verdict is negative."""

    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


NUMERICAL = (FixedPointStall, IdentityStall, ev.StepError, gr.NonConvergence, gr.BreakdownError,
             EvalDomainError, sde.NotPSD, FloatingPointError)
VALIDATION = (ValidationError, ParseError, ev.HypothesisError, FileNotFoundError)


class Run:
    """Output directory plus the options shared by every command."""

    def __init__(self, sc: Scenario, args):
        self.sc = sc
        self.args = args
        self.threads = max(1, args.threads)
        out = args.out or sc.get("output.dir") or os.path.join("fpmv_out", sc.name)
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "FAILED").unlink(missing_ok=True)
        self.header = None
        if not args.no_timestamp:
            now = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
            self.header = f"generated {now} by fpmv {args.command} {sc.name}"

    def seed(self, key: str) -> int:
        return self.args.seed_override if self.args.seed_override is not None else self.sc.get(key)

    def write_rows(self, name: str, rows) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            if self.header:
                fh.write(f"# {self.header}\n")
            csv.writer(fh, lineterminator="\n").writerows(rows)
        return path

    def trace(self, grid: gr.Grid | None = None) -> ev.EvolutionTrace:
        sc = self.sc
        g = sc.grid() if grid is None else grid
        u0 = sc.initial(g)
        box = None if self.args.override else sc.box(u0)
        return ev.evolve(u0, sc.T, sc.n_steps, sc.coeffs(), sc.params(), check_box=box)


# ---------------------------------------------------------------------------
# commands


def cmd_check(run: Run) -> None:
    sc = run.sc
    rep = check_hypotheses(sc.coeffs(), sc.box(), sc.get("check.samples"), run.seed("check.seed"))
    run.write_rows("hypotheses.csv", rep.to_rows())
    sys.stdout.write(rep.to_text())
    if not rep.passed:
        bad = ", ".join(c.name for c in rep.checks if not c.passed)
        raise CheckFailed(f"hypotheses failed: {bad}", 2)


def cmd_resolve(run: Run) -> None:
    sc = run.sc
    lam = sc.get("resolvent.lambda") or sc.T / sc.n_steps
    f = sc.initial()
    u, d = resolve_extended(f, lam, sc.params(lam), sc.coeffs())
    gr.write_density_csv(run.out / "resolvent.csv", u)
    run.write_rows("resolvent_diagnostics.csv", [
        ["lambda", "outer_iterations", "substeps", "final_increment", "residual", "mass_drift",
         "leak", "min_value"],
        [f"{lam:.17g}", d.outer_iterations, d.substeps, f"{d.final_increment:.17g}",
         f"{d.residual:.17g}", f"{d.mass_drift:.17g}", f"{d.leak:.17g}", f"{d.min_value:.17g}"]])


def cmd_suite(run: Run) -> None:
    sc = run.sc
    lambdas = [float(x) for x in sc.get("suite.lambdas")]
    rep = accretivity_suite(sc.coeffs(), sc.grid(), lambdas, sc.get("suite.trials"),
                            run.seed("suite.seed"), replay_dir=run.out / "replay")
    rep.to_csv(run.out / "suite.csv")
    if run.header:
        _prepend(run.out / "suite.csv", run.header)
    if not rep.passed:
        raise CheckFailed(f"{len(rep.violations)} accretivity violations", 3)


def cmd_evolve(run: Run) -> None:
    tr = run.trace()
    ev.write_trace(tr, run.out / "trace", header=run.header)
    log.info("evolve: mass drift %.3e, leak %.3e, min %.3e", tr.mass_drift(), tr.total_leak,
             tr.min_value())


def cmd_expcheck(run: Run) -> None:
    sc = run.sc
    n_list = [int(k) for k in sc.get("expcheck.n_list")]
    rep = ev.exponential_check(sc.initial(), sc.T, n_list, sc.coeffs(), sc.params(), run.threads)
    run.write_rows("expcheck.csv", rep.rows())
    if not rep.cauchy:
        warnings.warn("implicit Euler finals are not a Cauchy sequence", ev.NotCauchyWarning)


def cmd_viscosity(run: Run) -> None:
    sc = run.sc
    if sc.mode is not Mode.DEGENERATE:
        raise ValidationError([("coeff.mode", "viscosity study needs a degenerate scenario")])
    eps = [float(e) for e in sc.get("reg.eps_list")]
    limit, rep = ev.vanishing_viscosity(sc.initial(), sc.T, sc.n_steps, sc.base_coeffs(), eps,
                                        sc.params(), run.threads)
    rows = rep.rows()
    rows.append(["extrapolated", "", f"{rep.extrapolation_gap:.17g}", ""])
    run.write_rows("viscosity.csv", rows)
    ev.write_trace(limit, run.out / "viscosity_limit", header=run.header)


def _ensembles(run: Run, tr: ev.EvolutionTrace):
    sc = run.sc
    dt = sc.get("sde.dt") or tr.times[1] - tr.times[0]
    return sde.simulate(tr, sc.coeffs(), sc.get("sde.N"), dt, run.seed("sde.seed"),
                        convention=sc.get("sde.amplitude_convention"), threads=run.threads)


def cmd_simulate(run: Run) -> None:
    tr = run.trace()
    ens = _ensembles(run, tr)
    out = run.out / "ensemble"
    out.mkdir(exist_ok=True)
    every = max(1, run.sc.get("sde.record_every"))
    for i, e in enumerate(ens):
        if i % every == 0 or i == len(ens) - 1:
            sde.write_ensemble_csv(out / f"ens_{i:06d}.csv", e)
    run.write_rows("escape.csv", [["time", "escaped_fraction"]]
                   + [[f"{e.time:.17g}", f"{e.escaped_fraction:.17g}"] for e in ens])


def cmd_compare(run: Run) -> None:
    tr = run.trace()
    ens = _ensembles(run, tr)
    rows = sde.superposition_check(tr, ens)
    sde.write_comparison_csv(run.out / "comparison.csv", rows, header=run.header)


def _embed(f: gr.DensityField, big: gr.Grid) -> gr.DensityField:
    """Place `f` in the centre of the larger grid `big` (same cell size), zero elsewhere."""
    pad = (big.n - f.grid.n) // 2
    arr = np.pad(f.array, pad)
    return big.field(arr.ravel())


def cmd_convergence(run: Run) -> None:
    sc = run.sc
    levels = run.args.double_L if run.args.double_L is not None else sc.get("convergence.double_L")
    rows = [["level", "L", "n", "l1_difference", "leak", "mass_drift", "min_value"]]
    prev = None
    diffs = []
    for k in range(levels + 1):
        g = sc.grid(sc.L * 2**k, sc.n * 2**k)
        tr = run.trace(g)
        diff = float("nan")
        if prev is not None:
            diff = gr.l1_dist(_embed(prev, g), tr.final)
            diffs.append(diff)
        rows.append([k, f"{g.L:.17g}", g.n, f"{diff:.17g}", f"{tr.total_leak:.17g}",
                     f"{tr.mass_drift():.17g}", f"{tr.min_value():.17g}"])
        prev = tr.final
    run.write_rows("convergence.csv", rows)
    if any(b > a for a, b in zip(diffs, diffs[1:])):
        warnings.warn("box-size differences are not decreasing", ev.NotCauchyWarning)


def _prepend(path: Path, header: str) -> None:
    text = path.read_text()
    path.write_text(f"# {header}\n" + text)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario file or bundled scenario name")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    common.add_argument("--no-timestamp", action="store_true",
                        help="omit the timestamped header line from outputs")
    common.add_argument("--seed-override", type=int, default=None,
                        help="replace every seed in the scenario")
    common.add_argument("--override", action="store_true",
                        help="evolve even if the hypothesis check fails")
    p = argparse.ArgumentParser(prog="fpmv", description="Nonlinear Fokker-Planck solver toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "convergence":
            sp.add_argument("--double-L", type=int, default=None, metavar="K",
                            help="number of box doublings")
    sub.add_parser("list", help="list bundled scenarios")
    return p


def _setup_logging() -> None:
    level = os.environ.get("FPMV_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "list":
        print("\n".join(bundled_names()))
        return 0
    run = None
    try:
        sc = load_scenario(args.scenario)
        run = Run(sc, args)
        HANDLERS[args.command](run)
        return 0
    except CheckFailed as err:
        code, msg = err.code, str(err)
    except VALIDATION as err:
        code, msg = 2, f"validation error: {err}"
    except NUMERICAL as err:
        code, msg = 3, f"numerical failure: {err}"
    print(f"fpmv: {msg}", file=sys.stderr)
    out = run.out if run is not None else (Path(args.out) if args.out else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(msg + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
