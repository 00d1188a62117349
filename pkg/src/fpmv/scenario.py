"""Scenario files: flat dotted-key TOML describing one run of the solver.

Example::

    dim = 1
    grid.L = 10.0
    grid.n = 800
    coeff.mode = "nondegenerate"
    coeff.a.1.1 = "1"
    coeff.b.1 = "0"
    coeff.gamma = 1.0
    init.u0 = "exp(-x1^2/0.5)"
    time.T = 0.5
    time.n_steps = 64
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from . import expr as ex
from . import grid as gr
from .coeffs import CoefficientSet, Mode, RegularizedSet, SampleBox
from .resolvent import ResolventParams


class ParseError(ValueError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class ValidationError(ValueError):
    """All problems found in one scenario, as ``(field path, reason)`` pairs."""

    def __init__(self, issues: list[tuple[str, str]]):
        self.issues = list(issues)
        super().__init__("; ".join(f"{p}: {r}" for p, r in self.issues))


# key -> (type, default); None default means required
_SCALARS = {
    "name": (str, ""),
    "dim": (int, None),
    "grid.L": (float, None),
    "grid.n": (int, None),
    "coeff.mode": (str, "nondegenerate"),
    "coeff.gamma": (float, 0.0),
    "coeff.b_inf": (float, math.nan),
    "coeff.c_inf": (float, math.nan),
    "init.u0": (str, None),
    "time.T": (float, None),
    "time.n_steps": (int, None),
    "reg.viscosity": (float, 0.0),
    "reg.eps_list": (list, [0.04, 0.02, 0.01]),
    "reg.mollifier_eps": (float, 0.0),
    "reg.mollifier_nodes": (int, 5),
    "resolvent.lambda": (float, math.nan),
    "resolvent.outer_tol": (float, math.nan),
    "resolvent.max_outer": (int, 200),
    "resolvent.damping": (float, 1.0),
    "resolvent.linear_tol": (float, 1e-12),
    "resolvent.linear_max_iter": (int, 2000),
    "resolvent.boundary": (str, "dirichlet"),
    "resolvent.drift_scheme": (str, "upwind"),
    "suite.lambdas": (list, [0.01, 0.1, 1.0]),
    "suite.trials": (int, 10),
    "suite.seed": (int, 0),
    "check.samples": (int, 4096),
    "check.seed": (int, 0),
    "check.u_max": (float, math.nan),
    "expcheck.n_list": (list, [16, 32, 64, 128]),
    "convergence.double_L": (int, 2),
    "sde.N": (int, 10000),
    "sde.dt": (float, math.nan),
    "sde.seed": (int, 0),
    "sde.amplitude_convention": (str, "match_fpe"),
    "sde.record_every": (int, 1),
    "output.dir": (str, ""),
}


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class Scenario:
    name: str
    dim: int
    L: float
    n: int
    mode: Mode
    a: list[list[str]]
    b: list[str]
    u0: str
    T: float
    n_steps: int
    settings: dict = field(default_factory=dict)
    source: str = ""

    def get(self, key: str):
        val = self.settings[key]
        if isinstance(val, float) and math.isnan(val):
            return None
        return val

    # ------------------------------------------------------------------ builders

    def grid(self, L: float | None = None, n: int | None = None) -> gr.Grid:
        return gr.Grid(self.dim, self.L if L is None else L, self.n if n is None else n)

    def base_coeffs(self) -> CoefficientSet:
        return CoefficientSet.from_strings(self.a, self.b, self.mode, gamma=self.get("coeff.gamma"),
                                           b_inf=self.get("coeff.b_inf"),
                                           c_inf=self.get("coeff.c_inf"))

    def coeffs(self, viscosity: float | None = None) -> RegularizedSet:
        """Coefficients with the scenario's regularization applied."""
        eps = self.get("reg.viscosity") if viscosity is None else viscosity
        return RegularizedSet(self.base_coeffs(), eps, self.get("reg.mollifier_eps"),
                              self.get("reg.mollifier_nodes"))

    def initial(self, grid: gr.Grid | None = None) -> gr.DensityField:
        g = self.grid() if grid is None else grid
        e = ex.parse(self.u0, self.dim)
        vals = np.broadcast_to(ex.evaluate(e, list(g.points().T)), (g.size,)).astype(float)
        if np.any(vals < 0):
            raise ValidationError([("init.u0", "initial density is negative on the grid")])
        f = g.field(vals)
        if not f.mass > 0:
            raise ValidationError([("init.u0", "initial density has zero mass on the grid")])
        return f.normalized()

    def params(self, lam: float | None = None) -> ResolventParams:
        lam = self.T / self.n_steps if lam is None else lam
        return ResolventParams(lam=lam, outer_tol=self.get("resolvent.outer_tol"),
                               max_outer=self.get("resolvent.max_outer"),
                               damping=self.get("resolvent.damping"),
                               linear_tol=self.get("resolvent.linear_tol"),
                               linear_max_iter=self.get("resolvent.linear_max_iter"),
                               boundary=self.get("resolvent.boundary"),
                               drift_scheme=self.get("resolvent.drift_scheme"))

    def box(self, u0: gr.DensityField | None = None) -> SampleBox:
        u_max = self.get("check.u_max")
        if u_max is None:
            u_max = 1.5 * float((self.initial() if u0 is None else u0).values.max())
        return SampleBox(-self.L, self.L, 0.0, u_max)


# ---------------------------------------------------------------------------
# loading


def bundled_names() -> list[str]:
    root = resources.files("fpmv") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def resolve_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name[:-4] if p.name.endswith(".cfg") else p.name
    if stem in bundled_names():
        with resources.as_file(resources.files("fpmv") / "scenarios" / f"{stem}.cfg") as q:
            return Path(q)
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r}")


def load_scenario(path) -> Scenario:
    """Read and validate a scenario; every problem is reported at once."""
    p = resolve_path(path)
    try:
        tree = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as err:
        raise ParseError(p, str(err)) from err
    return scenario_from_dict(_flatten(tree), name=p.stem, source=str(p))


def _coerce(key, val, typ, issues):
    if typ is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if typ is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if typ is str and isinstance(val, str):
        return val
    if typ is list and isinstance(val, list):
        return val
    issues.append((key, f"expected {typ.__name__}, got {type(val).__name__}"))
    return None


def _parse_expr(key, src, dim, issues, allow_u=True):
    if not isinstance(src, str):
        issues.append((key, "expected an expression string"))
        return None
    try:
        e = ex.parse(src, dim)
    except ex.ExprSyntaxError as err:
        issues.append((key, f"syntax error at offset {err.offset}: {err}"))
        return None
    except ex.UnknownIdentifier as err:
        issues.append((key, f"unknown identifier {err.name!r} at offset {err.offset}"))
        return None
    if not allow_u and "u" in ex.variables(e):
        issues.append((key, "may not depend on u"))
    return e


def scenario_from_dict(flat: dict, name: str = "scenario", source: str = "") -> Scenario:
    issues: list[tuple[str, str]] = []
    settings = {}
    for key, (typ, default) in _SCALARS.items():
        if key in flat:
            settings[key] = _coerce(key, flat[key], typ, issues)
        elif default is None:
            issues.append((key, "required"))
            settings[key] = None
        else:
            settings[key] = default
    unknown = [k for k in flat if k not in _SCALARS
               and not k.startswith("coeff.a.") and not k.startswith("coeff.b.")]
    for k in unknown:
        issues.append((k, "unknown key"))

    d = settings["dim"]
    if d is not None and d < 1:
        issues.append(("dim", "must be >= 1"))
        d = None
    if settings["grid.L"] is not None and not settings["grid.L"] > 0:
        issues.append(("grid.L", "must be > 0"))
    if settings["grid.n"] is not None and settings["grid.n"] < 8:
        issues.append(("grid.n", "must be >= 8"))
    if settings["time.T"] is not None and not settings["time.T"] > 0:
        issues.append(("time.T", "must be > 0"))
    if settings["time.n_steps"] is not None and settings["time.n_steps"] < 1:
        issues.append(("time.n_steps", "must be >= 1"))
    try:
        mode = Mode(settings["coeff.mode"])
    except ValueError:
        issues.append(("coeff.mode", "must be 'nondegenerate' or 'degenerate'"))
        mode = None
    if mode is Mode.NONDEGENERATE and "coeff.gamma" not in flat:
        issues.append(("coeff.gamma", "required in nondegenerate mode"))
    elif settings["coeff.gamma"] is not None and settings["coeff.gamma"] < 0:
        issues.append(("coeff.gamma", "must be >= 0"))
    if settings["sde.amplitude_convention"] not in ("match_fpe", "paper_literal"):
        issues.append(("sde.amplitude_convention", "must be 'match_fpe' or 'paper_literal'"))
    if settings["resolvent.boundary"] not in ("dirichlet", "noflux"):
        issues.append(("resolvent.boundary", "must be 'dirichlet' or 'noflux'"))
    if settings["resolvent.drift_scheme"] not in ("upwind", "centered"):
        issues.append(("resolvent.drift_scheme", "must be 'upwind' or 'centered'"))

    a = b = None
    if d is not None:
        a = [[None] * d for _ in range(d)]
        b = ["0"] * d
        for k in flat:
            parts = k.split(".")
            if k.startswith("coeff.a."):
                ok = len(parts) == 4 and all(s.isdigit() and 1 <= int(s) <= d for s in parts[2:])
                if not ok:
                    issues.append((k, f"expected coeff.a.i.j with 1 <= i, j <= {d}"))
            elif k.startswith("coeff.b."):
                ok = len(parts) == 3 and parts[2].isdigit() and 1 <= int(parts[2]) <= d
                if not ok:
                    issues.append((k, f"expected coeff.b.i with 1 <= i <= {d}"))
        parsed = {}
        for i in range(1, d + 1):
            for j in range(1, d + 1):
                key = f"coeff.a.{i}.{j}"
                if key in flat:
                    parsed[i, j] = _parse_expr(key, flat[key], d, issues)
        for i in range(1, d + 1):
            if (i, i) not in parsed:
                issues.append((f"a[{i}][{i}]", "diagonal entry missing"))
            else:
                a[i - 1][i - 1] = flat[f"coeff.a.{i}.{i}"]
            for j in range(i + 1, d + 1):
                has_ij, has_ji = (i, j) in parsed, (j, i) in parsed
                if has_ij and not has_ji:
                    issues.append((f"a[{j}][{i}]", f"missing symmetry partner of a[{i}][{j}]"))
                elif has_ji and not has_ij:
                    issues.append((f"a[{i}][{j}]", f"missing symmetry partner of a[{j}][{i}]"))
                elif has_ij:
                    e1, e2 = parsed[i, j], parsed[j, i]
                    if e1 is not None and e2 is not None and ex.unparse(e1) != ex.unparse(e2):
                        issues.append((f"a[{j}][{i}]", f"differs from a[{i}][{j}]"))
                    a[i - 1][j - 1] = a[j - 1][i - 1] = flat[f"coeff.a.{i}.{j}"]
                else:
                    a[i - 1][j - 1] = a[j - 1][i - 1] = "0"
        for i in range(1, d + 1):
            key = f"coeff.b.{i}"
            if key in flat:
                _parse_expr(key, flat[key], d, issues)
                b[i - 1] = flat[key]
        if settings["init.u0"] is not None:
            _parse_expr("init.u0", settings["init.u0"], d, issues, allow_u=False)

    if not issues and mode is not None:
        try:
            CoefficientSet.from_strings(a, b, mode, gamma=settings["coeff.gamma"],
                                        b_inf=_nan_none(settings["coeff.b_inf"]),
                                        c_inf=_nan_none(settings["coeff.c_inf"]))
        except ValueError as err:
            issues.append(("coeff", str(err)))
    if issues:
        raise ValidationError(issues)
    sc = Scenario(settings["name"] or name, d, settings["grid.L"], settings["grid.n"], mode, a, b,
                  settings["init.u0"], settings["time.T"], settings["time.n_steps"], settings,
                  source)
    sc.initial()  # nonnegativity and mass checks
    return sc


def _nan_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v
