"""Nonlinear resolvent ``(I + lam A)^{-1}`` by frozen-coefficient fixed-point iteration."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import grid as gr
from .coeffs import lambda0 as _lambda0
from .coeffs import regularized

log = logging.getLogger(__name__)

SAFETY = 0.9


class FixedPointStall(RuntimeError):
    def __init__(self, message: str, diagnostics: "ResolventDiagnostics"):
        self.diagnostics = diagnostics
        super().__init__(message)


class IdentityStall(RuntimeError):
    def __init__(self, contraction: float, increment: float, passes: int):
        self.contraction = contraction
        self.increment = increment
        super().__init__(f"resolvent identity did not settle after {passes} passes "
                         f"(contraction factor {contraction:.3f}, last increment {increment:.3e})")


@dataclass(frozen=True)
class ResolventParams:
    lam: float
    outer_tol: float | None = None
    max_outer: int = 200
    damping: float = 1.0
    linear_tol: float = 1e-12
    linear_max_iter: int = 2000
    boundary: str = "dirichlet"
    drift_scheme: str = "upwind"
    lambda0: float | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.outer_tol is not None and not self.outer_tol > 0:
            raise ValueError("outer_tol must be > 0")
        if not self.linear_tol > 0:
            raise ValueError("linear_tol must be > 0")

    def tol_for(self, f: gr.DensityField) -> float:
        if self.outer_tol is not None:
            return self.outer_tol
        return 1e-10 * gr.l1_norm(f) + 1e-14


@dataclass
class ResolventDiagnostics:
    outer_iterations: int = 0
    final_increment: float = 0.0
    substeps: int = 1
    mass_drift: float = 0.0
    leak: float = 0.0
    min_value: float = 0.0
    residual: float = 0.0
    damping: float = 1.0
    increments: list[float] = field(default_factory=list)
    norm2: list[float] = field(default_factory=list)


def resolve(f: gr.DensityField, params: ResolventParams, coeffs) -> tuple[gr.DensityField, ResolventDiagnostics]:
    """Solve ``u + lam A u = f`` on the grid of `f` for ``lam < lambda0``.

    Iterates ``v <- theta * F(v) + (1 - theta) * v`` where ``F(v)`` solves the
    linear problem with coefficients frozen at ``v``.  The returned field is the
    last linear solve, accepted once the increment is below tolerance and the
    nonlinear residual (with coefficients at the answer) is below ten times it.
    """
    grid = f.grid
    lam = params.lam
    tol = params.tol_for(f)
    theta = params.damping
    diag = ResolventDiagnostics(damping=theta)
    asm = dict(boundary=params.boundary, drift_scheme=params.drift_scheme)

    v = f.values
    op = gr.assemble(grid, coeffs, f, lam, **asm)
    rises = 0
    for k in range(1, params.max_outer + 1):
        w = gr.solve_linear(op, f.values, params.linear_tol, params.linear_max_iter)
        step = theta * (w - v)
        inc = math.fsum(np.abs(step)) * grid.cell_volume
        if diag.increments and inc > diag.increments[-1]:
            rises += 1
        else:
            rises = 0
        diag.increments.append(inc)
        diag.norm2.append(float(np.linalg.norm(w)))
        wf = grid.field(w)
        op_w = gr.assemble(grid, coeffs, wf, lam, **asm)
        if inc <= tol:
            res = math.fsum(np.abs(op_w.apply(w) - f.values)) * grid.cell_volume
            if res <= 10 * tol:
                diag.outer_iterations = k
                diag.final_increment = inc
                diag.residual = res
                diag.leak = op.leak(w)
                diag.mass_drift = gr.mass(wf) + diag.leak - gr.mass(f)
                diag.min_value = float(w.min())
                diag.damping = theta
                return wf, diag
        if rises >= 3:
            theta *= 0.5
            rises = 0
            log.info("resolvent: halving damping to %g after oscillating increments", theta)
        if theta == 1.0:
            v, op = w, op_w
        else:
            v = v + step
            op = gr.assemble(grid, coeffs, grid.field(v), lam, **asm)
    diag.outer_iterations = params.max_outer
    diag.final_increment = diag.increments[-1]
    diag.damping = theta
    raise FixedPointStall(f"fixed point not reached in {params.max_outer} iterations "
                          f"(last increment {diag.final_increment:.3e}, tol {tol:.3e})", diag)


def admissible_lambda(coeffs, params: ResolventParams) -> float:
    lam0 = params.lambda0 if params.lambda0 is not None else _lambda0(coeffs)
    return SAFETY * lam0


def resolve_extended(f: gr.DensityField, lam: float, params: ResolventParams,
                     coeffs) -> tuple[gr.DensityField, ResolventDiagnostics]:
    """Resolvent for any ``lam > 0``.

    Above the admissible step ``lam_s = 0.9 * lambda0`` this iterates
    ``w <- R(lam_s)((lam_s/lam) f + (1 - lam_s/lam) w)``, a contraction with
    factor ``1 - lam_s/lam``.
    """
    if not lam > 0:
        raise ValueError("lam must be > 0")
    lam_s = admissible_lambda(coeffs, params)
    if lam < lam_s:
        return resolve(f, replace(params, lam=lam), coeffs)
    if not lam_s > 0:
        raise ValueError("no admissible resolvent step (degenerate coefficients need viscosity)")
    ratio = lam_s / lam
    q = 1.0 - ratio
    sub = replace(params, lam=lam_s)
    # the fixed point's mass identity scales increments by 1/ratio
    tol = params.tol_for(f) * ratio * 0.1
    w = f
    inc = math.inf
    total = ResolventDiagnostics()
    # error decays like q^k; allow enough passes to reach round-off
    passes = max(params.max_outer, int(math.ceil(40.0 / ratio)))
    for k in range(1, passes + 1):
        g = gr.DensityField(f.grid, ratio * f.values + q * w.values)
        w_new, d = resolve(g, sub, coeffs)
        inc = gr.l1_dist(w_new, w)
        w = w_new
        total.outer_iterations += d.outer_iterations
        total.increments.append(inc)
        total.norm2.extend(d.norm2)
        if q == 0.0 or inc <= tol:
            total.substeps = k
            total.final_increment = inc
            total.residual = d.residual
            total.leak = d.leak / ratio
            total.mass_drift = gr.mass(w) + total.leak - gr.mass(f)
            total.min_value = w.min
            total.damping = d.damping
            return w, total
    raise IdentityStall(q, inc, passes)


# ---------------------------------------------------------------------------
# accretivity checks


@dataclass
class SuiteRow:
    lam: float
    trial: int
    check: str
    value: float
    bound: float
    passed: bool


@dataclass
class SuiteReport:
    rows: list[SuiteRow]
    replay: dict = field(default_factory=dict)

    @property
    def violations(self) -> list[SuiteRow]:
        return [r for r in self.rows if not r.passed]

    @property
    def passed(self) -> bool:
        return not self.violations

    def worst(self, check: str) -> SuiteRow | None:
        rows = [r for r in self.rows if r.check == check]
        if not rows:
            return None
        if check == "positivity":
            return min(rows, key=lambda r: r.value)
        return max(rows, key=lambda r: r.value)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "trial", "check", "value", "bound", "pass"])
            for r in self.rows:
                w.writerow([f"{r.lam:.17g}", r.trial, r.check, f"{r.value:.17g}",
                            f"{r.bound:.17g}", str(r.passed).lower()])


def random_density(grid: gr.Grid, rng: np.random.Generator, roughness: float = 0.3,
                   support: float = 0.75) -> gr.DensityField:
    """Random nonnegative mass-one field: a Gaussian mixture with cellwise noise,
    vanishing outside the central fraction `support` of the box."""
    L = grid.L
    x = grid.coords()
    vals = np.zeros(grid.shape)
    for _ in range(int(rng.integers(1, 4))):
        c = rng.uniform(-0.4 * L, 0.4 * L, grid.dim)
        s = rng.uniform(0.05 * L, 0.2 * L)
        r2 = sum((xk - ck) ** 2 for xk, ck in zip(x, c))
        vals += rng.uniform(0.5, 1.5) * np.exp(-0.5 * r2 / s**2)
    vals *= 1.0 + roughness * rng.random(grid.shape)
    inside = np.ones(grid.shape, dtype=bool)
    for xk in x:
        inside &= np.abs(xk) <= support * L
    vals[~inside] = 0.0
    f = grid.field(vals.ravel())
    return f.normalized()


def _boundary_zero(f: gr.DensityField) -> bool:
    arr = f.array
    for ax in range(arr.ndim):
        if np.any(np.take(arr, 0, axis=ax)) or np.any(np.take(arr, -1, axis=ax)):
            return False
    return True


def accretivity_suite(coeffs, grid: gr.Grid, lambdas, trials: int = 10, seed: int = 0,
                      params: ResolventParams | None = None, replay_dir=None) -> SuiteReport:
    """Check L1 contraction, positivity and mass conservation of the resolvent
    on `trials` random pairs of mass-one densities for each lambda."""
    if trials < 10:
        raise ValueError("trials must be >= 10")
    rows: list[SuiteRow] = []
    replay = {}
    for lam in lambdas:
        p = params if params is not None else ResolventParams(lam=lam)
        for t in range(trials):
            rng = np.random.default_rng([seed, t])
            f1, f2 = random_density(grid, rng), random_density(grid, rng)
            u1, d1 = resolve_extended(f1, lam, p, coeffs)
            u2, d2 = resolve_extended(f2, lam, p, coeffs)
            excess = gr.l1_dist(u1, u2) - gr.l1_dist(f1, f2)
            rows.append(SuiteRow(lam, t, "contraction", excess, 1e-9, excess <= 1e-9))
            low = min(u1.min, u2.min)
            rows.append(SuiteRow(lam, t, "positivity", low, -1e-12, low >= -1e-12))
            for f, u, d in ((f1, u1, d1), (f2, u2, d2)):
                if _boundary_zero(f):
                    drift = abs(gr.mass(u) + d.leak - gr.mass(f))
                else:
                    drift = abs(gr.mass(u) - gr.mass(f))
                rows.append(SuiteRow(lam, t, "mass", drift, 1e-10, drift <= 1e-10))
            if not all(r.passed for r in rows[-4:]):
                replay[(lam, t)] = (f1, f2)
                if replay_dir is not None:
                    out = Path(replay_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    gr.write_density_csv(out / f"replay_l{lam:g}_t{t}_f1.csv", f1)
                    gr.write_density_csv(out / f"replay_l{lam:g}_t{t}_f2.csv", f2)
    return SuiteReport(rows, replay)
