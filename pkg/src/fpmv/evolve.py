"""Implicit Euler (Crandall-Liggett) time stepping and its convergence studies."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import expr as ex
from . import grid as gr
from .coeffs import Mode, SampleBox, add_viscosity, check_hypotheses, regularized
from .resolvent import ResolventParams, resolve_extended


class StepError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"step {step} failed: {cause}")


class HypothesisError(ValueError):
    pass


class NotCauchyWarning(UserWarning):
    pass


class SupportError(ValueError):
    pass


@dataclass
class StepDiagnostics:
    step: int
    time: float
    outer_iterations: int
    substeps: int
    mass: float
    min_value: float
    increment: float
    leak: float


@dataclass
class EvolutionTrace:
    grid: gr.Grid
    times: np.ndarray
    snapshots: list[gr.DensityField]
    diagnostics: list[StepDiagnostics] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.snapshots) != len(self.times):
            raise ValueError("one snapshot per time is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def final(self) -> gr.DensityField:
        return self.snapshots[-1]

    @property
    def total_leak(self) -> float:
        return math.fsum(d.leak for d in self.diagnostics)

    def mass_drift(self) -> float:
        """Mass change over the run after adding back what left through the boundary."""
        return self.final.mass + self.total_leak - self.snapshots[0].mass

    def index_of(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def min_value(self) -> float:
        return min(s.min for s in self.snapshots)


def _params_for(params: ResolventParams | None, lam: float) -> ResolventParams:
    return ResolventParams(lam=lam) if params is None else replace(params, lam=lam)


def evolve(u0: gr.DensityField, T: float, n_steps: int, coeffs,
           params: ResolventParams | None = None, *, check_box: SampleBox | None = None,
           override: bool = False) -> EvolutionTrace:
    """Mild solution by ``n_steps`` implicit Euler steps ``u^i = (I + h A)^{-1} u^{i-1}``.

    With `check_box` the structural hypotheses are sampled first and a failure
    raises HypothesisError unless `override` is set.
    """
    if not T > 0 or n_steps < 1:
        raise ValueError("need T > 0 and n_steps >= 1")
    if check_box is not None and not override:
        rep = check_hypotheses(coeffs, check_box)
        if not rep.passed:
            bad = ", ".join(c.name for c in rep.checks if not c.passed)
            raise HypothesisError(f"hypotheses failed on the sampling box: {bad}")
    ht = T / n_steps
    p = _params_for(params, ht)
    snaps = [u0]
    diags = []
    u = u0
    for i in range(1, n_steps + 1):
        try:
            nxt, d = resolve_extended(u, ht, p, coeffs)
        except Exception as err:  # noqa: BLE001 - re-raised with the step index
            raise StepError(i, err) from err
        diags.append(StepDiagnostics(i, i * ht, d.outer_iterations, d.substeps, nxt.mass,
                                     nxt.min, gr.l1_dist(nxt, u), d.leak))
        snaps.append(nxt)
        u = nxt
    return EvolutionTrace(u0.grid, ht * np.arange(n_steps + 1), snaps, diags)


def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# exponential formula


@dataclass
class ConvergenceReport:
    n_list: list[int]
    differences: list[float]
    orders: list[float]
    cauchy: bool
    finals: list[gr.DensityField] = field(default_factory=list, repr=False)

    def rows(self) -> list[list]:
        out = [["n", "n_next", "l1_difference", "observed_order"]]
        for k, e in enumerate(self.differences):
            order = self.orders[k - 1] if k > 0 else float("nan")
            out.append([self.n_list[k], self.n_list[k + 1], f"{e:.17g}", f"{order:.17g}"])
        return out


def observed_orders(differences, n_list) -> list[float]:
    orders = []
    for k in range(len(differences) - 1):
        e0, e1 = differences[k], differences[k + 1]
        ratio = n_list[k + 1] / n_list[k]
        orders.append(math.log(e0 / e1) / math.log(ratio) if e0 > 0 and e1 > 0 else float("nan"))
    return orders


def exponential_check(u0: gr.DensityField, T: float, n_list, coeffs,
                      params: ResolventParams | None = None, threads: int = 1) -> ConvergenceReport:
    """Self-convergence of ``(I + (T/n) A)^{-n} u0`` over increasing `n_list`."""
    n_list = list(n_list)
    if len(n_list) < 3:
        raise ValueError("n_list needs at least 3 entries")
    for a, b in zip(n_list, n_list[1:]):
        if b <= a or b % a:
            raise ValueError("each n must divide the next and increase")
    finals = _pool_map(lambda n: evolve(u0, T, n, coeffs, params).final, n_list, threads)
    diffs = [gr.l1_dist(a, b) for a, b in zip(finals, finals[1:])]
    cauchy = all(e1 < e0 for e0, e1 in zip(diffs, diffs[1:])) or not any(diffs)
    return ConvergenceReport(n_list, diffs, observed_orders(diffs, n_list), cauchy, finals)


# ---------------------------------------------------------------------------
# vanishing viscosity


@dataclass
class ViscosityReport:
    eps_list: list[float]
    distances: list[float]  # between consecutive eps in the list
    ratios: list[float]
    cauchy: bool
    extrapolation_gap: float  # L1 distance between extrapolated and smallest-eps finals
    traces: list[EvolutionTrace] = field(default_factory=list, repr=False)

    def rows(self) -> list[list]:
        out = [["eps", "eps_next", "l1_distance", "ratio"]]
        for k, dist in enumerate(self.distances):
            ratio = self.ratios[k - 1] if k > 0 else float("nan")
            out.append([f"{self.eps_list[k]:.17g}", f"{self.eps_list[k + 1]:.17g}",
                        f"{dist:.17g}", f"{ratio:.17g}"])
        return out


def richardson(fine: EvolutionTrace, coarse: EvolutionTrace, eps_fine: float,
               eps_coarse: float) -> EvolutionTrace:
    """Extrapolate two traces linearly in eps to eps = 0."""
    w = eps_fine / (eps_coarse - eps_fine)
    snaps = [f + (f - c) * w for f, c in zip(fine.snapshots, coarse.snapshots)]
    return EvolutionTrace(fine.grid, fine.times, snaps, [])


def vanishing_viscosity(u0: gr.DensityField, T: float, n_steps: int, coeffs, eps_list,
                        params: ResolventParams | None = None,
                        threads: int = 1) -> tuple[EvolutionTrace, ViscosityReport]:
    """Evolve with ``a + eps I`` for each eps and extrapolate to eps = 0."""
    base = regularized(coeffs).base
    if base.mode is not Mode.DEGENERATE:
        raise ValueError("vanishing viscosity applies to degenerate coefficient sets")
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list needs at least 3 strictly decreasing entries")
    traces = _pool_map(lambda e: evolve(u0, T, n_steps, add_viscosity(coeffs, e), params),
                       eps_list, threads)
    dists = [gr.l1_dist(a.final, b.final) for a, b in zip(traces, traces[1:])]
    ratios = [d0 / d1 if d1 > 0 else math.inf for d0, d1 in zip(dists, dists[1:])]
    cauchy = all(d1 < d0 for d0, d1 in zip(dists, dists[1:]))
    if not cauchy:
        warnings.warn("eps-solutions are not getting closer", NotCauchyWarning, stacklevel=2)
    limit = richardson(traces[-1], traces[-2], eps_list[-1], eps_list[-2])
    gap = gr.l1_dist(limit.final, traces[-1].final)
    return limit, ViscosityReport(eps_list, dists, ratios, cauchy, gap, traces)


def translation_estimate(trace: EvolutionTrace, cells: int = 1, axis: int = 0) -> tuple[float, float]:
    """Return ``(|tau u(T) - u(T)|_1, |tau u0 - u0|_1)`` for a shift tau by whole cells."""
    uT, u0 = trace.final, trace.snapshots[0]
    return (gr.l1_dist(gr.shift(uT, axis, cells), uT), gr.l1_dist(gr.shift(u0, axis, cells), u0))


# ---------------------------------------------------------------------------
# distributional residual


def bump_battery(dim: int, T: float, L: float, scales=(0.125, 0.25, 0.5)) -> list[ex.Expr]:
    """Products of compactly supported polynomial bumps in t and each x-axis.

    ``max(0, 1 - z^2)^4`` is C^3, vanishes for |z| >= 1 and needs no
    piecewise syntax.
    """
    tb = f"max(0, 1 - ((t - {T / 2!r})/{0.45 * T!r})^2)^4"
    out = []
    for s in scales:
        r = s * L
        factors = [tb] + [f"max(0, 1 - (x{k}/{r!r})^2)^4" for k in range(1, dim + 1)]
        out.append(ex.parse(" * ".join(f"({f})" for f in factors), dim, extra=("t",)))
    return out


def _check_support(phi: ex.Expr, grid: gr.Grid, T: float, tol: float = 1e-12) -> None:
    x = grid.coords()
    for t in (0.0, T):
        if np.max(np.abs(ex.evaluate(phi, x, 0.0, t=t))) > tol:
            raise SupportError(f"test function does not vanish at t={t}")
    ts = np.linspace(0.0, T, 17)
    L = grid.L
    for k in range(grid.dim):
        for side in (-L, L):
            xs = [np.asarray(xk, dtype=float) for xk in x]
            xs[k] = np.full_like(xs[k], side)
            for t in ts:
                if np.max(np.abs(ex.evaluate(phi, xs, 0.0, t=t))) > tol:
                    raise SupportError(f"test function does not vanish on x{k + 1}={side}")


def weak_residual(trace: EvolutionTrace, test_functions, coeffs) -> list[float]:
    """Absolute space-time residual of the distributional form of the equation.

    For each test function phi(t, x) this evaluates
    ``sum over steps and cells of [u phi_t + a_ij u D_ij phi + b_i u D_i phi]``
    with the midpoint rule in time (u interpolated linearly), phi_t and grad phi
    by forward-mode differentiation and D_ij phi by centred differences of the
    exact phi.
    """
    rc = regularized(coeffs)
    g = trace.grid
    d, h = g.dim, g.h
    x = g.coords()
    out = []
    for phi in test_functions:
        if isinstance(phi, str):
            phi = ex.parse(phi, d, extra=("t",))
        _check_support(phi, g, trace.T)
        terms = []
        for i in range(1, len(trace.times)):
            t0, t1 = trace.times[i - 1], trace.times[i]
            tm, dt = 0.5 * (t0 + t1), t1 - t0
            um = 0.5 * (trace.snapshots[i - 1].array + trace.snapshots[i].array)
            if not np.any(um):
                continue

            def phi_at(*shifts):
                xs = [xk + s * h for xk, s in zip(x, shifts)]
                return np.broadcast_to(ex.evaluate(phi, xs, 0.0, t=tm), g.shape)

            _, phi_t = ex.eval_with_partial(phi, x, 0.0, "t", t=tm)
            acc = um * phi_t
            a = rc.a_matrix(x, um)
            b = rc.drift(x, um)
            base = phi_at(*([0] * d))
            for p in range(d):
                e_p = [0] * d
                e_p[p] = 1
                _, dphi = ex.eval_with_partial(phi, x, 0.0, f"x{p + 1}", t=tm)
                acc = acc + b[p] * um * dphi
                plus, minus = phi_at(*e_p), phi_at(*[-c for c in e_p])
                acc = acc + a[p, p] * um * (plus - 2 * base + minus) / h**2
                for q in range(p + 1, d):
                    if not np.any(a[p, q]):
                        continue
                    def sh(sp, sq):
                        s = [0] * d
                        s[p], s[q] = sp, sq
                        return phi_at(*s)
                    mixed = (sh(1, 1) - sh(1, -1) - sh(-1, 1) + sh(-1, -1)) / (4 * h**2)
                    acc = acc + 2 * a[p, q] * um * mixed
            terms.append(dt * g.cell_volume * math.fsum(acc.ravel()))
        out.append(abs(math.fsum(terms)))
    return out


# ---------------------------------------------------------------------------
# persistence


def write_trace(trace: EvolutionTrace, directory, header: str | None = None) -> None:
    """Write ``meta.csv`` and one ``snap_XXXXXX.csv`` per snapshot into `directory`."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g = trace.grid
    with open(out / "meta.csv", "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(f"# {g.dim} {g.L!r} {g.n}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "outer_iterations", "substeps", "mass", "min_value",
                    "increment", "leak"])
        s0 = trace.snapshots[0]
        w.writerow([0, f"{trace.times[0]:.17g}", 0, 0, f"{s0.mass:.17g}", f"{s0.min:.17g}",
                    "0", "0"])
        for dg in trace.diagnostics:
            w.writerow([dg.step, f"{dg.time:.17g}", dg.outer_iterations, dg.substeps,
                        f"{dg.mass:.17g}", f"{dg.min_value:.17g}", f"{dg.increment:.17g}",
                        f"{dg.leak:.17g}"])
    for i, snap in enumerate(trace.snapshots):
        gr.write_density_csv(out / f"snap_{i:06d}.csv", snap)


def read_trace(directory) -> EvolutionTrace:
    src = Path(directory)
    times, diags = [], []
    with open(src / "meta.csv") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    for r in rows[1:]:
        times.append(float(r[1]))
        if int(r[0]) > 0:
            diags.append(StepDiagnostics(int(r[0]), float(r[1]), int(r[2]), int(r[3]),
                                         float(r[4]), float(r[5]), float(r[6]), float(r[7])))
    snaps = [gr.read_density_csv(src / f"snap_{i:06d}.csv") for i in range(len(times))]
    return EvolutionTrace(snaps[0].grid, np.array(times), snaps, diags)
