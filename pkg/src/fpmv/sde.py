"""Particle simulation of the McKean-Vlasov SDE with coefficients frozen through a density trace.

Particles are split into fixed-size chunks; chunk ``c`` draws its normals from
a Philox generator keyed by ``(seed, c)``, so results do not depend on how many
worker threads run the chunks.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grid as gr
from .coeffs import regularized
from .evolve import EvolutionTrace

CHUNK = 16384
CONVENTIONS = ("match_fpe", "paper_literal")


class NotPSD(ValueError):
    pass


@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (N, d)
    time: float
    seed: int
    stream: int = 0  # normal draws consumed per particle so far
    escaped_fraction: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("particle positions must be finite")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def diffusion_amplitude(a_val, convention: str = "match_fpe") -> np.ndarray:
    """Symmetric square root ``S`` with ``S S^T = 2 a`` (or ``= a`` for ``paper_literal``).

    Accepts a single matrix or a stack with the matrix axes last.  Eigenvalues
    down to -1e-12 are clipped to zero.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown amplitude convention {convention!r}")
    a = np.asarray(a_val, dtype=float)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("a must be square")
    factor = 2.0 if convention == "match_fpe" else 1.0
    if a.shape[-1] == 1:
        if np.any(a < -1e-12):
            raise NotPSD("negative diffusion coefficient")
        return np.sqrt(factor * np.maximum(a, 0.0))
    if np.max(np.abs(a - np.swapaxes(a, -1, -2))) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise NotPSD("diffusion matrix is not symmetric")
    w, v = np.linalg.eigh(a)
    if np.any(w < -1e-12):
        raise NotPSD(f"eigenvalue {w.min():.3e} < 0")
    root = np.sqrt(factor * np.maximum(w, 0.0))
    return (v * root[..., None, :]) @ np.swapaxes(v, -1, -2)


# ---------------------------------------------------------------------------
# sampling and interpolation


def sample_density(f: gr.DensityField, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `count` points from the piecewise-constant density `f` (negative parts ignored).

    One dimension uses the exact inverse CDF; higher dimensions pick a cell by
    its mass and place the point uniformly inside it.
    """
    g = f.grid
    w = np.maximum(f.values, 0.0)
    cdf = np.concatenate([[0.0], np.cumsum(w)])
    cdf /= cdf[-1]
    if g.dim == 1:
        edges = -g.L + g.h * np.arange(g.n + 1)
        return np.interp(rng.random(count), cdf, edges)[:, None]
    cells = np.searchsorted(cdf, rng.random(count), side="right") - 1
    cells = np.clip(cells, 0, g.size - 1)
    idx = np.stack(np.unravel_index(cells, g.shape), axis=1)
    return -g.L + (idx + rng.random((count, g.dim))) * g.h


def interpolate(f_values: np.ndarray, grid: gr.Grid, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of cell-centred values at `pts` (shape (N, d)).

    Ghost cells beyond the box hold zero; the result is zero outside the box.
    """
    d, n, h, L = grid.dim, grid.n, grid.h, grid.L
    padded = np.pad(f_values.reshape(grid.shape), 1)
    s = (pts + L) / h + 0.5  # coordinate in padded-centre units
    k = np.clip(np.floor(s).astype(np.int64), 0, n)
    frac = s - k
    out = np.zeros(pts.shape[0])
    for corner in range(2**d):
        wgt = np.ones(pts.shape[0])
        idx = []
        for ax in range(d):
            bit = (corner >> ax) & 1
            wgt = wgt * (frac[:, ax] if bit else 1.0 - frac[:, ax])
            idx.append(k[:, ax] + bit)
        out += wgt * padded[tuple(idx)]
    inside = np.all(np.abs(pts) <= L, axis=1)
    return np.where(inside, out, 0.0)


# ---------------------------------------------------------------------------
# simulation


def _simulate_chunk(trace: EvolutionTrace, coeffs, count: int, dt: float, seed: int,
                    chunk: int, convention: str) -> list[np.ndarray]:
    rng = np.random.Generator(np.random.Philox(key=[seed, chunk]))
    g = trace.grid
    d = g.dim
    X = sample_density(trace.snapshots[0], count, rng)
    out = [X.copy()]
    for i in range(1, len(trace.times)):
        t0, t1 = trace.times[i - 1], trace.times[i]
        m = max(1, math.ceil((t1 - t0) / dt - 1e-9))
        step = (t1 - t0) / m
        u_prev, u_next = trace.snapshots[i - 1].values, trace.snapshots[i].values
        for s in range(m):
            theta = s / m
            uh = (1.0 - theta) * interpolate(u_prev, g, X) + theta * interpolate(u_next, g, X)
            xs = [X[:, k] for k in range(d)]
            drift = coeffs.drift(xs, uh).T
            a = np.moveaxis(coeffs.a_matrix(xs, uh), (0, 1), (-2, -1))
            amp = diffusion_amplitude(a, convention)
            xi = rng.standard_normal((count, d))
            noise = np.einsum("nij,nj->ni", amp, xi) if d > 1 else amp[:, 0, :] * xi
            X = X + drift * step + math.sqrt(step) * noise
        out.append(X.copy())
    return out


def simulate(trace: EvolutionTrace, coeffs, N: int, dt: float, seed: int = 0, *,
             convention: str = "match_fpe", threads: int = 1,
             chunk_size: int = CHUNK) -> list[ParticleEnsemble]:
    """Euler-Maruyama for ``dX = b(X, u(t,X)) dt + S(a(X, u(t,X))) dW``.

    The density ``u`` is read from `trace` (multilinear in x, linear in t).
    Each trace interval is split into equal substeps no longer than `dt`, so
    ensembles are recorded exactly at the trace times.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if len(trace.times) > 1 and dt > np.min(np.diff(trace.times)) * (1 + 1e-12):
        raise ValueError("dt must not exceed the trace time step")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown amplitude convention {convention!r}")
    rc = regularized(coeffs)
    sizes = [min(chunk_size, N - s) for s in range(0, N, chunk_size)]

    def run(c):
        return _simulate_chunk(trace, rc, sizes[c], dt, seed, c, convention)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(c) for c in range(len(sizes))]

    ht = np.diff(trace.times)
    steps_per = [max(1, math.ceil(h / dt - 1e-9)) for h in ht]
    draws = np.concatenate([[0], np.cumsum(steps_per)]) * trace.grid.dim
    out = []
    for i, t in enumerate(trace.times):
        X = np.concatenate([p[i] for p in parts], axis=0)
        esc = float(np.mean(np.any(np.abs(X) > trace.grid.L, axis=1)))
        out.append(ParticleEnsemble(X, float(t), seed, int(draws[i]), esc))
    return out


# ---------------------------------------------------------------------------
# comparison with the density trace


def estimate_marginal(ens: ParticleEnsemble, grid: gr.Grid) -> gr.DensityField:
    """Cell histogram of the particles normalized by ``N h^d`` (mass = in-box fraction)."""
    if ens.count < 1:
        raise ValueError("empty ensemble")
    X = ens.positions
    inside = np.all(np.abs(X) < grid.L, axis=1)
    k = np.clip(np.floor((X[inside] + grid.L) / grid.h).astype(np.int64), 0, grid.n - 1)
    flat = np.ravel_multi_index(tuple(k.T), grid.shape)
    counts = np.bincount(flat, minlength=grid.size)
    return grid.field(counts / (ens.count * grid.cell_volume))


def axis_marginal(f: gr.DensityField, axis: int) -> np.ndarray:
    """Mass per cell along `axis` (summed over the other axes)."""
    arr = f.array * f.grid.cell_volume
    other = tuple(k for k in range(f.grid.dim) if k != axis)
    return arr.sum(axis=other) if other else arr


def _grid_cdf(cell_mass: np.ndarray, L: float, h: float):
    w = np.maximum(cell_mass, 0.0)
    cdf = np.concatenate([[0.0], np.cumsum(w)])
    cdf /= cdf[-1]
    edges = -L + h * np.arange(len(w) + 1)
    return edges, cdf


def wasserstein1(samples: np.ndarray, cell_mass: np.ndarray, L: float, h: float) -> float:
    """Exact W1 between the empirical law of `samples` and a piecewise-constant density.

    Computes the integral of ``|F_N - F|`` where ``F_N`` is the empirical CDF and
    ``F`` is piecewise linear between cell edges (normalized to mass one).
    """
    xs = np.sort(np.asarray(samples, dtype=float))
    edges, cdf = _grid_cdf(cell_mass, L, h)
    brk = np.union1d(xs, edges)
    lo, hi = brk[:-1], brk[1:]
    fn = np.searchsorted(xs, lo, side="right") / xs.size
    da = np.interp(lo, edges, cdf, left=0.0, right=1.0) - fn
    db = np.interp(hi, edges, cdf, left=0.0, right=1.0) - fn
    width = hi - lo
    same = da * db >= 0
    aa, bb = np.abs(da), np.abs(db)
    with np.errstate(invalid="ignore", divide="ignore"):
        cross = np.where(aa + bb > 0, (da**2 + db**2) / (2 * (aa + bb)), 0.0)
    return math.fsum(np.where(same, 0.5 * (aa + bb), cross) * width)


def ks_statistic(samples: np.ndarray, cell_mass: np.ndarray, L: float, h: float) -> float:
    xs = np.sort(np.asarray(samples, dtype=float))
    edges, cdf = _grid_cdf(cell_mass, L, h)
    F = np.interp(xs, edges, cdf, left=0.0, right=1.0)
    n = xs.size
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(0, n) / n
    return float(max(upper.max(), lower.max(), 0.0))


@dataclass
class MarginalComparison:
    time: float
    N: int
    l1: float
    w1: list[float]
    ks: list[float]
    escaped_fraction: float = 0.0


def superposition_check(trace: EvolutionTrace, ensembles, times=None) -> list[MarginalComparison]:
    """Compare particle marginals with the density snapshots at the requested times."""
    by_time = {e.time: e for e in ensembles}
    ens_times = np.array(sorted(by_time))
    if times is None:
        times = ens_times
    g = trace.grid
    out = []
    for t in times:
        k = trace.index_of(t)
        if not math.isclose(trace.times[k], t, rel_tol=0, abs_tol=1e-12):
            warnings.warn(f"time {t} not in trace; using snapshot at {trace.times[k]}", stacklevel=2)
        snap = trace.snapshots[k]
        ens = by_time[ens_times[int(np.argmin(np.abs(ens_times - trace.times[k])))]]
        l1 = gr.l1_dist(estimate_marginal(ens, g), snap)
        w1, ks = [], []
        for ax in range(g.dim):
            cm = axis_marginal(snap, ax)
            w1.append(wasserstein1(ens.positions[:, ax], cm, g.L, g.h))
            ks.append(ks_statistic(ens.positions[:, ax], cm, g.L, g.h))
        out.append(MarginalComparison(float(trace.times[k]), ens.count, l1, w1, ks,
                                      ens.escaped_fraction))
    return out


# ---------------------------------------------------------------------------
# persistence


def write_ensemble_csv(path, ens: ParticleEnsemble) -> None:
    d = ens.positions.shape[1]
    header = "particle_id," + ",".join(f"x{k}" for k in range(1, d + 1))
    ids = np.arange(ens.count)[:, None]
    body = np.hstack([ids, ens.positions])
    fmt = ["%d"] + ["%.17g"] * d
    np.savetxt(path, body, fmt=fmt, delimiter=",", header=header, comments="")


def read_ensemble_csv(path, time: float = 0.0, seed: int = 0) -> ParticleEnsemble:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ParticleEnsemble(data[:, 1:], time, seed)


def write_comparison_csv(path, rows: list[MarginalComparison], header: str | None = None) -> None:
    d = len(rows[0].w1) if rows else 1
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "N", "L1"] + [f"W1_axis{k}" for k in range(1, d + 1)]
                   + [f"KS_axis{k}" for k in range(1, d + 1)])
        for r in rows:
            w.writerow([f"{r.time:.17g}", r.N, f"{r.l1:.17g}"] + [f"{v:.17g}" for v in r.w1]
                       + [f"{v:.17g}" for v in r.ks])
