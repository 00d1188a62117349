"""Uniform cell-centred grids, the linearized resolvent operator and its solves.

The linearized operator at frozen state ``v`` is the finite-volume form of

    u - lam * sum_ij D_i[K_ij(x, v) D_j u] + lam * sum_i D_i[w_i(x, v) u]

with ``K = a + v a_u`` (the u-derivative of ``a * u``) and
``w_i = b_i - sum_j d(a_ij)/dx_j``.  Cells outside the box are ghost cells
holding zero (homogeneous Dirichlet data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .coeffs import regularized
from .expr import EvalDomainError


class NonConvergence(RuntimeError):
    def __init__(self, max_iter: int, residual: float):
        self.max_iter = max_iter
        self.residual = residual
        super().__init__(f"linear solve did not converge in {max_iter} iterations "
                         f"(relative residual {residual:.3e})")


class BreakdownError(RuntimeError):
    pass


class MatrixStructureError(AssertionError):
    pass


@dataclass(frozen=True)
class Grid:
    dim: int
    L: float
    n: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.n < 8:
            raise ValueError("need at least 8 cells per axis")
        if not self.L > 0:
            raise ValueError("half width L must be > 0")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def centers(self) -> np.ndarray:
        return -self.L + (np.arange(self.n) + 0.5) * self.h

    def coords(self, pad: int = 0) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinates as `dim` arrays of the grid shape (optionally padded)."""
        c = -self.L + (np.arange(-pad, self.n + pad) + 0.5) * self.h
        return tuple(np.meshgrid(*([c] * self.dim), indexing="ij"))

    def points(self) -> np.ndarray:
        """Flat ``(size, dim)`` array of cell centres in storage order."""
        return np.stack([c.ravel() for c in self.coords()], axis=1)

    def field(self, values) -> "DensityField":
        return DensityField(self, np.asarray(values, dtype=float).reshape(self.size))

    def zeros(self) -> "DensityField":
        return DensityField(self, np.zeros(self.size))

    def sample(self, fn) -> "DensityField":
        """Field of ``fn(*coords)`` at the cell centres."""
        vals = np.broadcast_to(np.asarray(fn(*self.coords()), dtype=float), self.shape)
        return self.field(vals.ravel())


@dataclass
class DensityField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError("values do not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite")

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    @property
    def mass(self) -> float:
        return mass(self)

    @property
    def min(self) -> float:
        return float(self.values.min())

    def __sub__(self, other: "DensityField") -> "DensityField":
        _same_grid(self, other)
        return DensityField(self.grid, self.values - other.values)

    def __add__(self, other: "DensityField") -> "DensityField":
        _same_grid(self, other)
        return DensityField(self.grid, self.values + other.values)

    def __mul__(self, c: float) -> "DensityField":
        return DensityField(self.grid, self.values * c)

    __rmul__ = __mul__

    def normalized(self) -> "DensityField":
        return DensityField(self.grid, self.values / self.mass)


def _same_grid(f: DensityField, g: DensityField) -> None:
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")


def mass(f: DensityField) -> float:
    return math.fsum(f.values) * f.grid.cell_volume


def l1_norm(f: DensityField) -> float:
    return math.fsum(np.abs(f.values)) * f.grid.cell_volume


def l1_dist(f: DensityField, g: DensityField) -> float:
    _same_grid(f, g)
    return math.fsum(np.abs(f.values - g.values)) * f.grid.cell_volume


def shift(f: DensityField, axis: int = 0, cells: int = 1) -> DensityField:
    """Translate `f` by whole cells along `axis`, filling with zeros."""
    arr = f.array
    out = np.zeros_like(arr)
    n = f.grid.n
    src = [slice(None)] * f.grid.dim
    dst = [slice(None)] * f.grid.dim
    if cells >= 0:
        src[axis], dst[axis] = slice(0, n - cells), slice(cells, n)
    else:
        src[axis], dst[axis] = slice(-cells, n), slice(0, n + cells)
    out[tuple(dst)] = arr[tuple(src)]
    return f.grid.field(out.ravel())


# ---------------------------------------------------------------------------
# CSV round trip


def write_density_csv(path, f: DensityField) -> None:
    g = f.grid
    pts = g.points()
    lines = [f"# {g.dim} {g.L!r} {g.n}"]
    for k in range(g.size):
        coords = ",".join(f"{c:.17g}" for c in pts[k])
        lines.append(f"{k},{coords},{f.values[k]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_density_csv(path) -> DensityField:
    text = Path(path).read_text().splitlines()
    head = text[0].lstrip("#").split()
    g = Grid(int(head[0]), float(head[1]), int(head[2]))
    vals = np.empty(g.size)
    for line in text[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        vals[int(parts[0])] = float(parts[-1])
    return DensityField(g, vals)


# ---------------------------------------------------------------------------
# assembly


@dataclass
class SparseOperator:
    """Discrete ``I + lam * A_v`` plus the data needed to account for boundary leak."""

    grid: Grid
    matrix: sp.csr_matrix
    lam: float
    state: np.ndarray
    leak_row: np.ndarray  # leak(u) = leak_row @ u, mass leaving through the boundary
    cross_terms: bool
    _banded: np.ndarray | None = field(default=None, repr=False)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u

    def leak(self, u) -> float:
        u = u.values if isinstance(u, DensityField) else u
        return math.fsum(self.leak_row * u)

    def banded(self) -> np.ndarray:
        if self._banded is None:
            if self.grid.dim != 1:
                raise ValueError("banded storage is only defined in one dimension")
            m = self.matrix.tocsr()
            n = self.grid.n
            ab = np.zeros((3, n))
            ab[1] = m.diagonal()
            ab[0, 1:] = m.diagonal(1)
            ab[2, :-1] = m.diagonal(-1)
            self._banded = ab
        return self._banded


def _flat_index(grid: Grid) -> np.ndarray:
    idx = np.full((grid.n + 2,) * grid.dim, -1, dtype=np.int64)
    inner = (slice(1, -1),) * grid.dim
    idx[inner] = np.arange(grid.size).reshape(grid.shape)
    return idx


def _face_slices(d: int, axis: int, n: int, side: int, offset: dict | None = None):
    """Padded-array slice selecting, for every face normal to `axis`, the cell on `side` (0 left, 1 right).

    `offset` shifts the selection by +-1 along other axes (for corner averages).
    """
    sl = []
    for k in range(d):
        if k == axis:
            sl.append(slice(side, n + 1 + side))
        else:
            o = (offset or {}).get(k, 0)
            sl.append(slice(1 + o, n + 1 + o))
    return tuple(sl)


def assemble(grid: Grid, coeffs, v: DensityField, lam: float, *,
             boundary: str = "dirichlet", drift_scheme: str = "upwind",
             debug: bool = False) -> SparseOperator:
    """Assemble the finite-volume matrix of ``I + lam * A_v`` on `grid`.

    Diffusive face fluxes use the arithmetic mean of ``K`` over the two
    adjacent cells and a centred difference; mixed derivatives use four-point
    corner averages; the velocity ``w`` is upwinded by the sign of its face
    mean (``drift_scheme="centered"`` is available for accuracy studies).
    ``boundary="noflux"`` closes the box instead of imposing zero Dirichlet
    data; it is not the whole-space problem and conserves mass exactly.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if v.grid != grid:
        raise ValueError("state lives on a different grid")
    if boundary not in ("dirichlet", "noflux"):
        raise ValueError(f"unknown boundary condition {boundary!r}")
    if drift_scheme not in ("upwind", "centered"):
        raise ValueError(f"unknown drift scheme {drift_scheme!r}")
    rc = regularized(coeffs)
    d, n, h = grid.dim, grid.n, grid.h
    N = grid.size

    xp = grid.coords(pad=1)
    vp = np.pad(v.array, 1)
    try:
        K = rc.astar_u(xp, vp)
        W = rc.drift(xp, vp) - rc.x_drift(xp, vp)
    except EvalDomainError as err:
        raise EvalDomainError(f"{err.reason} (while assembling on a {grid.shape} grid)",
                              err.subexpr) from err
    idx = _flat_index(grid)

    rows, cols, vals = [], [], []
    leak = np.zeros(N)
    scale = lam / h
    cross = False
    for i in range(d):
        A = _face_slices(d, i, n, 0)
        B = _face_slices(d, i, n, 1)
        ia, ib = idx[A].ravel(), idx[B].ravel()
        if boundary == "noflux":
            keep = (ia >= 0) & (ib >= 0)
        else:
            keep = np.ones(ia.shape, dtype=bool)
        # flux F = sum(coef * u[col]) through each face, oriented along +axis i
        terms = []
        kf = 0.5 * (K[i, i][A] + K[i, i][B]).ravel()
        wf = 0.5 * (W[i][A] + W[i][B]).ravel()
        if drift_scheme == "upwind":
            wa, wb = np.maximum(wf, 0.0), -np.maximum(-wf, 0.0)
        else:
            wa = wb = 0.5 * wf
        terms.append((ia, kf / h + wa))
        terms.append((ib, -kf / h + wb))
        for j in range(d):
            if j == i:
                continue
            kij = 0.5 * (K[i, j][A] + K[i, j][B]).ravel()
            if not np.any(kij):
                continue
            cross = True
            c = -kij / (4.0 * h)
            for side in (0, 1):
                plus = idx[_face_slices(d, i, n, side, {j: 1})].ravel()
                minus = idx[_face_slices(d, i, n, side, {j: -1})].ravel()
                terms.append((plus, c))
                terms.append((minus, -c))
        for col, coef in terms:
            ok = keep & (col >= 0)
            ra = ok & (ia >= 0)
            rows.append(ia[ra]); cols.append(col[ra]); vals.append(scale * coef[ra])
            rb = ok & (ib >= 0)
            rows.append(ib[rb]); cols.append(col[rb]); vals.append(-scale * coef[rb])
            # outward boundary flux: right faces with ghost B, left faces with ghost A
            out_r = ok & (ib < 0)
            np.add.at(leak, col[out_r], coef[out_r])
            out_l = ok & (ia < 0)
            np.add.at(leak, col[out_l], -coef[out_l])

    rows.append(np.arange(N)); cols.append(np.arange(N)); vals.append(np.ones(N))
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(N, N)).tocsr()
    mat.sum_duplicates()
    op = SparseOperator(grid, mat, float(lam), v.values.copy(),
                        lam * h ** (d - 1) * leak, cross)
    if not np.all(np.isfinite(mat.data)):
        raise FloatingPointError("non-finite entries in assembled operator")
    if debug and d == 1 and not cross:
        check_m_matrix(op)
    return op


def check_m_matrix(op: SparseOperator) -> None:
    """Raise unless the matrix is a Z-matrix with nonnegative column diagonal dominance."""
    m = op.matrix.tocsc()
    diag = m.diagonal()
    off = m - sp.diags(diag)
    if off.nnz and off.data.max() > 0:
        raise MatrixStructureError("positive off-diagonal entry")
    margin = diag - np.asarray(abs(off).sum(axis=0)).ravel()
    if margin.min() < -1e-12 * max(1.0, diag.max()):
        raise MatrixStructureError(f"column diagonal dominance violated ({margin.min():.3e})")


# ---------------------------------------------------------------------------
# linear solves


def bicgstab(A, b: np.ndarray, x0: np.ndarray | None = None, tol: float = 1e-12,
             max_iter: int = 1000) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned BiCGSTAB; returns (x, iterations).

    Raises BreakdownError when rho or omega vanishes and NonConvergence when
    `max_iter` is exhausted.
    """
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    r = b - A @ x
    rhat = r.copy()
    rho = alpha = omega = 1.0
    vv = p = np.zeros_like(b)
    for it in range(1, max_iter + 1):
        rho_new = rhat @ r
        if rho_new == 0.0:
            raise BreakdownError("rho = 0")
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * vv)
        phat = dinv * p
        vv = A @ phat
        denom = rhat @ vv
        if denom == 0.0:
            raise BreakdownError("<rhat, v> = 0")
        alpha = rho_new / denom
        s = r - alpha * vv
        if np.linalg.norm(s) <= tol * bnorm:
            x = x + alpha * phat
            return x, it
        shat = dinv * s
        t = A @ shat
        tt = t @ t
        if tt == 0.0:
            raise BreakdownError("t = 0")
        omega = (t @ s) / tt
        x = x + alpha * phat + omega * shat
        r = s - omega * t
        rho = rho_new
        if np.linalg.norm(r) <= tol * bnorm:
            # recompute the true residual before accepting
            r = b - A @ x
            if np.linalg.norm(r) <= tol * bnorm:
                return x, it
        if omega == 0.0:
            raise BreakdownError("omega = 0")
    raise NonConvergence(max_iter, float(np.linalg.norm(b - A @ x) / bnorm))


def solve_linear(op: SparseOperator, rhs, tol: float = 1e-12, max_iter: int = 2000) -> np.ndarray:
    """Solve ``op u = rhs`` to relative 2-norm residual `tol`.

    One-dimensional operators are tridiagonal and solved directly; otherwise
    BiCGSTAB is used, restarted once from the current iterate on breakdown.
    """
    b = rhs.values if isinstance(rhs, DensityField) else np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side must be finite")
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if op.grid.dim == 1:
        u = scipy.linalg.solve_banded((1, 1), op.banded(), b, check_finite=False)
    else:
        try:
            u, _ = bicgstab(op.matrix, b, b / op.matrix.diagonal(), tol, max_iter)
        except BreakdownError:
            u, _ = bicgstab(op.matrix, b, None, tol, max_iter)
    res = float(np.linalg.norm(op.apply(u) - b) / bnorm)
    if not res <= tol:
        raise NonConvergence(max_iter, res)
    return u
