"""Nemytskii coefficient sets, hypothesis sampling and regularization.

A coefficient set holds expressions ``a_ij(x, u)`` and ``b_i(x, u)``.  All
evaluation methods accept a sequence of coordinate arrays ``x`` and a density
array ``u`` that broadcast against each other; matrix-valued results carry the
component axes first, i.e. shape ``(d, d) + shape(u)``.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import expr as ex


class Mode(enum.Enum):
    NONDEGENERATE = "nondegenerate"
    DEGENERATE = "degenerate"


class MissingBounds(ValueError):
    pass


def _bcast(value, shape):
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


def _shape(x, u):
    return np.broadcast_shapes(np.shape(u), *(np.shape(xk) for xk in x))


@dataclass(frozen=True)
class CoefficientSet:
    dim: int
    a: tuple[tuple[ex.Expr, ...], ...]
    b: tuple[ex.Expr, ...]
    mode: Mode = Mode.NONDEGENERATE
    gamma: float = 0.0
    b_inf: float | None = None
    c_inf: float | None = None

    def __post_init__(self):
        d = self.dim
        if d < 1:
            raise ValueError("dim must be >= 1")
        if len(self.a) != d or any(len(row) != d for row in self.a) or len(self.b) != d:
            raise ValueError("coefficient shapes do not match dim")
        for i in range(d):
            for j in range(i + 1, d):
                if self.a[i][j] != self.a[j][i]:
                    raise ValueError(f"a[{i + 1}][{j + 1}] and a[{j + 1}][{i + 1}] differ")
        for e in self.expressions():
            if ex.max_x_index(e) > d:
                raise ValueError(f"{ex.unparse(e)!r} references a coordinate beyond x{d}")
            if ex.variables(e) - {"u"} - {f"x{k}" for k in range(1, d + 1)}:
                raise ValueError(f"{ex.unparse(e)!r} uses variables other than x and u")
        if self.mode is Mode.DEGENERATE:
            for e in self.expressions():
                if ex.max_x_index(e) > 0:
                    raise ValueError("degenerate mode requires x-independent coefficients")
        if self.mode is Mode.NONDEGENERATE and not self.gamma > 0:
            raise ValueError("gamma > 0 is required in nondegenerate mode")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        for name in ("b_inf", "c_inf"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_strings(cls, a, b, mode: Mode | str = Mode.NONDEGENERATE, **kw) -> "CoefficientSet":
        """Build a set from nested lists of expression strings.

        Only the upper triangle of `a` is read; the lower one is filled with
        the same objects.
        """
        d = len(b)
        if isinstance(a, str):
            a = [[a]]
        rows = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(i, d):
                src = a[i][j]
                e = src if isinstance(src, ex.Expr) else ex.parse(str(src), d)
                rows[i][j] = rows[j][i] = e
        bs = tuple(e if isinstance(e, ex.Expr) else ex.parse(str(e), d) for e in b)
        return cls(d, tuple(tuple(r) for r in rows), bs, Mode(mode), **kw)

    def expressions(self):
        for i in range(self.dim):
            yield from self.a[i][i:]
        yield from self.b

    @property
    def x_dependent(self) -> bool:
        return any(ex.max_x_index(e) > 0 for e in self.expressions())

    # -- pointwise fields -------------------------------------------------

    def a_matrix(self, x, u):
        shape = _shape(x, u)
        d = self.dim
        out = np.empty((d, d) + shape)
        for i in range(d):
            for j in range(i, d):
                out[i, j] = out[j, i] = _bcast(ex.evaluate(self.a[i][j], x, u), shape)
        return out

    def astar(self, x, u):
        return self.a_matrix(x, u) * np.asarray(u)

    def astar_u(self, x, u):
        """``a_ij + u * d(a_ij)/du``, the u-derivative of ``a_ij(x, u) u``."""
        shape = _shape(x, u)
        d = self.dim
        out = np.empty((d, d) + shape)
        for i in range(d):
            for j in range(i, d):
                v, du = ex.eval_with_partial(self.a[i][j], x, u, "u")
                out[i, j] = out[j, i] = _bcast(v + np.asarray(u) * du, shape)
        return out

    def a_x(self, x, u):
        """Array ``A[i, j] = d(a_ij)/dx_j`` (no summation)."""
        shape = _shape(x, u)
        d = self.dim
        out = np.zeros((d, d) + shape)
        for i in range(d):
            for j in range(d):
                if ex.max_x_index(self.a[i][j]) > 0:
                    out[i, j] = _bcast(ex.eval_with_partial(self.a[i][j], x, u, f"x{j + 1}")[1], shape)
        return out

    def x_drift(self, x, u):
        """``c_i = sum_j d(a_ij)/dx_j``, the lower-order part of ``D_j(a_ij u)``."""
        return self.a_x(x, u).sum(axis=1)

    def drift(self, x, u):
        shape = _shape(x, u)
        return np.stack([_bcast(ex.evaluate(e, x, u), shape) for e in self.b])


def astar(cs, x, u):
    """``a_ij(x, u) * u``."""
    return cs.astar(x, u)


def astar_u(cs, x, u):
    return cs.astar_u(x, u)


# ---------------------------------------------------------------------------
# regularization


@functools.lru_cache(maxsize=None)
def mollifier_rule(dim: int, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre rule for the standard bump on the unit ball of R^(dim+1).

    Returns ``(points, weights)`` with points of shape ``(q, dim + 1)`` and
    weights (bump density times quadrature weight) summing to one.
    """
    if nodes < 3:
        raise ValueError("mollifier quadrature needs at least 3 nodes per axis")
    z, w = np.polynomial.legendre.leggauss(nodes)
    grids = np.meshgrid(*([z] * (dim + 1)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = functools.reduce(np.multiply.outer, [w] * (dim + 1)).ravel()
    r2 = (pts**2).sum(axis=1)
    inside = r2 < 1.0
    dens = np.zeros_like(r2)
    dens[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    wts = wts * dens
    keep = wts > 0
    pts, wts = pts[keep], wts[keep]
    return pts, wts / wts.sum()


@dataclass(frozen=True)
class RegularizedSet:
    """A coefficient set with optional vanishing viscosity and mollification.

    ``viscosity_eps`` adds ``eps * I`` to ``a``; ``mollifier_eps`` convolves the
    fields in (x, u) with a bump of radius ``mollifier_eps``.
    """

    base: CoefficientSet
    viscosity_eps: float = 0.0
    mollifier_eps: float = 0.0
    mollifier_quadrature_nodes: int = 5
    _rule: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.viscosity_eps < 0 or self.mollifier_eps < 0:
            raise ValueError("regularization parameters must be >= 0")
        if self.mollifier_eps > 0:
            object.__setattr__(self, "_rule",
                               mollifier_rule(self.base.dim, self.mollifier_quadrature_nodes))

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def mode(self) -> Mode:
        return self.base.mode

    def _smooth(self, fn, x, u):
        if self.mollifier_eps == 0:
            return fn(x, u)
        pts, wts = self._rule
        eps = self.mollifier_eps
        u = np.asarray(u, dtype=float)
        acc = None
        for p, w in zip(pts, wts):
            xs = [np.asarray(xk) - eps * p[k] for k, xk in enumerate(x)]
            term = w * fn(xs, u - eps * p[-1])
            acc = term if acc is None else acc + term
        return acc

    def _eye(self, u, x):
        d = self.dim
        return np.eye(d).reshape((d, d) + (1,) * len(_shape(x, u)))

    def a_matrix(self, x, u):
        out = self._smooth(self.base.a_matrix, x, u)
        if self.viscosity_eps:
            out = out + self.viscosity_eps * self._eye(u, x)
        return out

    def astar(self, x, u):
        out = self._smooth(self.base.astar, x, u)
        if self.viscosity_eps:
            out = out + self.viscosity_eps * self._eye(u, x) * np.asarray(u)
        return out

    def astar_u(self, x, u):
        out = self._smooth(self.base.astar_u, x, u)
        if self.viscosity_eps:
            out = out + self.viscosity_eps * self._eye(u, x)
        return out

    def a_x(self, x, u):
        return self._smooth(self.base.a_x, x, u)

    def x_drift(self, x, u):
        return self._smooth(self.base.x_drift, x, u)

    def drift(self, x, u):
        return self._smooth(self.base.drift, x, u)


def regularized(cs) -> RegularizedSet:
    return cs if isinstance(cs, RegularizedSet) else RegularizedSet(cs)


def add_viscosity(cs, eps: float) -> RegularizedSet:
    if not eps > 0:
        raise ValueError("viscosity eps must be > 0")
    r = regularized(cs)
    return RegularizedSet(r.base, r.viscosity_eps + eps, r.mollifier_eps, r.mollifier_quadrature_nodes)


def mollify(cs, eps: float, nodes: int = 5) -> RegularizedSet:
    if not eps > 0:
        raise ValueError("mollifier eps must be > 0")
    if nodes < 3:
        raise ValueError("mollifier quadrature needs at least 3 nodes per axis")
    r = regularized(cs)
    if r.base.mode is not Mode.NONDEGENERATE:
        raise ValueError("mollification applies to nondegenerate coefficient sets")
    return RegularizedSet(r.base, r.viscosity_eps, eps, nodes)


# ---------------------------------------------------------------------------
# hypothesis sampling


@dataclass(frozen=True)
class SampleBox:
    """Axis-aligned sampling box: x in [x_lo, x_hi]^d, u in [u_lo, u_hi]."""

    x_lo: float
    x_hi: float
    u_lo: float
    u_hi: float

    def points(self, dim: int, samples: int, seed: int):
        pts = qmc.Halton(d=dim + 1, scramble=True, seed=seed).random(samples)
        lo = np.array([self.x_lo] * dim + [self.u_lo])
        hi = np.array([self.x_hi] * dim + [self.u_hi])
        pts = lo + pts * (hi - lo)
        return [pts[:, k] for k in range(dim)], pts[:, dim]


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    value: float
    bound: float
    witness: tuple[float, ...] | None = None


@dataclass
class HypothesisReport:
    box: SampleBox
    samples: int
    seed: int
    checks: list[HypothesisCheck]
    b_inf: float
    c_inf: float
    min_eigenvalue: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [
            f"box.x = [{self.box.x_lo!r}, {self.box.x_hi!r}]",
            f"box.u = [{self.box.u_lo!r}, {self.box.u_hi!r}]",
            f"samples = {self.samples}",
            f"seed = {self.seed}",
            f"min_eigenvalue = {self.min_eigenvalue:.17g}",
            f"b_inf = {self.b_inf:.17g}",
            f"c_inf = {self.c_inf:.17g}",
        ]
        for c in self.checks:
            lines.append(f"{c.name}.value = {c.value:.17g}")
            lines.append(f"{c.name}.bound = {c.bound:.17g}")
            lines.append(f"{c.name}.pass = {str(c.passed).lower()}")
            if c.witness is not None:
                lines.append(f"{c.name}.witness = " + " ".join(f"{w:.17g}" for w in c.witness))
        return "\n".join(lines) + "\n"

    def to_rows(self) -> list[list]:
        rows = [["hypothesis", "value", "bound", "pass", "witness"]]
        for c in self.checks:
            wit = "" if c.witness is None else " ".join(f"{w:.17g}" for w in c.witness)
            rows.append([c.name, f"{c.value:.17g}", f"{c.bound:.17g}", str(c.passed).lower(), wit])
        return rows


def _witness(x, u, k):
    return tuple(float(xk[k]) for xk in x) + (float(u[k]),)


def check_hypotheses(cs, box: SampleBox, samples: int = 4096, seed: int = 0) -> HypothesisReport:
    """Sample the structural hypotheses on `box` and report pass/fail per item.

    Checked: ellipticity of the symmetrized ``a + u a_u`` (>= gamma, or >= 0 in
    degenerate mode), the declared sup bounds on ``b`` and ``d(a_ij)/dx_j``,
    ``b(x, 0) = 0`` and symmetry of ``a``.  Undeclared bounds are estimated
    from the sample and inflated by 10%.
    """
    if samples < 1000:
        raise ValueError("samples must be >= 1000")
    r = regularized(cs)
    base = r.base
    d = r.dim
    x, u = box.points(d, samples, seed)
    checks = []

    m = r.astar_u(x, u)
    sym = 0.5 * (m + np.swapaxes(m, 0, 1))
    eig = np.linalg.eigvalsh(np.moveaxis(sym, (0, 1), (-2, -1)))[..., 0]
    k = int(np.argmin(eig))
    min_eig = float(eig[k])
    if base.mode is Mode.NONDEGENERATE:
        need = base.gamma + r.viscosity_eps
        checks.append(HypothesisCheck("H2", min_eig >= need * (1 - 1e-12), min_eig, need,
                                      _witness(x, u, k)))
    else:
        need = r.viscosity_eps
        checks.append(HypothesisCheck("H2'", min_eig >= need * (1 - 1e-12) - 1e-12, min_eig, need,
                                      _witness(x, u, k)))

    bvals = np.abs(r.drift(x, u)).max(axis=0)
    k = int(np.argmax(bvals))
    bmax = float(bvals[k])
    b_inf = base.b_inf if base.b_inf is not None else 1.1 * bmax
    checks.append(HypothesisCheck("b_bound", bmax <= b_inf * (1 + 1e-12), bmax, b_inf,
                                  _witness(x, u, k)))

    cvals = np.abs(r.a_x(x, u)).reshape(d * d, -1).max(axis=0)
    k = int(np.argmax(cvals))
    cmax = float(cvals[k])
    c_inf = base.c_inf if base.c_inf is not None else 1.1 * cmax
    checks.append(HypothesisCheck("c_bound", cmax <= c_inf * (1 + 1e-12), cmax, c_inf,
                                  _witness(x, u, k)))

    zero = np.zeros_like(u)
    b0 = np.abs(base.drift(x, zero)).max(axis=0)
    k = int(np.argmax(b0))
    checks.append(HypothesisCheck("H3", float(b0[k]) <= 1e-14, float(b0[k]), 0.0,
                                  _witness(x, zero, k)))

    a = r.a_matrix(x, u)
    asym = np.abs(a - np.swapaxes(a, 0, 1)).reshape(d * d, -1).max(axis=0)
    k = int(np.argmax(asym))
    checks.append(HypothesisCheck("symmetry", float(asym[k]) == 0.0, float(asym[k]), 0.0,
                                  _witness(x, u, k)))

    return HypothesisReport(box, samples, seed, checks, b_inf, c_inf, min_eig)


def _structural_zero(e: ex.Expr) -> bool:
    return isinstance(e, ex.Num) and e.value == 0.0


def lambda0(cs, box: SampleBox | None = None, samples: int = 4096, seed: int = 0) -> float:
    """Largest admissible resolvent step ``gamma / (b_inf^2 + c_inf^2)``.

    Returns ``math.inf`` for pure diffusion.  In degenerate mode the
    ellipticity constant is the added viscosity.  Undeclared bounds are taken
    as zero when structurally evident, otherwise estimated on `box`.
    """
    r = regularized(cs)
    base = r.base
    b_inf, c_inf = base.b_inf, base.c_inf
    if b_inf is None and all(_structural_zero(e) for e in base.b):
        b_inf = 0.0
    if c_inf is None and not base.x_dependent:
        c_inf = 0.0
    if b_inf is None or c_inf is None:
        if box is None:
            raise MissingBounds("b_inf/c_inf undeclared and no sampling box to estimate them")
        rep = check_hypotheses(r, box, samples, seed)
        b_inf = rep.b_inf if b_inf is None else b_inf
        c_inf = rep.c_inf if c_inf is None else c_inf
    if base.mode is Mode.NONDEGENERATE:
        gamma = base.gamma + r.viscosity_eps
    else:
        gamma = r.viscosity_eps
    denom = b_inf**2 + c_inf**2
    if denom == 0:
        return math.inf
    return gamma / denom
