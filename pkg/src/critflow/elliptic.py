"""Dirichlet problems for -Laplace on radial and masked Cartesian grids."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import pyamg
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .geometry import ConfigurationError, Field, Grid

log = logging.getLogger(__name__)

DEFAULT_TOL = {"radial": 1e-10, "cartesian": 1e-8}


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class ParameterError(ValueError):
    """Bubble center outside the admissible region."""


@dataclass(frozen=True)
class EllipticSolveReport:
    solution: Field
    residual_linf: float
    iterations: int
    solver: str


class LaplaceOperator:
    """-Laplace restricted to the unknown nodes: (-L u) = A u_unknown - B g,
    with g the Dirichlet samples.

    Radial operators are stored in symmetric form S = diag(Vt) A, where Vt are
    the control volumes (sphere area factored out).
    """

    def __init__(self, grid: Grid, degree: int = 0):
        self.grid = grid
        self.degree = degree
        if grid.is_radial:
            self._build_radial()
        else:
            if degree:
                raise ConfigurationError("angular degree only applies to radial grids")
            self._build_cartesian()
        self._amg = None
        self._norm = None
        self.last_iterations = 1

    # -- construction -------------------------------------------------
    def _build_radial(self):
        g = self.grid
        r = g.r
        n = g.n
        N = len(r)
        faces = np.concatenate([[r[0]], 0.5 * (r[1:] + r[:-1]), [r[-1]]])
        vt = (faces[1:] ** n - faces[:-1] ** n) / n
        cface = faces[1:-1] ** (n - 1) / np.diff(r)       # between node i and i+1
        known = ~g.interior.copy()
        if self.degree and g.domain.kind == "ball":
            known[0] = True                                # dipole profile vanishes at r=0
        unk = np.flatnonzero(~known)
        diag = np.zeros(N)
        diag[:-1] += cface
        diag[1:] += cface
        if self.degree:
            ell = self.degree * (self.degree + n - 2)
            with np.errstate(divide="ignore"):
                diag += np.where(r > 0, ell * vt / np.where(r > 0, r, 1.0) ** 2, 0.0)
        self.unknown = unk
        self.dirichlet = np.flatnonzero(known)
        self.vt = vt[unk]
        self.sym_diag = diag[unk]
        self.sym_off = -cface[unk[:-1]]                    # coupling unk[k] <-> unk[k]+1
        # coupling of unknowns to Dirichlet nodes (symmetric-form coefficients)
        rows, cols, vals = [], [], []
        pos = {int(j): c for c, j in enumerate(self.dirichlet)}
        for k, i in enumerate(unk):
            for j, c in ((i - 1, cface[i - 1] if i > 0 else 0.0), (i + 1, cface[i] if i < N - 1 else 0.0)):
                if 0 <= j < N and int(j) in pos and c:
                    rows.append(k)
                    cols.append(pos[int(j)])
                    vals.append(c / vt[i])
        self.B = sp.csr_matrix((vals, (rows, cols)), shape=(len(unk), len(self.dirichlet)))
        off = self.sym_off / self.vt[:-1]
        self.A = sp.diags([self.sym_off / self.vt[1:], self.sym_diag / self.vt, off],
                          [-1, 0, 1], format="csr")
        self.dirichlet_points = g.points()[self.dirichlet]
        # Dirichlet slots whose value is fixed at zero regardless of the data
        self.pinned_zero = np.flatnonzero(g.interior[self.dirichlet])

    def _build_cartesian(self):
        g = self.grid
        h = g.h
        shape = g.shape
        unk = np.flatnonzero(g.interior)
        pos = -np.ones(g.size, dtype=np.int64)
        pos[unk] = np.arange(len(unk))
        strides = np.array([int(np.prod(shape[k + 1:])) for k in range(g.n)])
        cr = g.crossings
        theta = {}
        for c in range(len(cr.node)):
            theta[(int(cr.node[c]), int(cr.axis[c]), int(cr.sign[c]))] = (float(cr.theta[c]), c)
        rows, cols, vals = [], [], []
        brow, bcol, bval = [], [], []
        for k_ax in range(g.n):
            # distances to neighbours along this axis, in units of h
            tm = np.ones(len(unk))
            tp = np.ones(len(unk))
            cm = -np.ones(len(unk), dtype=np.int64)
            cp = -np.ones(len(unk), dtype=np.int64)
            for q, i in enumerate(unk):
                hit = theta.get((int(i), k_ax, -1))
                if hit:
                    tm[q], cm[q] = hit
                hit = theta.get((int(i), k_ax, 1))
                if hit:
                    tp[q], cp[q] = hit
            coef_m = 2.0 / (h * h * tm * (tm + tp))
            coef_p = 2.0 / (h * h * tp * (tm + tp))
            rows.append(np.arange(len(unk)))
            cols.append(np.arange(len(unk)))
            vals.append(coef_m + coef_p)
            for side, t_c, c_idx, coef in ((-1, tm, cm, coef_m), (1, tp, cp, coef_p)):
                inner = c_idx < 0
                nb = unk[inner] + side * strides[k_ax]
                rows.append(np.flatnonzero(inner))
                cols.append(pos[nb])
                vals.append(-coef[inner])
                brow.append(np.flatnonzero(~inner))
                bcol.append(c_idx[~inner])
                bval.append(coef[~inner])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        if np.any(cols < 0):
            raise ConfigurationError("mask is not closed under the cut-cell stencil")
        self.A = sp.csr_matrix((np.concatenate(vals), (rows, cols)), shape=(len(unk), len(unk)))
        self.B = sp.csr_matrix((np.concatenate(bval), (np.concatenate(brow), np.concatenate(bcol))),
                               shape=(len(unk), len(cr.node)))
        self.unknown = unk
        self.dirichlet = None
        self.dirichlet_points = g.boundary.points
        self.vt = g.weights[unk]

    # -- application ---------------------------------------------------
    @property
    def norm_inf(self) -> float:
        if self._norm is None:
            self._norm = float(abs(self.A).sum(axis=1).max())
        return self._norm

    @property
    def n_boundary(self) -> int:
        return self.B.shape[1]

    def neg_laplacian(self, u_full: np.ndarray, g: Optional[np.ndarray] = None) -> np.ndarray:
        """-L u at unknown nodes; Dirichlet data from u_full (radial) or g."""
        if g is None:
            g = u_full[self.dirichlet] if self.dirichlet is not None else np.zeros(self.n_boundary)
        return self.A @ u_full[self.unknown] - self.B @ g

    def scatter(self, u_unknown: np.ndarray, g: Optional[np.ndarray] = None) -> np.ndarray:
        out = np.zeros(self.grid.size)
        out[self.unknown] = u_unknown
        if self.dirichlet is not None and g is not None:
            out[self.dirichlet] = g
        return out

    def solve(self, rhs: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Unknown-node solution of A u = rhs + B g."""
        b = rhs + self.B @ g
        if self.grid.is_radial:
            return self.solve_shifted(np.zeros(len(b)), 1.0, b)
        if self._amg is None:
            self._amg = pyamg.smoothed_aggregation_solver(self.A)
        return self._amg_solve(self._amg, b)

    def _amg_solve(self, ml, b: np.ndarray) -> np.ndarray:
        residuals: list = []
        x = ml.solve(b, tol=1e-13, maxiter=200, accel="gmres", residuals=residuals)
        self.last_iterations = len(residuals)
        return x

    def solve_shifted(self, diag_extra: np.ndarray, coef: float, rhs: np.ndarray) -> np.ndarray:
        """Solve (diag(diag_extra) + coef * A) u = rhs."""
        if self.grid.is_radial:
            ab = np.zeros((2, len(rhs)))
            ab[0, 1:] = coef * self.sym_off
            ab[1] = coef * self.sym_diag + self.vt * diag_extra
            try:
                return sla.solveh_banded(ab, self.vt * rhs, check_finite=False)
            except np.linalg.LinAlgError:
                l_and_u = np.zeros((3, len(rhs)))
                l_and_u[0, 1:] = ab[0, 1:]
                l_and_u[1] = ab[1]
                l_and_u[2, :-1] = ab[0, 1:]
                return sla.solve_banded((1, 1), l_and_u, self.vt * rhs)
        M = (sp.diags(diag_extra) + coef * self.A).tocsr()
        return self._amg_solve(pyamg.smoothed_aggregation_solver(M), rhs)


def operator(grid: Grid, degree: int = 0) -> LaplaceOperator:
    """Cached Laplace operator for a grid (grids are immutable)."""
    key = ("laplace", degree)
    if key not in grid._cache:
        grid._cache[key] = LaplaceOperator(grid, degree)
    return grid._cache[key]


BoundaryData = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _sample(op: LaplaceOperator, boundary: BoundaryData) -> np.ndarray:
    if callable(boundary):
        b = np.array(boundary(op.dirichlet_points), dtype=float)
    else:
        b = np.array(boundary, dtype=float)
        if b.ndim == 0:
            b = np.full(op.n_boundary, float(b))
        elif b.shape != (op.n_boundary,):
            raise ValueError(f"boundary samples have shape {b.shape}, expected ({op.n_boundary},)")
    pinned = getattr(op, "pinned_zero", None)
    if pinned is not None and len(pinned):
        b[pinned] = 0.0
    return b


def solve_poisson(grid: Grid, rhs=None, boundary: BoundaryData = 0.0, *,
                  degree: int = 0, tol: Optional[float] = None) -> EllipticSolveReport:
    """Solve -Laplace u = rhs with Dirichlet data `boundary`."""
    op = operator(grid, degree)
    if rhs is None:
        f = np.zeros(len(op.unknown))
    else:
        fv = rhs.values if isinstance(rhs, Field) else np.broadcast_to(np.asarray(rhs, float), (grid.size,))
        f = np.asarray(fv)[op.unknown]
    if not np.all(np.isfinite(f)):
        raise ValueError("right-hand side is not finite")
    g = _sample(op, boundary)
    if not np.all(np.isfinite(g)):
        raise ValueError("boundary data is not finite")
    u = op.solve(f, g)
    resid = op.A @ u - f - op.B @ g
    # normwise backward error
    scale = max(op.norm_inf * np.max(np.abs(u), initial=0.0) + np.max(np.abs(f), initial=0.0)
                + np.max(np.abs(op.B @ g), initial=0.0), 1e-300)
    res = float(np.max(np.abs(resid), initial=0.0) / scale)
    tol = grid._cache.get("elliptic_tol", DEFAULT_TOL[grid.mode]) if tol is None else tol
    if not res <= tol:
        raise SolverError("elliptic solve did not reach tolerance", res)
    values = op.scatter(u, g)
    solver = "direct-banded" if grid.is_radial else "amg-gmres"
    return EllipticSolveReport(Field(grid, values, degree), res, op.last_iterations, solver)


def default_delta0(grid: Grid) -> float:
    return 0.25 * grid.domain.inradius


def check_center(grid: Grid, a, delta0: Optional[float] = None) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(grid.n)
    delta0 = default_delta0(grid) if delta0 is None else delta0
    d = float(grid.domain.signed_distance(a[None, :])[0])
    if d < delta0:
        raise ParameterError(f"center {a} has d(a)={d:.4g} < delta0={delta0:.4g}")
    if grid.is_radial and np.any(np.abs(a) > 1e-14):
        raise ConfigurationError("radial grids only admit centers at the origin")
    return a


def bubble_profile(n: int, rad: np.ndarray, lam: float) -> np.ndarray:
    c = (n * (n - 2)) ** ((n - 2) / 4.0)
    return c * (lam / (1.0 + lam * lam * rad * rad)) ** ((n - 2) / 2.0)


def harmonic_extension(grid: Grid, a, lam: float, delta0: Optional[float] = None) -> Field:
    """h_{a,lam}: harmonic in the domain, equal to the bubble U_{a,lam} on the boundary."""
    a = check_center(grid, a, delta0)
    n = grid.n
    bc = lambda pts: bubble_profile(n, np.linalg.norm(pts - a, axis=1), lam)
    return solve_poisson(grid, None, bc).solution


def green_regular_part(grid: Grid, a, delta0: Optional[float] = None) -> tuple[Field, float]:
    """H(a, .) with boundary data [n(n-2)]^{(n-2)/4} |a-x|^{2-n}; returns (field, H(a,a))."""
    a = check_center(grid, a, delta0)
    n = grid.n
    c = (n * (n - 2)) ** ((n - 2) / 4.0)
    bc = lambda pts: c * np.linalg.norm(pts - a, axis=1) ** (2 - n)
    H = solve_poisson(grid, None, bc).solution
    return H, interpolate(H, a)


def interpolate(f: Field, point) -> float:
    """Cubic (radial) or multilinear (Cartesian) interpolation of a field."""
    grid = f.grid
    point = np.asarray(point, dtype=float).reshape(grid.n)
    if grid.is_radial:
        if f.degree:
            raise ConfigurationError("interpolation of dipole fields not supported")
        rho = float(np.linalg.norm(point))
        spline = CubicSpline(grid.r, f.values, bc_type=((1, 0.0), "not-a-knot")) \
            if grid.domain.kind == "ball" else CubicSpline(grid.r, f.values)
        return float(spline(rho))
    interp = RegularGridInterpolator(grid.coords, f.values.reshape(grid.shape), method="linear")
    return float(interp(point[None, :])[0])
