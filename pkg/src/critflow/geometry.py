"""Domains and grids with their quadrature rules.

Two discretizations are supported:

* ``radial`` -- a graded 1D grid in the radius for balls and annuli.  Fields
  are radial profiles; a field may also carry angular degree 1 (a dipole
  ``g(r) x_j/r``), which is what the translation kernel directions look like
  around a centered bubble.
* ``cartesian`` -- a uniform grid on the bounding box with the domain masked
  out and boundary intercepts along the grid axes (Shortley-Weller cut cells).

Volume quadrature uses control-volume weights.  On radial grids the same
weights make the discrete Laplacian self-adjoint, which keeps the discrete
flow identities exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

SUPPORTED_DIMENSIONS = (3, 4, 5)


class ConfigurationError(ValueError):
    """Invalid domain/grid combination or parameter."""


class ResolutionError(ValueError):
    """The grid cannot resolve the requested feature."""


class DomainError(ValueError):
    """A pointwise operation left its mathematical domain."""


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / gamma_fn(n / 2.0)


@dataclass(frozen=True)
class Domain:
    kind: str  # "ball" | "annulus" | "box"
    n: int
    params: tuple[float, ...]

    def __post_init__(self):
        if self.n not in SUPPORTED_DIMENSIONS:
            raise ConfigurationError(f"dimension n={self.n} not supported (need 3, 4 or 5)")
        p = self.params
        if self.kind == "ball":
            if len(p) != 1 or not p[0] > 0:
                raise ConfigurationError("ball needs one radius R > 0")
        elif self.kind == "annulus":
            if len(p) != 2 or not 0 < p[0] < p[1]:
                raise ConfigurationError("annulus needs 0 < R_in < R_out")
        elif self.kind == "box":
            if len(p) != self.n or min(p) <= 0:
                raise ConfigurationError("box needs n positive half-widths")
        else:
            raise ConfigurationError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def ball(cls, R: float, n: int = 3) -> "Domain":
        return cls("ball", n, (float(R),))

    @classmethod
    def annulus(cls, r_in: float, r_out: float, n: int = 3) -> "Domain":
        return cls("annulus", n, (float(r_in), float(r_out)))

    @classmethod
    def box(cls, half_widths: Sequence[float], n: Optional[int] = None) -> "Domain":
        hw = tuple(float(h) for h in half_widths)
        return cls("box", n if n is not None else len(hw), hw)

    @property
    def radially_symmetric(self) -> bool:
        return self.kind in ("ball", "annulus")

    @property
    def outer_radius(self) -> float:
        if self.kind == "box":
            return float(np.linalg.norm(self.params))
        return self.params[-1]

    @property
    def inradius(self) -> float:
        if self.kind == "ball":
            return self.params[0]
        if self.kind == "annulus":
            return 0.5 * (self.params[1] - self.params[0])
        return min(self.params)

    def volume(self) -> float:
        n = self.n
        if self.kind == "box":
            return float(np.prod([2.0 * h for h in self.params]))
        ball = sphere_area(n) / n
        if self.kind == "ball":
            return ball * self.params[0] ** n
        return ball * (self.params[1] ** n - self.params[0] ** n)

    def surface_area(self) -> float:
        n = self.n
        if self.kind == "ball":
            return sphere_area(n) * self.params[0] ** (n - 1)
        if self.kind == "annulus":
            return sphere_area(n) * (self.params[0] ** (n - 1) + self.params[1] ** (n - 1))
        hw = np.array(self.params)
        total = 0.0
        for k in range(n):
            total += 2.0 * np.prod(2.0 * np.delete(hw, k))
        return float(total)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Distance to the boundary, positive inside (exact for ball/annulus)."""
        x = np.atleast_2d(x)
        if self.kind == "box":
            return np.min(np.asarray(self.params) - np.abs(x), axis=1)
        rad = np.linalg.norm(x, axis=1)
        if self.kind == "ball":
            return self.params[0] - rad
        return np.minimum(rad - self.params[0], self.params[1] - rad)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.signed_distance(x) > 0

    def outward_normal(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "box":
            hw = np.asarray(self.params)
            k = np.argmax(np.abs(x) / hw, axis=1)
            nu = np.zeros_like(x)
            nu[np.arange(len(x)), k] = np.sign(x[np.arange(len(x)), k])
            return nu
        rad = np.linalg.norm(x, axis=1, keepdims=True)
        nu = x / rad
        if self.kind == "annulus":
            inner = np.abs(rad[:, 0] - self.params[0]) < np.abs(rad[:, 0] - self.params[1])
            nu[inner] *= -1.0
        return nu

    def axis_intercept(self, x0: np.ndarray, axis: int, sign: np.ndarray, hmax: float) -> np.ndarray:
        """Distance t in (0, hmax] from interior points x0 to the boundary along sign*e_axis."""
        x0 = np.atleast_2d(x0)
        sign = np.asarray(sign, dtype=float)
        xk = x0[:, axis]
        t_best = np.full(len(x0), np.inf)
        if self.kind == "box":
            t_best = self.params[axis] - sign * xk
        else:
            rest = np.sum(x0 ** 2, axis=1) - xk ** 2
            for rho in self.params:
                disc = rho ** 2 - rest
                ok = disc >= 0
                sq = np.sqrt(np.where(ok, disc, 0.0))
                for y in (sq, -sq):
                    t = sign * (y - xk)
                    good = ok & (t > 0) & (t <= hmax * (1 + 1e-12))
                    t_best = np.where(good & (t < t_best), t, t_best)
        if np.any(~np.isfinite(t_best)) or np.any(t_best <= 0):
            raise ResolutionError("failed to locate boundary intercept along grid axis")
        return np.minimum(t_best, hmax)


@dataclass(frozen=True)
class BoundaryQuadrature:
    points: np.ndarray   # (Q, n)
    normals: np.ndarray  # (Q, n) outward unit normals
    weights: np.ndarray  # (Q,) surface weights dS

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class Crossings:
    """Axis crossings of the boundary on a Cartesian grid (one per cut grid edge)."""
    node: np.ndarray     # flat index of the interior node
    axis: np.ndarray
    sign: np.ndarray     # +1 / -1 direction of the exterior neighbour
    theta: np.ndarray    # intercept distance / h in (0, 1]


@dataclass(frozen=True, eq=False)
class Grid:
    domain: Domain
    mode: str                      # "radial" | "cartesian"
    spec: dict                     # construction parameters (for checkpoints)
    coords: tuple                  # radial: (r,), cartesian: 1D axes
    weights: np.ndarray            # volume weight per node (flattened)
    interior: np.ndarray           # bool mask of unknown nodes (flattened)
    distance: np.ndarray           # d(x) per node (flattened), <= 0 outside
    boundary: BoundaryQuadrature
    crossings: Optional[Crossings] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def is_radial(self) -> bool:
        return self.mode == "radial"

    @property
    def shape(self) -> tuple:
        return tuple(len(c) for c in self.coords)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def r(self) -> np.ndarray:
        if not self.is_radial:
            raise ConfigurationError("r is only defined on radial grids")
        return self.coords[0]

    @property
    def h(self) -> float:
        if self.is_radial:
            raise ConfigurationError("uniform spacing only defined on Cartesian grids")
        return float(self.coords[0][1] - self.coords[0][0])

    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, n); radial nodes lie on the first axis."""
        if "points" not in self._cache:
            if self.is_radial:
                pts = np.zeros((self.size, self.n))
                pts[:, 0] = self.coords[0]
            else:
                mesh = np.meshgrid(*self.coords, indexing="ij")
                pts = np.stack([m.ravel() for m in mesh], axis=1)
            pts.setflags(write=False)
            self._cache["points"] = pts
        return self._cache["points"]

    def radius_from(self, a: np.ndarray) -> np.ndarray:
        """|x - a| at every node.  Radial grids only admit the symmetry center."""
        a = np.asarray(a, dtype=float)
        if self.is_radial:
            if np.any(np.abs(a) > 1e-14):
                raise ConfigurationError("radial grids only admit points at the symmetry center")
            return self.coords[0].copy()
        return np.linalg.norm(self.points() - a, axis=1)

    def local_spacing(self, a: np.ndarray, radius: float) -> float:
        """Largest node spacing within `radius` of a (at least the spacing at a)."""
        if not self.is_radial:
            return self.h
        r = self.coords[0]
        d = np.diff(r)
        rad = self.radius_from(a)
        near = rad[:-1] <= radius
        near[0] = True
        return float(np.max(d[near]))

    def as_field(self, values) -> "Field":
        return Field(self, np.asarray(values, dtype=float))

    def ones(self) -> "Field":
        return Field(self, np.ones(self.size))

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.size))


@dataclass(frozen=True, eq=False)
class Field:
    """Grid function.  On radial grids `degree` 1 means values are the profile
    g(r) of g(r) * x_axis / r."""
    grid: Grid
    values: np.ndarray
    degree: int = 0
    axis: int = 0

    def __post_init__(self):
        if self.values.shape != (self.grid.size,):
            raise ValueError(f"field has shape {self.values.shape}, grid needs ({self.grid.size},)")
        if self.degree not in (0, 1):
            raise ValueError("only angular degree 0 or 1 supported")
        if self.degree and not self.grid.is_radial:
            raise ValueError("angular degree only applies to radial grids")

    def like(self, values) -> "Field":
        return Field(self.grid, np.asarray(values, dtype=float), self.degree, self.axis)

    def angular_overlap(self, other: "Field") -> float:
        """Sphere average of the product of the angular factors."""
        if self.degree == 0 and other.degree == 0:
            return 1.0
        if self.degree == 1 and other.degree == 1 and self.axis == other.axis:
            return 1.0 / self.grid.n
        return 0.0


def _grade(N: int, gamma: float) -> np.ndarray:
    return (np.arange(N) / (N - 1)) ** gamma


def _sphere_rule(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Product Gauss rule on the unit sphere S^{n-1}: unit points and weights."""
    xg, wg = np.polynomial.legendre.leggauss(m)
    theta = 0.5 * math.pi * (xg + 1.0)
    wtheta = 0.5 * math.pi * wg
    phi = 2.0 * math.pi * np.arange(2 * m) / (2 * m)
    wphi = np.full(2 * m, 2.0 * math.pi / (2 * m))
    grids = np.meshgrid(*([theta] * (n - 2) + [phi]), indexing="ij")
    wgrids = np.meshgrid(*([wtheta] * (n - 2) + [wphi]), indexing="ij")
    angles = [g.ravel() for g in grids]
    w = np.ones_like(angles[0])
    for wk in wgrids:
        w = w * wk.ravel()
    pts = np.zeros((len(w), n))
    s = np.ones_like(w)
    for k in range(n - 2):
        pts[:, k] = s * np.cos(angles[k])
        w = w * np.sin(angles[k]) ** (n - 2 - k)
        s = s * np.sin(angles[k])
    pts[:, n - 2] = s * np.cos(angles[-1])
    pts[:, n - 1] = s * np.sin(angles[-1])
    return pts, w


def _build_radial(domain: Domain, n_nodes: int, grading: Optional[float], sphere_points: int) -> Grid:
    if not domain.radially_symmetric:
        raise ConfigurationError("radial grids need a ball or an annulus")
    if n_nodes < 8:
        raise ResolutionError("radial grid needs at least 8 nodes")
    n = domain.n
    omega = sphere_area(n)
    if domain.kind == "ball":
        R = domain.params[0]
        gamma = 2.0 if grading is None else float(grading)
        r = R * _grade(n_nodes, gamma)
        dist = R - r
        interior = np.ones(n_nodes, dtype=bool)
        interior[-1] = False
        radii = [R]
    else:
        r_in, r_out = domain.params
        gamma = 1.0 if grading is None else float(grading)
        r = r_in + (r_out - r_in) * _grade(n_nodes, gamma)
        dist = np.minimum(r - r_in, r_out - r)
        interior = np.ones(n_nodes, dtype=bool)
        interior[[0, -1]] = False
        radii = [r_in, r_out]
    r[-1] = domain.params[-1]
    faces = np.concatenate([[r[0]], 0.5 * (r[1:] + r[:-1]), [r[-1]]])
    weights = omega * (faces[1:] ** n - faces[:-1] ** n) / n
    unit, w = _sphere_rule(n, sphere_points)
    pts, nus, ws = [], [], []
    for rho in radii:
        outward = -1.0 if (domain.kind == "annulus" and rho == domain.params[0]) else 1.0
        pts.append(rho * unit)
        nus.append(outward * unit)
        ws.append(w * rho ** (n - 1))
    bq = BoundaryQuadrature(np.concatenate(pts), np.concatenate(nus), np.concatenate(ws))
    for arr in (r, weights, interior, dist):
        arr.setflags(write=False)
    spec = {"mode": "radial", "n_nodes": n_nodes, "grading": gamma, "sphere_points": sphere_points}
    return Grid(domain, "radial", spec, (r,), weights, interior, dist, bq)


def _cell_fractions(domain: Domain, pts: np.ndarray, h: float, sub: int) -> np.ndarray:
    n = domain.n
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    sub_pts = np.stack(np.meshgrid(*([offs] * n), indexing="ij"), axis=-1).reshape(-1, n) * h
    frac = np.empty(len(pts))
    for start in range(0, len(pts), 2048):
        chunk = pts[start:start + 2048]
        inside = domain.contains((chunk[:, None, :] + sub_pts[None, :, :]).reshape(-1, n))
        frac[start:start + 2048] = inside.reshape(len(chunk), -1).mean(axis=1)
    return frac


def _build_cartesian(domain: Domain, h: float, subsample: int) -> Grid:
    n = domain.n
    if not h > 0:
        raise ConfigurationError("grid spacing must be positive")
    if domain.kind == "box":
        extents = np.asarray(domain.params)
    else:
        extents = np.full(n, domain.params[-1])
    axes = []
    for ext in extents:
        m = int(math.ceil(ext / h)) + 1
        axes.append(h * np.arange(-m, m + 1, dtype=float))
    shape = tuple(len(a) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    sd = domain.signed_distance(pts)
    interior = sd > 1e-12 * h
    if not interior.any():
        raise ResolutionError("no interior nodes at this resolution")

    weights = np.where(interior, h ** n, 0.0)
    cut = np.abs(sd) < 0.5 * math.sqrt(n) * h
    weights[cut] = h ** n * _cell_fractions(domain, pts[cut], h, subsample)

    strides = np.array([int(np.prod(shape[k + 1:])) for k in range(n)])
    idx = np.arange(pts.shape[0])
    multi = np.stack(np.unravel_index(idx, shape), axis=1)
    c_node, c_axis, c_sign, c_theta, bp, bn, bw = [], [], [], [], [], [], []
    for k in range(n):
        for s in (-1, 1):
            nb_ok = (multi[:, k] + s >= 0) & (multi[:, k] + s < shape[k])
            nb = np.where(nb_ok, idx + s * strides[k], idx)
            cand = interior & (~interior[nb] | ~nb_ok)
            nodes = idx[cand]
            if len(nodes) == 0:
                continue
            sign = np.full(len(nodes), float(s))
            t = domain.axis_intercept(pts[nodes], k, sign, h)
            p = pts[nodes].copy()
            p[:, k] += sign * t
            nu = domain.outward_normal(p)
            c_node.append(nodes)
            c_axis.append(np.full(len(nodes), k))
            c_sign.append(sign)
            c_theta.append(t / h)
            bp.append(p)
            bn.append(nu)
            bw.append(h ** (n - 1) * np.abs(nu[:, k]))
    crossings = Crossings(np.concatenate(c_node), np.concatenate(c_axis),
                          np.concatenate(c_sign), np.concatenate(c_theta))
    bq = BoundaryQuadrature(np.concatenate(bp), np.concatenate(bn), np.concatenate(bw))
    dist = sd.copy()
    for arr in (weights, interior, dist):
        arr.setflags(write=False)
    spec = {"mode": "cartesian", "h": h, "subsample": subsample}
    return Grid(domain, "cartesian", spec, tuple(axes), weights, interior, dist, bq, crossings)


def build_grid(domain: Domain, mode: str = "radial", *, n_nodes: int = 512,
               grading: Optional[float] = None, h: float = 1.0 / 16,
               sphere_points: int = 24, subsample: int = 6) -> Grid:
    """Discretize `domain`.

    Radial grids place node i at R * (i/(N-1))**grading (ball, default grading 2)
    or R_in + (R_out-R_in) * (i/(N-1))**grading (annulus, default 1).
    """
    if mode == "radial":
        return _build_radial(domain, n_nodes, grading, sphere_points)
    if mode == "cartesian":
        return _build_cartesian(domain, h, subsample)
    raise ConfigurationError(f"unknown grid mode {mode!r}")


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, Field) else np.asarray(f, dtype=float)


def pairwise_sum(x: np.ndarray) -> float:
    """Order-fixed pairwise reduction (bit-stable regardless of threading)."""
    x = np.asarray(x, dtype=float)
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0]) if x.size else 0.0


def integrate(f, weight=None, exponent: float = 1.0, grid: Optional[Grid] = None) -> float:
    """Volume integral of f**exponent * weight over the domain."""
    if isinstance(f, Field):
        grid = f.grid
        if f.degree != 0:
            if exponent == 1.0 and (weight is None or getattr(weight, "degree", 0) == 0):
                return 0.0
            raise DomainError("non-linear integrand of a dipole field")
    if grid is None:
        raise ValueError("grid required for raw arrays")
    vals = _values(f)
    if exponent != 1.0:
        if float(exponent).is_integer():
            vals = vals ** int(exponent)
        else:
            if np.any(vals < 0):
                raise DomainError("fractional power of a field with negative values")
            vals = vals ** exponent
    if weight is not None:
        vals = vals * _values(weight)
    return pairwise_sum(vals * grid.weights)


def boundary_values(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    return np.asarray(fn(grid.boundary.points), dtype=float)


def surface_integrate(g, grid: Grid) -> float:
    """Sum g * dS over the boundary quadrature; g is an array or a callable of
    (points, normals)."""
    bq = grid.boundary
    if callable(g):
        g = g(bq.points, bq.normals)
    g = np.asarray(g, dtype=float)
    if g.shape != bq.weights.shape:
        raise ValueError(f"boundary samples have shape {g.shape}, expected {bq.weights.shape}")
    return pairwise_sum(g * bq.weights)
