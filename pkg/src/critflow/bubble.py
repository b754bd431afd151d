"""Aubin-Talenti bubbles, their projections onto H^1_0, and the kernel directions.

All dimension constants are computed by adaptive quadrature at first use and
cached; nothing here is a hard-coded literal.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate as sint

from .elliptic import bubble_profile, check_center, harmonic_extension, solve_poisson
from .geometry import Field, Grid, ResolutionError, sphere_area

RESOLUTION_LIMIT = 0.5


@dataclass(frozen=True)
class BubbleParams:
    a: tuple
    lam: float
    alpha: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.a, dtype=float)


@dataclass(frozen=True)
class DimensionConstants:
    n: int
    K_n: float
    kappa: tuple        # kappa_1 .. kappa_{n+1}
    C2: float
    Cbar: float
    C3: float
    C3_tangent: float   # same rate constant with the tangent-flow prefactor (n-2)/(n+2)
    delta_n: float
    bubble_volume: float  # int_{R^n} U_{0,1}^{2n/(n-2)}

    def as_dict(self) -> dict:
        d = asdict(self)
        d["kappa"] = list(self.kappa)
        return d


def _radial_quad(f, n: int) -> float:
    """int_{R^n} f(|x|) dx for a radial integrand with polynomial decay."""
    g = lambda r: f(r) * r ** (n - 1)
    total = 0.0
    for lo, hi in ((0.0, 1.0), (1.0, 10.0), (10.0, np.inf)):
        val, _ = sint.quad(g, lo, hi, epsabs=0.0, epsrel=1e-13, limit=400)
        total += val
    return sphere_area(n) * total


@lru_cache(maxsize=None)
def dimension_constants(n: int) -> DimensionConstants:
    if n not in (3, 4, 5):
        raise ValueError("constants are provided for n in {3, 4, 5}")
    crit = 2.0 * n / (n - 2)
    U = lambda r: bubble_profile(n, r, 1.0)
    vol = _radial_quad(lambda r: U(r) ** crit, n)
    K = vol ** (2.0 / n)
    kap = K ** (-n / 2.0) * (n - 2) ** 2 * _radial_quad(
        lambda r: U(r) ** crit * r * r / (n * (1 + r * r) ** 2), n)
    kap_last = K ** (-n / 2.0) * (n - 2) ** 2 / 4.0 * _radial_quad(
        lambda r: U(r) ** crit * (1 - r * r) ** 2 / (1 + r * r) ** 2, n)
    C2 = (n - 2) * (n + 2) / n * (n * (n - 2)) ** ((n + 2) / 4.0) * _radial_quad(
        lambda r: (1 + r * r) ** (-(n + 4) / 2.0) * r * r, n)
    Cbar = C2 * K ** (-(n - 2) / 2.0) / 2.0
    C3 = (n + 2) * Cbar / ((n - 2) * kap_last)
    C3_t = (n - 2) * Cbar / ((n + 2) * kap_last)
    return DimensionConstants(n=n, K_n=K, kappa=tuple([kap] * n + [kap_last]), C2=C2,
                              Cbar=Cbar, C3=C3, C3_tangent=C3_t,
                              delta_n=min(1.0, 4.0 / (n - 2)), bubble_volume=vol)


def sobolev_constant_from_gradient(n: int) -> float:
    """K(n) as the Sobolev quotient of U_{0,1}, via int |grad U|^2 (independent route)."""
    c = (n * (n - 2)) ** ((n - 2) / 4.0)
    dU = lambda r: -c * (n - 2) * r * (1 + r * r) ** (-n / 2.0)
    grad = _radial_quad(lambda r: dU(r) ** 2, n)
    vol = _radial_quad(lambda r: bubble_profile(n, r, 1.0) ** (2.0 * n / (n - 2)), n)
    return grad / vol ** ((n - 2) / n)


def kappa_by_axis(n: int, axis: int) -> float:
    """kappa_axis from a quadrature in polar angles, without the isotropy shortcut."""
    crit = 2.0 * n / (n - 2)
    K = dimension_constants(n).K_n
    f = lambda r: bubble_profile(n, r, 1.0) ** crit * r * r / (1 + r * r) ** 2

    def radial_part():
        total = 0.0
        for lo, hi in ((0.0, 1.0), (1.0, 10.0), (10.0, np.inf)):
            total += sint.quad(lambda r: f(r) * r ** (n - 1), lo, hi, epsrel=1e-13, limit=400)[0]
        return total

    # angular factor: int_{S^{n-1}} (x_axis/|x|)^2 over hyperspherical coordinates
    def coord(angles):
        s = 1.0
        for k in range(axis):
            s *= math.sin(angles[k])
        if axis < n - 1:
            return s * math.cos(angles[axis])
        return s

    def integrand(*angles):
        jac = 1.0
        for k in range(n - 2):
            jac *= math.sin(angles[k]) ** (n - 2 - k)
        val = coord(angles)
        return val * val * jac

    ranges = [(0.0, math.pi)] * (n - 2) + [(0.0, 2 * math.pi)]
    ang, _ = sint.nquad(integrand, ranges, opts={"epsrel": 1e-12, "epsabs": 0.0})
    return K ** (-n / 2.0) * (n - 2) ** 2 * radial_part() * ang


def resolution_guard(grid: Grid, a, lam: float) -> None:
    h_loc = grid.local_spacing(a, 1.0 / lam)
    if lam * h_loc > RESOLUTION_LIMIT:
        raise ResolutionError(f"lambda*h = {lam * h_loc:.3g} > {RESOLUTION_LIMIT}: bubble not resolved")


def bubble_field(grid: Grid, a, lam: float, guard: bool = True) -> Field:
    """U_{a,lam} = [n(n-2)]^{(n-2)/4} (lam / (1 + lam^2 |x-a|^2))^{(n-2)/2} at every node."""
    if guard:
        resolution_guard(grid, a, lam)
    return Field(grid, bubble_profile(grid.n, grid.radius_from(a), lam))


def _zero_outside(grid: Grid, values: np.ndarray) -> np.ndarray:
    return np.where(grid.interior, values, 0.0)


def projected_bubble(grid: Grid, a, lam: float, delta0: Optional[float] = None,
                     guard: bool = True) -> Field:
    """PU_{a,lam} = U_{a,lam} - h_{a,lam}; exactly zero on boundary nodes."""
    a = check_center(grid, a, delta0)
    U = bubble_field(grid, a, lam, guard)
    h = harmonic_extension(grid, a, lam, delta0)
    return Field(grid, _zero_outside(grid, U.values - h.values))


def _harmonic_dipole(grid: Grid, profile_at_boundary: float) -> np.ndarray:
    """Profile of the harmonic function equal to c * x_j / R on |x| = R (ball)."""
    rep = solve_poisson(grid, None, profile_at_boundary, degree=1)
    return rep.solution.values


def kernel_fields(grid: Grid, a, lam: float, r_inf: float, delta0: Optional[float] = None,
                  guard: bool = True) -> list[Field]:
    """X_0 .. X_{n+1}: the projected bubble and its scaled parameter derivatives.

    The bubble part uses closed forms; the harmonic part is differentiated by
    centered finite differences of harmonic extensions (radial grids: the
    translation directions are the l=1 harmonic mode instead).
    """
    a = check_center(grid, a, delta0)
    n = grid.n
    norm = r_inf ** (-(n - 2) / 4.0)
    if guard:
        resolution_guard(grid, a, lam)
    rad = grid.radius_from(a)
    U = bubble_profile(n, rad, lam)
    q = 1.0 + lam * lam * rad * rad
    h0 = harmonic_extension(grid, a, lam, delta0).values
    X = [Field(grid, norm * _zero_outside(grid, U - h0))]

    tol_solver = 1e-10 if grid.is_radial else 1e-8
    if grid.is_radial:
        R = grid.domain.params[-1]
        U_R = bubble_profile(n, np.array([R]), lam)[0]
        bdry = (n - 2) * U_R * lam * R / (1.0 + lam * lam * R * R)
        h_dip = _harmonic_dipole(grid, bdry)
        prof = (n - 2) * U * lam * rad / q
        for j in range(n):
            X.append(Field(grid, norm * _zero_outside(grid, prof - h_dip), degree=1, axis=j))
    else:
        da = grid.h / 4.0
        for j in range(n):
            e = np.zeros(n)
            e[j] = da
            hp = harmonic_extension(grid, a + e, lam, delta0=0.0).values
            hm = harmonic_extension(grid, a - e, lam, delta0=0.0).values
            dh = (hp - hm) / (2 * da) / lam
            dU = (n - 2) * U * lam * (grid.points()[:, j] - a[j]) / q
            _warn_if_noisy(h0, dh * lam, da, tol_solver)
            X.append(Field(grid, norm * _zero_outside(grid, dU - dh)))
    dl = lam * 1e-3
    hp = harmonic_extension(grid, a, lam + dl, delta0).values
    hm = harmonic_extension(grid, a, lam - dl, delta0).values
    dh = lam * (hp - hm) / (2 * dl)
    _warn_if_noisy(h0, dh / lam, dl, tol_solver)
    dU = 0.5 * (n - 2) * U * (1 - lam * lam * rad * rad) / q
    X.append(Field(grid, norm * _zero_outside(grid, dU - dh)))
    return X


def _warn_if_noisy(h: np.ndarray, dh: np.ndarray, step: float, tol: float) -> None:
    noise = tol * np.max(np.abs(h)) / step
    if noise > 1e-3 * max(np.max(np.abs(dh)), 1e-300):
        warnings.warn(f"finite-difference step {step:.2e} is small against solver tolerance; "
                      f"derivative noise ~{noise:.2e}", RuntimeWarning, stacklevel=3)
