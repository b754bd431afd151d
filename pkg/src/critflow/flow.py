"""Time stepping for the critical fast diffusion equation and the normalized Yamabe flow.

Both equations share one implicit kernel: given b and c, find x with
    c * x^p + dt * (-L) x = b,   x = 0 on the boundary,
solved by damped Newton with the banded (radial) or AMG (Cartesian) solver.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .bubble import projected_bubble
from .elliptic import operator
from .geometry import DomainError, Field, Grid, pairwise_sum

log = logging.getLogger(__name__)

R_FLOOR = 1e-8          # R is evaluated where u >= R_FLOOR * max u
DT_MIN, DT_MAX = 1e-5, 1e-1
R_TARGET = 1e-3         # target relative change of r per step
U_TARGET = 2e-2         # target relative change of max u per step
MAX_REJECTIONS = 10


class FlowAbort(RuntimeError):
    """Raised when a step is rejected too many times in a row."""


class NewtonFailure(RuntimeError):
    pass


class ExtinctionEstimateError(ValueError):
    pass


def exponents(n: int) -> tuple[float, float, float]:
    """(m, p, 2*) = ((n-2)/(n+2), (n+2)/(n-2), 2n/(n-2))."""
    return (n - 2) / (n + 2), (n + 2) / (n - 2), 2.0 * n / (n - 2)


def _spow(x: np.ndarray, q: float) -> np.ndarray:
    """Odd extension |x|^{q-1} x, monotone so Newton stays well posed."""
    return np.abs(x) ** (q - 1.0) * x


# --- discrete calculus on the unknown nodes -------------------------------------

class _Discrete:
    """Quadrature weights and -Laplacian restricted to interior unknowns."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.op = operator(grid, 0)
        self.unk = self.op.unknown
        self.w = grid.weights[self.unk]
        self.abs_op = abs(self.op.A)

    def restrict(self, f: Field) -> np.ndarray:
        return f.values[self.unk]

    def extend(self, x: np.ndarray) -> Field:
        out = np.zeros(self.grid.size)
        out[self.unk] = x
        return Field(self.grid, out)

    def neg_lap(self, x: np.ndarray) -> np.ndarray:
        return self.op.A @ x

    def integral(self, vals: np.ndarray) -> float:
        return pairwise_sum(vals * self.w)

    def dirichlet_energy(self, x: np.ndarray) -> float:
        return self.integral(x * self.neg_lap(x))


def _discrete(grid: Grid) -> _Discrete:
    key = ("flow-discrete",)
    if key not in grid._cache:
        grid._cache[key] = _Discrete(grid)
    return grid._cache[key]


def implicit_solve(grid: Grid, b: np.ndarray, c: float, dt: float, p: float,
                   x0: np.ndarray, tol: float = 1e-11, max_iter: int = 40) -> np.ndarray:
    """Solve c*x^p + dt*(-L)x = b on the unknowns by damped Newton.

    Convergence is judged by the componentwise backward error, since rows of
    the radial operator near the origin are many orders larger than b.
    """
    D = _discrete(grid)
    op = D.op
    absA = D.abs_op
    x = x0.copy()

    def resid(y):
        return c * _spow(y, p) + dt * (op.A @ y) - b

    def berr(y, F):
        scale = np.abs(c) * np.abs(y) ** p + dt * (absA @ np.abs(y)) + np.abs(b)
        return float(np.max(np.abs(F) / np.maximum(scale, 1e-300)))

    F = resid(x)
    e = berr(x, F)
    nF = np.linalg.norm(F * D.w)
    for it in range(max_iter):
        # always apply one correction: near steady states the old iterate can
        # already pass the test, which would freeze the flow
        if e <= tol and it > 0:
            return x
        jac = c * p * np.abs(x) ** (p - 1.0)
        dx = op.solve_shifted(jac, dt, -F)
        step = 1.0
        while True:
            y = x + step * dx
            Fy = resid(y)
            nFy = np.linalg.norm(Fy * D.w)
            if nFy < nF or step < 1e-4 or berr(y, Fy) <= tol:
                break
            step *= 0.5
        x, F, nF = y, Fy, nFy
        e = berr(x, F)
        if step == 1.0 and np.max(np.abs(dx)) <= 1e-14 * np.max(np.abs(x)):
            return x
    if e <= tol:
        return x
    raise NewtonFailure(f"Newton backward error {e:.2e} after {max_iter} iterations")


# --- normalized Yamabe flow ---------------------------------------------------

@dataclass(frozen=True)
class FlowState:
    u: Field
    s_time: float = 0.0
    t_time: float = 0.0
    r: float = float("nan")
    step_index: int = 0
    dt: float = 1e-3
    vol_drift: float = 0.0
    clock: float = float("nan")   # beta'(s) = ||v||^{4/(n-2)}; nan means use r


def normalize(u: Field) -> Field:
    n = u.grid.n
    vol = _discrete(u.grid).integral(np.abs(u.values[_discrete(u.grid).unk]) ** (2.0 * n / (n - 2)))
    if not vol > 0:
        raise DomainError("cannot normalize a vanishing field")
    return u.like(u.values * vol ** (-(n - 2) / (2.0 * n)))


def yamabe_energy(u: Field) -> float:
    """r = int |grad u|^2 / int u^{2n/(n-2)} with the discrete Dirichlet form."""
    D = _discrete(u.grid)
    x = D.restrict(u)
    n = u.grid.n
    return D.dirichlet_energy(x) / D.integral(np.abs(x) ** (2.0 * n / (n - 2)))


def initial_state(u0: Field, dt: float = 1e-3, clock: float = float("nan")) -> FlowState:
    u = normalize(u0)
    return FlowState(u=u, r=yamabe_energy(u), dt=dt, clock=clock)


def curvature(u: Field, floor: float = R_FLOOR) -> np.ndarray:
    """R = -u^{-p} Lap u at unknowns; nodes with u below the floor take the
    value of the nearest node above it."""
    D = _discrete(u.grid)
    n = u.grid.n
    p = (n + 2) / (n - 2)
    x = D.restrict(u)
    ok = x >= floor * np.max(x)
    R = np.zeros_like(x)
    R[ok] = D.neg_lap(x)[ok] / x[ok] ** p
    if not np.all(ok):
        R[~ok] = R[_nearest_ok(u.grid, D.unk, ok)[~ok]]
    return R


def _nearest_ok(grid: Grid, unk: np.ndarray, ok: np.ndarray) -> np.ndarray:
    """Index (into unk) of the nearest unknown with ok=True, per unknown."""
    if grid.is_radial:
        good = np.flatnonzero(ok)
        pos = np.searchsorted(good, np.arange(len(ok)))
        lo = good[np.clip(pos - 1, 0, len(good) - 1)]
        hi = good[np.clip(pos, 0, len(good) - 1)]
        idx = np.arange(len(ok))
        return np.where(np.abs(idx - lo) <= np.abs(hi - idx), lo, hi)
    full = np.ones(grid.size, dtype=bool)
    full[unk[ok]] = False
    _, inds = ndimage.distance_transform_edt(full.reshape(grid.shape), return_indices=True)
    flat = np.ravel_multi_index(tuple(i.ravel() for i in inds), grid.shape)
    where = -np.ones(grid.size, dtype=np.int64)
    where[unk] = np.arange(len(unk))
    return where[flat[unk]]


@dataclass(frozen=True)
class Functionals:
    r: float
    Y: float
    F: float
    M: dict   # q -> M_q


def energy_functionals(state_or_u, qs: Sequence[float] = (2.0,), v_scale: Optional[float] = None,
                       floor: float = R_FLOOR) -> Functionals:
    """r, the Yamabe quotient Y, the v-energy F and the curvature moments M_q.

    F uses v = v_scale * u; by default v_scale = r^{(n-2)/4}, the scale at which
    a steady v solves -Lap v = v^p.
    """
    u = state_or_u.u if isinstance(state_or_u, FlowState) else state_or_u
    D = _discrete(u.grid)
    n = u.grid.n
    crit = 2.0 * n / (n - 2)
    x = D.restrict(u)
    grad2 = D.dirichlet_energy(x)
    vol = D.integral(np.abs(x) ** crit)
    r = grad2 / vol
    Y = grad2 / vol ** ((n - 2) / n)
    c = r ** ((n - 2) / 4.0) if v_scale is None else v_scale
    F = c * c * grad2 - (n - 2) / n * c ** crit * vol
    R = curvature(u, floor)
    wt = np.abs(x) ** crit
    M = {float(q): D.integral(np.abs(R - r) ** q * wt) for q in qs}
    return Functionals(r=r, Y=Y, F=F, M=M)


def step_yamabe(state: FlowState, dt: float, r_tol: float = 1e-9,
                newton_tol: float = 1e-11) -> FlowState:
    """One semi-implicit step: (1 - dt r_old) u^p + dt(-L)u = u_old^p, then rescale."""
    u = state.u
    grid = u.grid
    n = grid.n
    _, p, crit = exponents(n)
    D = _discrete(grid)
    x_old = D.restrict(u)
    c = 1.0 - dt * state.r
    if c <= 0:
        raise NewtonFailure("time step too large for the explicit r term")
    x = implicit_solve(grid, x_old ** p, c, dt, p, x_old, tol=newton_tol)
    if np.any(x <= 0):
        raise NewtonFailure("positivity lost")
    vol = D.integral(x ** crit)
    x = x * vol ** (-1.0 / crit)
    u_new = D.extend(x)
    r_new = yamabe_energy(u_new)
    if r_new > state.r + r_tol * max(1.0, abs(state.r)):
        raise NewtonFailure(f"r increased by {r_new - state.r:.3e}")
    L = state.r if math.isnan(state.clock) else state.clock
    clock = state.clock
    if not math.isnan(clock):
        # dL/ds = (4/(n+2)) L (L - r)
        clock = L + dt * 4.0 / (n + 2) * L * (L - r_new)
    return FlowState(u=u_new, s_time=state.s_time + dt, t_time=state.t_time + dt * L,
                     r=r_new, step_index=state.step_index + 1, dt=dt,
                     vol_drift=vol - 1.0, clock=clock)


@dataclass(frozen=True)
class DtPolicy:
    """Adaptive step control in u-clock units."""
    dt_min: float = DT_MIN
    dt_max: float = DT_MAX
    r_target: float = R_TARGET     # relative change of r per step
    u_target: float = U_TARGET     # relative change of max u per step

    def __post_init__(self):
        if not (0 < self.dt_min <= self.dt_max and self.r_target > 0 and self.u_target > 0):
            raise ValueError("dt policy needs 0 < dt_min <= dt_max and positive targets")

    def next(self, old: FlowState, new: FlowState, dt: float) -> float:
        rel_r = abs(new.r - old.r) / max(abs(new.r), 1e-300)
        mo, mn = np.max(old.u.values), np.max(new.u.values)
        rel_u = abs(mn - mo) / mo
        fac = min(self.r_target / max(rel_r, 1e-300), self.u_target / max(rel_u, 1e-300))
        fac = min(max(fac, 0.5), 2.0)
        return float(min(max(dt * fac, self.dt_min), self.dt_max))


def advance_yamabe(state: FlowState, policy: Optional[DtPolicy] = DtPolicy(),
                   newton_tol: float = 1e-11) -> FlowState:
    """Take one accepted step, halving dt on rejection; adapt dt afterwards
    unless policy is None."""
    dt = state.dt
    for _ in range(MAX_REJECTIONS + 1):
        try:
            new = step_yamabe(state, dt, newton_tol=newton_tol)
            break
        except NewtonFailure as exc:
            log.debug("step rejected at dt=%.3e: %s", dt, exc)
            dt *= 0.5
    else:
        raise FlowAbort(f"step {state.step_index} rejected {MAX_REJECTIONS} times")
    if policy is not None:
        new = replace(new, dt=policy.next(state, new, dt))
    return new


# --- physical fast diffusion ----------------------------------------------------

@dataclass(frozen=True)
class PhysicalState:
    rho: Field
    tau: float = 0.0
    mass_p: float = float("nan")
    Tstar_estimate: Optional[float] = None


def mass_p(rho: Field) -> float:
    n = rho.grid.n
    D = _discrete(rho.grid)
    return D.integral(np.abs(D.restrict(rho)) ** (2.0 * n / (n + 2)))


def physical_state(rho: Field) -> PhysicalState:
    if np.any(rho.values < 0):
        raise DomainError("density must be non-negative")
    return PhysicalState(rho=rho, mass_p=mass_p(rho))


def step_physical(state: PhysicalState, dt: float) -> PhysicalState:
    """Implicit Euler on w = rho^m: w^{1/m} + dt(-L)w = rho_old, rho_new = w^{1/m}."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rho = state.rho
    grid = rho.grid
    m, p, _ = exponents(grid.n)
    D = _discrete(grid)
    r_old = D.restrict(rho)
    if np.any(r_old < 0):
        raise DomainError("density must be non-negative")
    if not np.any(r_old > 0):
        return replace(state, tau=state.tau + dt)
    w = implicit_solve(grid, r_old, 1.0, dt, p, r_old ** m)
    w = np.maximum(w, 0.0)
    rho_new = D.extend(w ** p)
    return PhysicalState(rho=rho_new, tau=state.tau + dt, mass_p=mass_p(rho_new),
                         Tstar_estimate=state.Tstar_estimate)


def advance_physical(state: PhysicalState, dt: float) -> tuple[PhysicalState, float]:
    for _ in range(MAX_REJECTIONS + 1):
        try:
            return step_physical(state, dt), dt
        except NewtonFailure:
            dt *= 0.5
    raise FlowAbort(f"physical step at tau={state.tau:.4g} rejected {MAX_REJECTIONS} times")


@dataclass(frozen=True)
class ExtinctionEstimate:
    Tstar: float
    slope: float
    residual: float
    window: int


def estimate_extinction(tau: Sequence[float], mass: Sequence[float], n: int,
                        tail: float = 0.2) -> ExtinctionEstimate:
    """Affine least-squares fit of G = mass^{2/n} over the trailing window; T* is its root."""
    tau = np.asarray(tau, dtype=float)
    mass = np.asarray(mass, dtype=float)
    if len(tau) < 10:
        raise ExtinctionEstimateError("need at least 10 samples")
    k = max(int(round(tail * len(tau))), 10)
    tt, mm = tau[-k:], mass[-k:]
    if np.any(np.diff(mm) > 0):
        raise ExtinctionEstimateError("mass is not decreasing over the fit window")
    G = mm ** (2.0 / n)
    A = np.column_stack([tt, np.ones_like(tt)])
    coef, *_ = np.linalg.lstsq(A, G, rcond=None)
    slope, icpt = coef
    if not slope < 0:
        raise ExtinctionEstimateError("mass^{2/n} is not decreasing")
    res = float(np.sqrt(np.mean((A @ coef - G) ** 2)) / np.max(np.abs(G)))
    return ExtinctionEstimate(Tstar=float(-icpt / slope), slope=float(slope), residual=res, window=k)


@dataclass(frozen=True)
class NormalizedView:
    v: Field
    t: float
    u: Field
    v_norm: float


def to_normalized(rho: Field, tau: float, Tstar: float) -> NormalizedView:
    """v = ((n+2)/(4(T*-tau)))^{(n-2)/4} rho^m at t = ((n+2)/4) ln(T*/(T*-tau)); u = v/||v||."""
    if not tau < Tstar:
        raise DomainError("tau must precede the extinction time")
    n = rho.grid.n
    m, _, crit = exponents(n)
    if np.any(rho.values < 0):
        raise DomainError("density must be non-negative")
    v = rho.like(((n + 2) / (4.0 * (Tstar - tau))) ** ((n - 2) / 4.0) * rho.values ** m)
    t = (n + 2) / 4.0 * math.log(Tstar / (Tstar - tau))
    D = _discrete(rho.grid)
    norm = D.integral(np.abs(D.restrict(v)) ** crit) ** (1.0 / crit)
    return NormalizedView(v=v, t=t, u=v.like(v.values / norm), v_norm=norm)


def clock_rate(rho: Field) -> float:
    """ds/dtau = ||rho^m||^{-4/(n-2)}; independent of T*."""
    n = rho.grid.n
    m, _, crit = exponents(n)
    D = _discrete(rho.grid)
    w = np.abs(D.restrict(rho)) ** m
    return D.integral(w ** crit) ** (-4.0 / (crit * (n - 2)))


# --- initial data -----------------------------------------------------------------

def dome(grid: Grid) -> Field:
    dom = grid.domain
    x = grid.points()
    if dom.kind == "ball":
        vals = 1.0 - np.sum(x * x, axis=1) / dom.params[0] ** 2
    elif dom.kind == "annulus":
        rad = np.linalg.norm(x, axis=1)
        a, b = dom.params
        vals = (rad - a) * (b - rad) * 4.0 / (b - a) ** 2
    else:
        vals = np.prod(1.0 - (x / np.asarray(dom.params)) ** 2, axis=1)
    vals = np.where(grid.interior, np.maximum(vals, 0.0), 0.0)
    return Field(grid, vals)


def smooth_noise(grid: Grid, seed: int, modes: int = 3) -> np.ndarray:
    """Smooth random function with |values| <= 1 built from low Fourier modes."""
    rng = np.random.default_rng(seed)
    x = grid.points() / grid.domain.outer_radius
    out = np.zeros(grid.size)
    for _ in range(modes * grid.n):
        k = rng.integers(-modes, modes + 1, size=grid.n)
        ph = rng.uniform(0, 2 * np.pi)
        out += rng.normal() * np.cos(np.pi * x @ k + ph)
    return out / max(np.max(np.abs(out)), 1e-300)


def preset_initial(grid: Grid, name: str, *, a=None, lam: float = 4.0, noise: float = 0.0,
                   seed: int = 0) -> Field:
    """Named initial data, normalized to unit L^{2n/(n-2)} volume."""
    if name == "dome":
        u = dome(grid)
    elif name in ("bubble", "perturbed-bubble"):
        a = np.zeros(grid.n) if a is None else np.asarray(a, dtype=float)
        u = projected_bubble(grid, a, lam)
        if name == "perturbed-bubble":
            if not 0 <= noise < 1:
                raise ValueError("noise amplitude must lie in [0, 1)")
            u = u.like(u.values * (1.0 + noise * smooth_noise(grid, seed)))
    else:
        raise ValueError(f"unknown initial-data preset {name!r}")
    return normalize(u)


# --- run loops ----------------------------------------------------------------------

FLOW_COLUMNS = ("step", "s", "t", "dt", "r", "Y", "F", "M2", "vol_drift", "min_u", "max_u",
                "vol", "Lq")


def lebesgue_norm(u: Field, q: float) -> float:
    D = _discrete(u.grid)
    return D.integral(np.abs(D.restrict(u)) ** q) ** (1.0 / q)


def flow_row(state: FlowState, fun: Optional[Functionals] = None) -> dict:
    """Per-step record; vol is the post-renormalization volume and Lq the
    L^{2n/(n-2)+2} norm (L^8 for n = 3)."""
    fun = energy_functionals(state) if fun is None else fun
    D = _discrete(state.u.grid)
    x = D.restrict(state.u)
    n = state.u.grid.n
    crit = 2.0 * n / (n - 2)
    return {"step": state.step_index, "s": state.s_time, "t": state.t_time, "dt": state.dt,
            "r": fun.r, "Y": fun.Y, "F": fun.F, "M2": fun.M[2.0], "vol_drift": state.vol_drift,
            "min_u": float(np.min(x)), "max_u": float(np.max(x)),
            "vol": D.integral(np.abs(x) ** crit), "Lq": lebesgue_norm(state.u, crit + 2.0)}


def run_yamabe(state: FlowState, *, max_steps: int, s_end: float = math.inf,
               stop: Optional[Callable[[FlowState, dict], bool]] = None,
               on_step: Optional[Callable[[FlowState, dict], None]] = None,
               policy: Optional[DtPolicy] = DtPolicy(),
               newton_tol: float = 1e-11) -> tuple[FlowState, list[dict]]:
    """Advance until max_steps, s_end, or stop(state, row) is true; returns history rows."""
    rows = [flow_row(state)]
    if on_step:
        on_step(state, rows[-1])
    for _ in range(max_steps):
        if state.s_time >= s_end:
            break
        if state.s_time + state.dt > s_end:
            state = replace(state, dt=max(s_end - state.s_time, 1e-14))
        state = advance_yamabe(state, policy, newton_tol)
        rows.append(flow_row(state))
        if on_step:
            on_step(state, rows[-1])
        if stop and stop(state, rows[-1]):
            break
    return state, rows


def run_physical(state: PhysicalState, *, s_step: float, s_end: float,
                 tau_end: float = math.inf) -> tuple[list[PhysicalState], np.ndarray]:
    """Step rho with tau-increments chosen so each step advances the u-clock by s_step.

    Returns the states and their u-clock values s(tau) = int ||rho^m||^{-4/(n-2)} dtau.
    """
    out, clock = [state], [0.0]
    s = 0.0
    while s < s_end - 1e-12 and state.tau < tau_end:
        rate = clock_rate(state.rho)
        dtau = min(s_step / rate, tau_end - state.tau)
        new, used = advance_physical(state, dtau)
        # trapezoid in the clock rate, which varies smoothly in tau
        s += 0.5 * used * (rate + clock_rate(new.rho))
        state = new
        out.append(state)
        clock.append(s)
    return out, np.asarray(clock)
