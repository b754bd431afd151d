"""One-bubble reduction: weighted fit, projections onto the kernel directions,
Pohozaev boundary term, rate estimation and the steady/bubble classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .bubble import BubbleParams, dimension_constants, kernel_fields, projected_bubble
from .elliptic import check_center, default_delta0, green_regular_part
from .flow import _discrete, curvature
from .geometry import Field, Grid, ResolutionError, pairwise_sum, surface_integrate

FIT_MAX_ITER = 50
FIT_TOL = 1e-10


class FitError(RuntimeError):
    def __init__(self, message: str, best: Optional[BubbleParams] = None):
        super().__init__(message)
        self.best = best


class ConditioningError(RuntimeError):
    def __init__(self, message: str, eig_min: float):
        super().__init__(f"{message} (smallest eigenvalue {eig_min:.3e})")
        self.eig_min = eig_min


def weighted_inner(f: Field, g: Field, u: Field) -> float:
    """<f, g> = int f g u^{4/(n-2)}; dipole factors contribute their sphere average."""
    if f.grid is not g.grid or f.grid is not u.grid:
        raise ValueError("fields live on different grids")
    ov = f.angular_overlap(g)
    if ov == 0.0:
        return 0.0
    n = u.grid.n
    wt = np.abs(u.values) ** (4.0 / (n - 2))
    # symmetric in f, g: the product is formed before any weighting
    return ov * pairwise_sum((f.values * g.values) * wt * u.grid.weights)


def gram_matrix(X: Sequence[Field], u: Field) -> np.ndarray:
    k = len(X)
    G = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            G[i, j] = G[j, i] = weighted_inner(X[i], X[j], u)
    return G


def _active(grid: Grid, X: Sequence[Field]) -> list[int]:
    """Indices of kernel directions that can be resolved on this grid.

    On radial grids the translation directions are dipoles, orthogonal to every
    radial field, and the center is pinned at the origin.
    """
    n = grid.n
    if grid.is_radial:
        return [0, n + 1]
    return list(range(n + 2))


@dataclass
class FitReport:
    params: BubbleParams
    iterations: int
    residual: float          # ||u - alpha X_0||_{L^2_t}
    ortho_defect: float      # max_j |<w, X_j>| / (||u|| ||X_j||)
    history: list = field(default_factory=list)


def initial_guess(u: Field, r_inf: float) -> BubbleParams:
    """Center at the maximum of u, lambda from the bubble peak value with alpha = 1."""
    grid = u.grid
    n = grid.n
    i = int(np.argmax(u.values))
    a = grid.points()[i] if not grid.is_radial else np.zeros(n)
    c = (n * (n - 2)) ** ((n - 2) / 4.0)
    lam = (u.values[i] * r_inf ** ((n - 2) / 4.0) / c) ** (2.0 / (n - 2))
    return BubbleParams(tuple(float(x) for x in a), float(lam), 1.0)


def _residual_norm(u: Field, X0: Field, alpha: float) -> float:
    w = u.like(u.values - alpha * X0.values)
    return math.sqrt(max(weighted_inner(w, w, u), 0.0))


def _alpha(u: Field, X0: Field) -> float:
    return weighted_inner(u, X0, u) / weighted_inner(X0, X0, u)


def _project_center(grid: Grid, a: np.ndarray, delta0: float) -> np.ndarray:
    """Pull a back along the segment to the domain's inner point until d(a) >= delta0/2."""
    d = float(grid.domain.signed_distance(a[None, :])[0])
    if d >= 0.5 * delta0:
        return a
    # bisection toward the deepest point of the reference set
    anchor = np.zeros(grid.n)
    if grid.domain.kind == "annulus":
        rad = np.linalg.norm(a)
        mid = 0.5 * sum(grid.domain.params)
        anchor = a * (mid / rad) if rad > 0 else np.eye(grid.n)[0] * mid
    lo, hi = 0.0, 1.0
    for _ in range(60):
        t = 0.5 * (lo + hi)
        x = anchor + t * (a - anchor)
        if grid.domain.signed_distance(x[None, :])[0] >= 0.5 * delta0:
            lo = t
        else:
            hi = t
    return anchor + lo * (a - anchor)


def fit_bubble(u: Field, r_inf: float, guess: Optional[BubbleParams] = None,
               delta0: Optional[float] = None, tol: float = FIT_TOL,
               max_iter: int = FIT_MAX_ITER) -> FitReport:
    """Minimize ||u - r_inf^{-(n-2)/4} alpha PU_{a,lam}||_{L^2_t} over (a, lam, alpha).

    Gauss-Newton in (alpha, lam*a, log lam) whose Jacobian columns are the
    kernel fields; alpha is re-solved in closed form after each accepted step.
    Trust region: 0.5 in log lam and one grid spacing (or 1/lam) in a.
    """
    grid = u.grid
    n = grid.n
    delta0 = default_delta0(grid) if delta0 is None else delta0
    p = guess or initial_guess(u, r_inf)
    a = check_center(grid, p.a, 0.5 * delta0)
    lam = p.lam
    X = kernel_fields(grid, a, lam, r_inf, delta0=0.5 * delta0)
    alpha = _alpha(u, X[0])
    res = _residual_norm(u, X[0], alpha)
    act = _active(grid, X)
    unorm = math.sqrt(weighted_inner(u, u, u))
    radius_l = 0.5
    radius_a = grid.h if not grid.is_radial else 0.0
    history = [(lam, alpha, res)]
    best = BubbleParams(tuple(a), lam, alpha)
    for it in range(1, max_iter + 1):
        w = u.like(u.values - alpha * X[0].values)
        rhs = np.array([weighted_inner(w, X[j], u) for j in act])
        norms = np.array([math.sqrt(weighted_inner(X[j], X[j], u)) for j in act])
        defect = float(np.max(np.abs(rhs) / (unorm * norms)))
        if defect <= tol:
            return FitReport(best, it - 1, res, defect, history)
        G = gram_matrix([X[j] for j in act], u)
        try:
            c = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular fit normal equations: {exc}", best) from exc
        dlog = c[-1] / alpha
        dzeta = c[1:-1] / alpha if len(act) > 2 else np.zeros(0)
        accepted = False
        for _ in range(30):
            scale = 1.0
            if abs(dlog) > radius_l:
                scale = radius_l / abs(dlog)
            da = dzeta / lam * scale if dzeta.size else np.zeros(n)
            if da.size and radius_a > 0:
                na = np.linalg.norm(da)
                lim = max(radius_a, 1.0 / lam)
                if na > lim:
                    da = da * (lim / na)
            lam_t = lam * math.exp(dlog * scale)
            a_t = _project_center(grid, a + da, delta0) if da.size else a
            try:
                X_t = kernel_fields(grid, a_t, lam_t, r_inf, delta0=0.5 * delta0)
            except ResolutionError:
                radius_l *= 0.5
                continue
            alpha_t = _alpha(u, X_t[0])
            res_t = _residual_norm(u, X_t[0], alpha_t)
            if res_t <= res * (1 + 1e-14):
                a, lam, alpha, X, res = a_t, lam_t, alpha_t, X_t, res_t
                accepted = True
                radius_l = min(2 * radius_l, 2.0)
                break
            radius_l *= 0.25
            radius_a *= 0.25
            dlog *= 0.25
            dzeta = dzeta * 0.25
        best = BubbleParams(tuple(float(x) for x in a), float(lam), float(alpha))
        history.append((lam, alpha, res))
        if not accepted:
            # no descent: the iterate is stationary to working precision
            w = u.like(u.values - alpha * X[0].values)
            rhs = np.array([weighted_inner(w, X[j], u) for j in act])
            defect = float(np.max(np.abs(rhs) / (unorm * norms)))
            if defect <= math.sqrt(tol):
                return FitReport(best, it, res, defect, history)
            raise FitError(f"fit stalled with defect {defect:.2e}", best)
    raise FitError(f"fit did not converge in {max_iter} iterations", best)


@dataclass
class DecompositionReport:
    params: BubbleParams
    b: np.ndarray
    M2: float
    w_h1: float
    w_l2t: float
    eta_l2t: float
    ortho_defect: float
    pohozaev_lhs: float
    gram: np.ndarray
    beta: np.ndarray
    rel_error: float          # sup over interior nodes of |u / X_0 - 1|
    central_defect: float     # 1 - sum_{j>=1} beta_j^2 ||X_j||^2 / M2


def decompose(u: Field, params: BubbleParams, r: float, r_inf: float,
              delta0: Optional[float] = None, eig_floor: float = 1e-12) -> DecompositionReport:
    grid = u.grid
    n = grid.n
    p = (n + 2) / (n - 2)
    D = _discrete(grid)
    a = np.asarray(params.a, dtype=float)
    delta0 = default_delta0(grid) if delta0 is None else delta0
    X = kernel_fields(grid, a, params.lam, r_inf, delta0=0.5 * delta0)
    R = np.zeros(grid.size)
    R[D.unk] = curvature(u)
    dev = np.where(grid.interior, R - r, 0.0)
    crit = 2.0 * n / (n - 2)
    M2 = pairwise_sum(dev ** 2 * np.abs(u.values) ** crit * grid.weights)
    f = u.like(-dev * u.values)     # -(R - r) u
    G = gram_matrix(X, u)
    b = np.array([weighted_inner(f, Xj, u) for Xj in X])
    act = _active(grid, X)
    Ga = G[np.ix_(act, act)]
    eig = np.linalg.eigvalsh(Ga)
    if eig[0] <= eig_floor * max(eig[-1], 1e-300):
        raise ConditioningError("kernel Gram matrix is singular", float(eig[0]))
    beta = np.zeros(len(X))
    beta[act] = np.linalg.solve(Ga, b[act])
    eta = f.values - sum(beta[j] * X[j].values for j in act
                         if X[j].degree == 0)
    eta_f = u.like(eta)
    eta_l2t = math.sqrt(max(weighted_inner(eta_f, eta_f, u), 0.0))
    w = u.like(u.values - params.alpha * X[0].values)
    w_l2t = math.sqrt(max(weighted_inner(w, w, u), 0.0))
    w_h1 = math.sqrt(max(D.dirichlet_energy(D.restrict(w)), 0.0))
    unorm = math.sqrt(weighted_inner(u, u, u))
    ortho = max(abs(weighted_inner(w, X[j], u)) / (unorm * math.sqrt(G[j, j])) for j in act)
    lhs = pohozaev_boundary(u, a)
    x0 = X[0].values[D.unk]
    rel = float(np.max(np.abs(D.restrict(u) / x0 - 1.0)))
    central = sum(beta[j] ** 2 * G[j, j] for j in act if j >= 1)
    return DecompositionReport(params=params, b=b, M2=M2, w_h1=w_h1, w_l2t=w_l2t,
                               eta_l2t=eta_l2t, ortho_defect=ortho, pohozaev_lhs=lhs,
                               gram=G, beta=beta, rel_error=rel,
                               central_defect=1.0 - central / M2 if M2 > 0 else float("nan"))


# --- Pohozaev boundary term -----------------------------------------------------

def _endpoint_derivative(r: np.ndarray, f: np.ndarray) -> float:
    """Derivative at r[0] of the quadratic through (r[k], f[k]), k = 0, 1, 2."""
    x0, x1, x2 = r
    f0, f1, f2 = f
    return (f0 * (2 * x0 - x1 - x2) / ((x0 - x1) * (x0 - x2))
            + f1 * (x0 - x2) / ((x1 - x0) * (x1 - x2))
            + f2 * (x0 - x1) / ((x2 - x0) * (x2 - x1)))


def normal_derivative(u: Field) -> np.ndarray:
    """du/dnu at the boundary quadrature points (second-order one-sided stencils)."""
    grid = u.grid
    if grid.is_radial:
        r, v = grid.r, u.values
        dout = _endpoint_derivative(r[[-1, -2, -3]], v[[-1, -2, -3]])
        vals = []
        bq = grid.boundary
        rad = np.linalg.norm(bq.points, axis=1)
        if grid.domain.kind == "annulus":
            din = -_endpoint_derivative(r[[0, 1, 2]], v[[0, 1, 2]])
            return np.where(np.isclose(rad, grid.domain.params[0]), din, dout)
        return np.full(len(rad), dout)
    bq = grid.boundary
    interp = RegularGridInterpolator(grid.coords, u.values.reshape(grid.shape), method="linear",
                                     bounds_error=False, fill_value=0.0)
    d = 2.0 * grid.h
    u1 = interp(bq.points - d * bq.normals)
    u2 = interp(bq.points - 2 * d * bq.normals)
    # inward profile f(s) with f(0) = 0: f'(0) = (4 f(d) - f(2d)) / (2d); du/dnu = -f'(0)
    return -(4.0 * u1 - u2) / (2.0 * d)


def pohozaev_boundary(u: Field, a) -> float:
    """int_{dOmega} |du/dnu|^2 <x - a, nu> dS."""
    a = np.asarray(a, dtype=float)
    dn = normal_derivative(u)
    bq = u.grid.boundary
    return surface_integrate(dn ** 2 * np.sum((bq.points - a) * bq.normals, axis=1), u.grid)


def pohozaev_translation(u: Field) -> np.ndarray:
    """int_{dOmega} |du/dnu|^2 nu_j dS for each axis j."""
    dn = normal_derivative(u)
    bq = u.grid.boundary
    return np.array([surface_integrate(dn ** 2 * bq.normals[:, j], u.grid) for j in range(u.grid.n)])


def pohozaev_bubble_check(grid: Grid, a, lam: float, delta0: Optional[float] = None
                          ) -> tuple[float, float]:
    """(boundary term of PU_{a,lam}, C2(n) H(a,a) lam^{2-n})."""
    a = check_center(grid, a, delta0)
    PU = projected_bubble(grid, a, lam, delta0)
    _, Haa = green_regular_part(grid, a, delta0)
    c = dimension_constants(grid.n)
    return pohozaev_boundary(PU, a), c.C2 * Haa * lam ** (2 - grid.n)


# --- rate estimation --------------------------------------------------------------

@dataclass
class RateReport:
    n: int
    inconclusive: bool
    lam_range: tuple
    M2_slope: float
    M2_slope_target: float
    lam_rate: float                # plateau of lam' lam^{n-3} = slope of lam^{n-2}/(n-2)
    lam_rate_pred: float           # C3 H(a,a)
    lam_rate_pred_tangent: float   # C3_tangent H(a,a)
    lam_rate_ratio: float
    lam_rate_ratio_tangent: float
    drift_bound: float             # max |a(s) - a_end| s^{1/(n-2)} over the tail
    b0_ratio_decay: float          # (|b0|/M2^{1/2}) at start / at end of the last decade
    vnorm_excess: Optional[float] = None

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    lx, ly = np.log(x), np.log(y)
    return float(np.polyfit(lx, ly, 1)[0])


def rate_report(s: Sequence[float], lam: Sequence[float], a: Sequence, M2: Sequence[float],
                n: int, H_aa: float, b0: Optional[Sequence[float]] = None,
                tail: float = 0.5, min_samples: int = 30) -> RateReport:
    """Slopes of M2(lam) and lam^{n-2}(s) over the samples with lam in the last decade
    (or the trailing fraction `tail` when the run spans less than a decade)."""
    s = np.asarray(s, float)
    lam = np.asarray(lam, float)
    M2 = np.asarray(M2, float)
    a = np.asarray(a, float).reshape(len(s), -1)
    if len(s) < min_samples:
        raise ValueError(f"need at least {min_samples} fitted samples")
    c = dimension_constants(n)
    lam_end = lam[-1]
    sel = lam >= lam_end / 10.0
    if sel.sum() < 0.2 * len(s):
        sel = np.arange(len(s)) >= int((1 - tail) * len(s))
    inconclusive = lam.max() / lam.min() < 4.0
    M2_slope = _loglog_slope(lam[sel], M2[sel])
    rate = float(np.polyfit(s[sel], lam[sel] ** (n - 2), 1)[0]) / (n - 2)
    pred, pred_t = c.C3 * H_aa, c.C3_tangent * H_aa
    drift = np.linalg.norm(a[sel] - a[-1], axis=1) * np.maximum(s[sel], 1e-300) ** (1.0 / (n - 2))
    decay = float("nan")
    if b0 is not None:
        ratio = np.abs(np.asarray(b0, float)) / np.sqrt(M2)
        r_sel = ratio[sel]
        decay = float(r_sel[0] / r_sel[-1]) if r_sel[-1] > 0 else float("inf")
    return RateReport(n=n, inconclusive=bool(inconclusive),
                      lam_range=(float(lam.min()), float(lam.max())),
                      M2_slope=M2_slope, M2_slope_target=-2.0 * (n - 2), lam_rate=rate,
                      lam_rate_pred=pred, lam_rate_pred_tangent=pred_t,
                      lam_rate_ratio=rate / pred, lam_rate_ratio_tangent=rate / pred_t,
                      drift_bound=float(np.max(drift)), b0_ratio_decay=decay)


# --- dichotomy classifier -----------------------------------------------------------

@dataclass
class Classification:
    kind: str                 # "SteadyState" | "Bubble" | "Undecided"
    diagnostics: dict
    u_inf: Optional[Field] = None
    trajectory: Optional[list] = None

    def as_dict(self) -> dict:
        d = {"kind": self.kind, "diagnostics": self.diagnostics}
        if self.trajectory is not None:
            d["trajectory"] = self.trajectory
        return d


def classify_dichotomy(rows: Sequence[dict], u_first: Optional[Field] = None,
                       u_mid: Optional[Field] = None, u_last: Optional[Field] = None,
                       fits: Optional[Sequence[dict]] = None, *, steady_M2: float = 1e-8,
                       cauchy_tol: float = 5e-2, growth: float = 10.0,
                       min_span: float = 1.0) -> Classification:
    """Decide between convergence to a steady state and single-bubble blow-up.

    rows: per-step flow records (s, r, M2, max_u); fits: per-fit records with
    keys s, lambda, M2 and center coordinates a0, a1, ...  u_mid / u_last are states at s_end/2 and s_end.
    """
    diag: dict = {}
    if len(rows) < 3 or rows[-1]["s"] - rows[0]["s"] < min_span:
        diag["reason"] = "run too short"
        return Classification("Undecided", diag)
    max_u = np.array([r["max_u"] for r in rows])
    M2 = np.array([r["M2"] for r in rows])
    diag["final_M2"] = float(M2[-1])
    diag["max_u_growth"] = float(max_u[-1] / max_u[0])
    if fits:
        lam = np.array([f["lambda"] for f in fits])
        Mf = np.array([f["M2"] for f in fits])
        n = u_last.grid.n if u_last is not None else 3
        scaled = Mf * lam ** (2 * (n - 2))
        diag["lam_growth"] = float(lam[-1] / lam[0])
        diag["M2_lam_scaled_max"] = float(np.max(scaled[len(scaled) // 2:]))
        late = scaled[len(scaled) // 2:]
        if lam[-1] >= growth * lam[0] and np.all(np.isfinite(late)) and \
                np.max(late) <= 10.0 * max(np.median(late), 1e-300):
            traj = [{"s": f["s"], "lambda": f["lambda"],
                     "a": [f[k] for k in sorted(f) if k[0] == "a" and k[1:].isdigit()]}
                    for f in fits]
            return Classification("Bubble", diag, trajectory=traj)
    if u_mid is not None and u_last is not None:
        grid = u_last.grid
        D = _discrete(grid)
        x1, x2 = D.restrict(u_mid), D.restrict(u_last)
        rel = float(np.max(np.abs(x2 / x1 - 1.0)))
        diag["cauchy_rel"] = rel
        bounded = diag["max_u_growth"] < growth
        if bounded and M2[-1] <= steady_M2 and rel <= cauchy_tol:
            return Classification("SteadyState", diag, u_inf=u_last)
    diag["reason"] = "criteria for neither branch met"
    return Classification("Undecided", diag)
