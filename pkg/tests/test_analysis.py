import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critflow.analysis import (ConditioningError, FitError, classify_dichotomy, decompose,
                               fit_bubble, pohozaev_bubble_check, rate_report, weighted_inner)
from critflow.bubble import BubbleParams, dimension_constants, kernel_fields
from critflow.flow import dome
from critflow.geometry import Domain, Field, build_grid

K3 = dimension_constants(3).K_n


@pytest.fixture(scope="module")
def ball():
    return build_grid(Domain.ball(1.0, 3), "radial", n_nodes=512)


@settings(max_examples=10, deadline=None)
@given(st.floats(3.0, 40.0), st.floats(0.5, 2.0), st.floats(0.6, 1.6))
def test_fit_recovers_radial_parameters(lam, alpha, guess_factor):
    g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=512)
    X0 = kernel_fields(g, np.zeros(3), lam, K3)[0]
    u = X0.like(alpha * X0.values)
    rep = fit_bubble(u, K3, guess=BubbleParams((0.0, 0.0, 0.0), lam * guess_factor, 1.0))
    assert rep.params.lam == pytest.approx(lam, rel=1e-7)
    assert rep.params.alpha == pytest.approx(alpha, rel=1e-7)


def test_fit_recovers_off_center_bubble():
    g = build_grid(Domain.ball(1.0, 3), "cartesian", h=1.0 / 16)
    a = np.array([0.1, -0.05, 0.0])
    X0 = kernel_fields(g, a, 3.0, K3)[0]
    u = X0.like(1.2 * X0.values)
    rep = fit_bubble(u, K3, guess=BubbleParams((0.05, 0.0, 0.0), 2.5, 1.0))
    assert np.linalg.norm(np.array(rep.params.a) - a) < 1e-3
    assert rep.params.lam == pytest.approx(3.0, rel=1e-3)
    assert rep.params.alpha == pytest.approx(1.2, rel=1e-3)


def test_fit_iteration_budget(ball):
    with pytest.raises(FitError) as info:
        fit_bubble(dome(ball), K3, max_iter=0)
    assert info.value.best is not None


def test_decompose_exact_bubble(ball):
    lam, alpha = 12.0, 1.1
    X0 = kernel_fields(ball, np.zeros(3), lam, K3)[0]
    u = X0.like(alpha * X0.values)
    rep = decompose(u, BubbleParams((0.0, 0.0, 0.0), lam, alpha), K3, K3)
    assert rep.w_l2t < 1e-12
    assert rep.ortho_defect < 1e-12
    assert rep.rel_error == pytest.approx(alpha - 1, rel=1e-9)
    assert rep.gram.shape == (5, 5)
    with pytest.raises(ConditioningError):
        decompose(u, rep.params, K3, K3, eig_floor=1.0)


def test_pohozaev_improves_with_lambda():
    g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=1024)
    errs = []
    for lam in (8.0, 16.0):
        lhs, pred = pohozaev_bubble_check(g, np.zeros(3), lam)
        errs.append(abs(lhs / pred - 1))
    assert errs[1] < errs[0] < 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_weighted_inner_symmetric_and_positive(seed):
    g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=64)
    rng = np.random.default_rng(seed)
    f, h, u = (g.as_field(rng.normal(size=g.size)) for _ in range(3))
    assert weighted_inner(f, h, u) == weighted_inner(h, f, u)
    assert weighted_inner(f, f, u) >= 0
    dip = Field(g, f.values, degree=1, axis=0)
    assert weighted_inner(dip, h, u) == 0.0
    assert weighted_inner(dip, Field(g, h.values, degree=1, axis=1), u) == 0.0


def _synthetic_blowup(k_rate, C, n=3, N=80):
    s = np.linspace(1.0, 50.0, N)
    lam = (2.0 ** (n - 2) + (n - 2) * k_rate * s) ** (1.0 / (n - 2))
    M2 = C * lam ** (-2.0 * (n - 2))
    return s, lam, M2


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 20.0), st.floats(0.1, 10.0), st.floats(0.5, 2.0))
def test_rate_report_on_exact_law(k_rate, C, H):
    s, lam, M2 = _synthetic_blowup(k_rate, C)
    rr = rate_report(s, lam, np.zeros((len(s), 3)), M2, 3, H, b0=np.sqrt(M2) / lam)
    assert rr.M2_slope == pytest.approx(-2.0, abs=1e-9)
    assert rr.lam_rate == pytest.approx(k_rate, rel=1e-9)
    c = dimension_constants(3)
    assert rr.lam_rate_ratio == pytest.approx(k_rate / (c.C3 * H), rel=1e-9)
    assert rr.lam_rate_ratio_tangent == pytest.approx(k_rate / (c.C3_tangent * H), rel=1e-9)
    assert rr.drift_bound == 0.0
    assert rr.b0_ratio_decay > 1.0


def test_rate_report_needs_samples():
    s, lam, M2 = _synthetic_blowup(1.0, 1.0, N=10)
    with pytest.raises(ValueError):
        rate_report(s, lam, np.zeros((10, 3)), M2, 3, 1.0)


def _rows(s, M2, max_u):
    return [{"s": a, "r": 1.0, "M2": b, "max_u": c} for a, b, c in zip(s, M2, max_u)]


def test_classifier_bubble_branch():
    s, lam, M2 = _synthetic_blowup(2.0, 1.0)
    fits = [{"s": a, "lambda": b, "M2": c, "a0": 0.0, "a1": 0.0, "a2": 0.0}
            for a, b, c in zip(s, lam, M2)]
    rows = _rows(s, M2, np.sqrt(lam))
    cls = classify_dichotomy(rows, fits=fits)
    assert cls.kind == "Bubble"
    assert len(cls.trajectory) == len(fits)
    assert cls.trajectory[-1]["a"] == [0.0, 0.0, 0.0]


def test_classifier_steady_and_undecided(ball):
    u = dome(ball)
    s = np.linspace(0, 10, 50)
    cls = classify_dichotomy(_rows(s, np.full(50, 1e-12), np.ones(50)), u_mid=u, u_last=u)
    assert cls.kind == "SteadyState" and cls.u_inf is u
    cls = classify_dichotomy(_rows(s, np.full(50, 1e-3), np.ones(50)), u_mid=u, u_last=u)
    assert cls.kind == "Undecided"
    cls = classify_dichotomy(_rows(s[:2], [0, 0], [1, 1]))
    assert cls.kind == "Undecided" and cls.diagnostics["reason"] == "run too short"
