import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critflow.analysis import gram_matrix
from critflow.bubble import (BubbleParams, bubble_field, dimension_constants, kappa_by_axis,
                             kernel_fields, projected_bubble, resolution_guard,
                             sobolev_constant_from_gradient)
from critflow.geometry import Domain, ResolutionError, build_grid, integrate

# Frozen oracle values: 30-digit mpmath quadrature of the radial integrals
# (independent of the scipy routines under test).
ORACLE = {
    3: dict(K_n=5.4779040895313319, kappa=0.0625, C2=16.538273802687955,
            Cbar=3.5330759214727794, C3=282.64607371782235, C3_tangent=11.305842948712894),
    4: dict(K_n=10.260398641294913, kappa=0.2, C2=223.32365438844415,
            Cbar=10.882796185405307, C3=163.24194278107961, C3_tangent=18.137993642342179),
    5: dict(K_n=14.811911720005934, kappa=0.375, C2=1805.4249147087899,
            Cbar=15.835535830952539, C3=98.532222948149133, C3_tangent=18.09775523537433),
}


@pytest.mark.parametrize("n", [3, 4, 5])
def test_constants_match_frozen_oracle(n):
    c = dimension_constants(n)
    ref = ORACLE[n]
    assert c.K_n == pytest.approx(ref["K_n"], rel=1e-10)
    assert c.C2 == pytest.approx(ref["C2"], rel=1e-10)
    assert c.Cbar == pytest.approx(ref["Cbar"], rel=1e-10)
    assert c.C3 == pytest.approx(ref["C3"], rel=1e-10)
    assert c.C3_tangent == pytest.approx(ref["C3_tangent"], rel=1e-10)
    assert np.allclose(c.kappa, ref["kappa"], rtol=1e-10)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_closed_forms(n):
    c = dimension_constants(n)
    # Sobolev constant n(n-2)/4 * |S^n|^{2/n}
    sn = 2 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2)
    assert c.K_n == pytest.approx(n * (n - 2) / 4 * sn ** (2 / n), rel=1e-10)
    assert c.bubble_volume == pytest.approx(c.K_n ** (n / 2), rel=1e-10)
    assert c.delta_n == 1.0
    assert np.allclose(c.kappa, (n - 2) ** 2 / (4 * (n + 1)), rtol=1e-10)


def test_two_routes_to_sobolev_constant():
    for n in (3, 4, 5):
        assert sobolev_constant_from_gradient(n) == pytest.approx(dimension_constants(n).K_n,
                                                                  rel=1e-9)


def test_kappa_per_axis_is_isotropic():
    vals = [kappa_by_axis(3, j) for j in range(3)]
    assert max(vals) - min(vals) <= 1e-8
    assert vals[0] == pytest.approx(0.0625, rel=1e-8)


def test_unsupported_dimension():
    with pytest.raises(ValueError):
        dimension_constants(6)


def test_params_validation():
    with pytest.raises(ValueError):
        BubbleParams((0.0, 0.0, 0.0), -1.0, 1.0)


def test_bubble_peak_and_volume(ball512):
    lam = 20.0
    U = bubble_field(ball512, np.zeros(3), lam)
    assert U.values[0] == pytest.approx(3 ** 0.25 * math.sqrt(lam), rel=1e-14)
    # most of the bubble volume lies inside the unit ball once lam is large
    frac = integrate(U, exponent=6.0) / dimension_constants(3).bubble_volume
    assert 0.99 < frac < 1.0


def test_projected_bubble_vanishes_on_boundary(ball512, ball_cart):
    PU = projected_bubble(ball512, np.zeros(3), 8.0)
    assert PU.values[-1] == 0.0
    PUc = projected_bubble(ball_cart, np.array([0.1, 0.0, -0.05]), 4.0)
    assert np.all(PUc.values[~ball_cart.interior] == 0.0)
    assert np.all(PUc.values[ball_cart.interior] > 0.0)


def test_resolution_guard(ball_cart, ball512):
    resolution_guard(ball_cart, np.zeros(3), 4.0)
    with pytest.raises(ResolutionError):
        resolution_guard(ball_cart, np.zeros(3), 40.0)
    with pytest.raises(ResolutionError):
        bubble_field(ball512, np.zeros(3), 1e7)


def test_kernel_gram_approaches_model_diagonal():
    g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=2048)
    K = dimension_constants(3).K_n
    prev = None
    for lam in (8.0, 32.0, 128.0):
        X = kernel_fields(g, np.zeros(3), lam, K)
        G = gram_matrix(X, X[0])
        model = np.diag([1.0, 0.0625, 0.0625, 0.0625, 0.0625])
        dev = np.max(np.abs(G / G[0, 0] - model))
        if prev is not None:
            assert dev < prev
        prev = dev
    assert abs(G[0, 0] - 1) < 0.1
    assert dev < 0.015


@settings(max_examples=15, deadline=None)
@given(st.floats(2.0, 60.0))
def test_scaling_field_is_lambda_derivative(lam):
    # X_{n+1} = lam dX_0/dlam: check against a centered difference
    g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=512)
    K = dimension_constants(3).K_n
    X = kernel_fields(g, np.zeros(3), lam, K)
    d = 1e-4 * lam
    Xp = kernel_fields(g, np.zeros(3), lam + d, K)[0].values
    Xm = kernel_fields(g, np.zeros(3), lam - d, K)[0].values
    fd = lam * (Xp - Xm) / (2 * d)
    assert np.max(np.abs(fd - X[-1].values)) <= 1e-5 * np.max(np.abs(X[-1].values))
