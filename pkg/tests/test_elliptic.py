import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critflow.elliptic import (ParameterError, bubble_profile, check_center, green_regular_part,
                               harmonic_extension, interpolate, solve_poisson)
from critflow.geometry import Domain, build_grid

C3 = 3.0 ** 0.25   # [n(n-2)]^{(n-2)/4} for n = 3


def test_radial_poisson_quadratic(ball512):
    rep = solve_poisson(ball512, 6.0)
    assert rep.solver == "direct-banded"
    assert np.max(np.abs(rep.solution.values - (1 - ball512.r ** 2))) < 1e-5


def test_radial_poisson_second_order():
    errs = []
    for N in (128, 256, 512):
        g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=N)
        exact = (1 - g.r ** 4) / 20.0          # -Lap u = r^2
        u = solve_poisson(g, g.r ** 2).solution.values
        errs.append(np.max(np.abs(u - exact)))
    assert np.all(np.log2(np.array(errs[:-1]) / np.array(errs[1:])) > 1.8)


def test_radial_dipole_is_linear_function(ball512):
    # harmonic with data x_1 on the unit sphere is x_1 itself: profile r
    u = solve_poisson(ball512, None, 1.0, degree=1).solution
    assert u.degree == 1
    assert np.max(np.abs(u.values - ball512.r)) < 1e-5
    assert u.values[0] == 0.0


def test_cartesian_quadratic_harmonic_is_exact_on_box():
    g = build_grid(Domain.box((1.0, 1.0, 1.0)), "cartesian", h=1.0 / 8)
    fn = lambda p: p[:, 0] ** 2 - p[:, 1] ** 2 + 0.5 * p[:, 2]
    u = solve_poisson(g, None, fn).solution
    x = g.points()[g.interior]
    assert np.max(np.abs(u.values[g.interior] - fn(x))) < 1e-7


def test_cartesian_ball_poisson(ball_cart):
    u = solve_poisson(ball_cart, 6.0).solution
    x = ball_cart.points()[ball_cart.interior]
    assert np.max(np.abs(u.values[ball_cart.interior] - (1 - np.sum(x * x, axis=1)))) < 5e-3


def test_robin_function_at_center(ball512):
    _, Haa = green_regular_part(ball512, np.zeros(3))
    assert Haa == pytest.approx(C3, rel=1e-10)


def test_robin_function_off_center_image_charge(ball_cart):
    # ball of radius 1: H(a, a) = c / (1 - |a|^2)
    a = np.array([0.3, 0.0, 0.0])
    _, Haa = green_regular_part(ball_cart, a)
    assert Haa == pytest.approx(C3 / (1 - 0.09), rel=1e-2)


def test_harmonic_extension_at_center_is_constant(ball512):
    h = harmonic_extension(ball512, np.zeros(3), 8.0)
    ref = bubble_profile(3, np.array([1.0]), 8.0)[0]
    assert np.max(np.abs(h.values - ref)) < 1e-12 * ref + 1e-14


def test_center_too_close_to_boundary(ball_cart):
    with pytest.raises(ParameterError):
        check_center(ball_cart, [0.9, 0.0, 0.0])


def test_nonfinite_rhs_rejected(ball512):
    with pytest.raises(ValueError):
        solve_poisson(ball512, np.full(ball512.size, np.nan))


def test_interpolation_of_smooth_radial_field(ball512):
    f = ball512.as_field(np.cos(ball512.r))
    assert interpolate(f, [0.0, 0.37, 0.0]) == pytest.approx(math.cos(0.37), abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_poisson_is_linear(alpha, beta, g0):
    g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=128)
    f1, f2 = np.cos(g.r), g.r ** 2
    u1 = solve_poisson(g, f1).solution.values
    u2 = solve_poisson(g, f2).solution.values
    u0 = solve_poisson(g, None, g0).solution.values
    u = solve_poisson(g, alpha * f1 + beta * f2, g0).solution.values
    assert np.allclose(u, alpha * u1 + beta * u2 + u0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 2.0))
def test_maximum_principle(seed, g0):
    g = build_grid(Domain.annulus(0.5, 1.0, 3), "radial", n_nodes=128)
    rhs = np.abs(np.random.default_rng(seed).normal(size=g.size))
    u = solve_poisson(g, rhs, g0).solution.values
    assert np.min(u) >= -1e-12
