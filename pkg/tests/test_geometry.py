import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critflow.geometry import (ConfigurationError, Domain, DomainError, Field, build_grid,
                               integrate, pairwise_sum, sphere_area, surface_integrate)


def test_sphere_area_closed_forms():
    assert sphere_area(3) == pytest.approx(4 * math.pi, rel=1e-15)
    assert sphere_area(4) == pytest.approx(2 * math.pi ** 2, rel=1e-15)
    assert sphere_area(5) == pytest.approx(8 * math.pi ** 2 / 3, rel=1e-15)


@pytest.mark.parametrize("bad", [
    lambda: Domain.ball(1.0, 2),
    lambda: Domain.ball(-1.0, 3),
    lambda: Domain.annulus(1.0, 0.5, 3),
    lambda: Domain.box((1.0, 1.0), 3),
    lambda: Domain("torus", 3, (1.0,)),
])
def test_domain_validation(bad):
    with pytest.raises(ConfigurationError):
        bad()


def test_radial_volume_and_moments(ball512):
    assert integrate(ball512.ones()) == pytest.approx(4 * math.pi / 3, rel=1e-12)
    r2 = ball512.as_field(ball512.r ** 2)
    assert integrate(r2) == pytest.approx(4 * math.pi / 5, rel=1e-5)
    assert surface_integrate(np.ones(len(ball512.boundary.weights)), ball512) == \
        pytest.approx(4 * math.pi, rel=1e-14)


def test_annulus_volume(annulus256):
    exact = 4 * math.pi / 3 * (1 - 0.125)
    assert integrate(annulus256.ones()) == pytest.approx(exact, rel=1e-10)
    area = surface_integrate(np.ones(len(annulus256.boundary.weights)), annulus256)
    assert area == pytest.approx(4 * math.pi * 1.25, rel=1e-12)


def test_cartesian_ball_volume_and_area(ball_cart):
    assert integrate(ball_cart.ones()) == pytest.approx(4 * math.pi / 3, rel=2e-3)
    area = surface_integrate(np.ones(len(ball_cart.boundary.weights)), ball_cart)
    assert area == pytest.approx(4 * math.pi, rel=5e-3)


def test_box_volume_exact():
    g = build_grid(Domain.box((1.0, 0.5, 0.5)), "cartesian", h=1.0 / 8)
    assert integrate(g.ones()) == pytest.approx(2.0, rel=1e-10)


def test_radial_grid_admits_only_center(ball512):
    assert np.array_equal(ball512.radius_from(np.zeros(3)), ball512.r)
    with pytest.raises(ConfigurationError):
        ball512.radius_from(np.array([0.1, 0.0, 0.0]))


def test_radial_grid_rejects_box():
    with pytest.raises(ConfigurationError):
        build_grid(Domain.box((1.0, 1.0, 1.0)), "radial")


def test_dipole_integrals(ball512):
    f = Field(ball512, ball512.r.copy(), degree=1)
    assert integrate(f) == 0.0
    with pytest.raises(DomainError):
        integrate(f, exponent=2.0)


def test_fractional_power_of_negative_field(ball512):
    with pytest.raises(DomainError):
        integrate(ball512.as_field(-ball512.ones().values), exponent=0.5)


def test_field_shape_checked(ball512):
    with pytest.raises(ValueError):
        Field(ball512, np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=0, max_size=300))
def test_pairwise_sum_matches_exact_sum(xs):
    x = np.array(xs, dtype=float)
    exact = math.fsum(xs)
    bound = 1e-13 * (np.sum(np.abs(x)) if x.size else 0.0) + 1e-300
    assert abs(pairwise_sum(x) - exact) <= bound


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pairwise_sum_is_bitwise_reproducible(seed):
    x = np.random.default_rng(seed).normal(size=257)
    assert pairwise_sum(x) == pairwise_sum(x.copy())


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 4))
def test_radial_quadrature_is_second_order(k):
    errs = []
    for N in (256, 512, 1024):
        g = build_grid(Domain.ball(1.0, 3), "radial", n_nodes=N)
        errs.append(abs(integrate(g.as_field(g.r ** (2 * k))) - 4 * math.pi / (2 * k + 3)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8)
