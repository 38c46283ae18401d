import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from fracobstacle.extension import (
    ExtensionField,
    aux_delta,
    convex_hull_check,
    extend,
    flux_constant,
    graded_mesh,
    halfsphere_eigenvalue,
    halfsphere_rayleigh,
    monotonicity_profile,
    normal_flux,
    origin_outside_hull,
    phi,
    poisson_kernel,
    poisson_mass_within,
    recenter,
    WBoundary,
)
from fracobstacle.grid import Field, build_grid
from fracobstacle.nonlocal_ops import frac_laplacian

from conftest import constant_field


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
@pytest.mark.parametrize("y", [0.1, 1.0])
def test_poisson_kernel_has_unit_mass(s, y):
    mass, _ = integrate.quad(lambda x: poisson_kernel(1, s, x, y), -np.inf, np.inf)
    assert mass == pytest.approx(1.0, abs=1e-8)


def test_poisson_kernel_unit_mass_in_the_plane():
    s, y = 0.75, 0.5
    mass, _ = integrate.quad(lambda r: 2 * math.pi * r * poisson_kernel(2, s, np.array([r, 0.0]), y), 0, np.inf)
    assert mass == pytest.approx(1.0, abs=1e-8)


@given(st.floats(0.1, 0.9), st.floats(0.05, 5.0), st.floats(0.05, 5.0))
def test_poisson_mass_within_matches_direct_integral(s, R, y):
    direct, _ = integrate.quad(lambda x: poisson_kernel(1, s, x, y), -R, R)
    assert poisson_mass_within(1, s, R, y) == pytest.approx(direct, abs=1e-8)


def test_poisson_kernel_rejects_boundary_level():
    with pytest.raises(ValueError):
        poisson_kernel(1, 0.5, 0.0, 0.0)


def test_flux_constant_at_one_half_is_one():
    assert flux_constant(0.5) == pytest.approx(1.0)


def test_graded_mesh_validation():
    y = graded_mesh(2.0, 32)
    assert y[0] == 0.0 and y[-1] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        graded_mesh(1.0, 16)
    with pytest.raises(ValueError):
        graded_mesh(1.0, 64, power=1.5)


def test_extension_field_validation():
    g = build_grid(1, 1.0, 17)
    with pytest.raises(ValueError):
        ExtensionField(g, np.array([0.1, 0.2]), np.zeros((2, 17)), 0.5)
    with pytest.raises(ValueError):
        ExtensionField(g, np.array([0.0, 0.2]), np.zeros((3, 17)), 0.5)
    with pytest.raises(ValueError):
        ExtensionField(g, np.array([0.0, 0.2]), np.full((2, 17), np.nan), 0.5)


def test_constants_extend_to_constants():
    g = build_grid(1, 8.0, 129)
    ext = extend(constant_field(g, 2.0), 0.75)
    assert np.max(np.abs(ext.values - 2.0)) < 1e-12
    assert np.max(np.abs(normal_flux(ext).values)) < 1e-10


@pytest.mark.parametrize("s", [0.5, 0.75])
def test_cosine_extension_matches_bessel_profile(s):
    # the extension of cos(x) is cos(x) (2^{1-s}/Gamma(s)) y^s K_s(y)
    g = build_grid(1, 4 * math.pi, 257)
    u = Field(g, np.cos(g.axis), lambda p: np.cos(p[..., 0]))
    ext = extend(u, s)
    inner = np.abs(g.axis) <= 2 * math.pi
    for j in (8, 20, 40):
        yj = ext.y[j]
        profile = 2 ** (1 - s) / special.gamma(s) * yj**s * special.kv(s, yj)
        assert np.max(np.abs(ext.values[j] - profile * np.cos(g.axis))[inner]) < 2e-3


def test_normal_flux_recovers_cosine_symbol():
    g = build_grid(1, 4 * math.pi, 257)
    u = Field(g, np.cos(g.axis), lambda p: np.cos(p[..., 0]))
    flux = normal_flux(extend(u, 0.5)).values
    inner = np.abs(g.axis) < 2 * math.pi
    assert np.max(np.abs(flux - np.cos(g.axis))[inner]) < 5e-3


@pytest.mark.parametrize("s", [0.6, 0.9])
def test_gaussian_flux_matches_direct_quadrature(s):
    g = build_grid(1, 8.0, 257)
    f = lambda p: np.exp(-np.sum(p * p, axis=-1) / 2)  # noqa: E731
    u = Field(g, f(g.points()), f)
    res = normal_flux(extend(u, s, graded_mesh(4.0, 64)), return_details=True)
    direct = frac_laplacian(u, s).values
    inner = np.abs(g.axis) <= 4
    rel = np.linalg.norm((res.flux.values - direct)[inner]) / np.linalg.norm(direct[inner])
    assert rel <= 5e-2
    assert not res.flagged.any()


def test_extension_rejects_bad_order_and_data():
    g = build_grid(1, 2.0, 33)
    with pytest.raises(ValueError):
        extend(constant_field(g, 1.0), 1.0)
    bad = Field(g, np.full(g.shape, np.inf))
    with pytest.raises(ValueError):
        extend(bad, 0.5)


@given(st.integers(-10, 10))
def test_recenter_moves_the_chosen_node_to_the_origin(k):
    g = build_grid(1, 4.0, 33)
    f = lambda p: np.sin(p[..., 0])  # noqa: E731
    u = Field(g, f(g.points()), f)
    idx = g.center_index[0] + k
    out = recenter(u, idx)
    assert out.values[g.center_index] == pytest.approx(u.values[idx])
    assert np.allclose(out.values, f(g.points() + g.axis[idx]), atol=1e-12)


def test_phi_matches_closed_form_for_power_profile():
    # v = y^{2s} with weight exponent a = 2s - 1: the integral is explicit
    s = 0.75
    g = build_grid(1, 4.0, 257)
    y = graded_mesh(2.0, 256)
    ext = ExtensionField(g, y, np.broadcast_to((y ** (2 * s))[:, None], (len(y), g.n)), 1 - s)
    sin_int, _ = integrate.quad(lambda th: math.sin(th) ** (6 * s - 3), 0, math.pi)
    rho = 2 * g.h
    for r in (0.25, 0.5, 1.0):
        exact = s * (r ** (4 * s) - rho ** (4 * s)) * sin_int / r ** (2 - 2 * s)
        assert phi(ext, r) == pytest.approx(exact, rel=1e-2)


def test_phi_rejects_unresolved_and_oversized_radii():
    g = build_grid(1, 4.0, 129)
    y = graded_mesh(2.0, 64)
    ext = ExtensionField(g, y, np.zeros((len(y), g.n)), 0.25)
    with pytest.raises(ValueError):
        phi(ext, 4 * g.h)
    with pytest.raises(ValueError):
        phi(ext, 3.0)


def test_monotonicity_profile_reports_auxiliary_constants():
    g = build_grid(1, 4.0, 129)
    y = graded_mesh(2.0, 64)
    ext = ExtensionField(g, y, np.broadcast_to((y**0.5)[:, None], (len(y), g.n)), 0.25)
    rep = monotonicity_profile(ext, [0.5, 1.0, 2.0], alpha=0.2)
    assert rep.delta == pytest.approx(aux_delta(0.2, 0.75))
    assert rep.bound_multiplier == pytest.approx(max(rep.phi) / (1 + rep.phi[1]))


def test_aux_delta_closed_form():
    assert aux_delta(0.25, 0.75) == pytest.approx(0.25 * (0.25 / 1.75 - 0.125))


@pytest.mark.parametrize(
    "pts,outside",
    [
        (np.array([[1.0], [2.0]]), True),
        (np.array([[-1.0], [2.0]]), False),
        (np.empty((0, 2)), True),
        (np.array([[1.0, 0.0], [0.0, 1.0]]), True),
        (np.array([[1.0, 0.0], [-1.0, 0.5], [0.0, -1.0]]), False),
        (np.array([[1.0, 0.0], [-1.0, 0.0]]), False),
        (np.array([[0.0, 0.0]]), False),
    ],
)
def test_origin_outside_hull(pts, outside):
    assert origin_outside_hull(pts) is outside


def test_convex_hull_check_on_one_sided_data():
    g = build_grid(1, 2.0, 33)
    vals = np.where(g.axis > 0, g.axis, 0.0)
    wb = WBoundary(Field(g, vals), g.axis >= 0, 0.0, g.center_index, 0, 1e-6)
    assert convex_hull_check(wb, 1.0, 0.1, 0.05)
    wb = WBoundary(Field(g, np.abs(g.axis)), np.ones(g.n, bool), 0.0, g.center_index, 0, 1e-6)
    assert not convex_hull_check(wb, 1.0, 0.1, 0.05)


@pytest.mark.parametrize("s", [0.6, 0.75, 0.9])
def test_halfsphere_quotient_matches_eigenvalue(s):
    q = halfsphere_rayleigh(2, s)
    assert q == pytest.approx(halfsphere_eigenvalue(2, s), rel=1e-2)


def test_halfsphere_perturbation_raises_the_quotient():
    def f(P, T):
        return 0.1 * np.sin(P) * np.sin(T)

    def grad(P, T):
        return 0.1 * np.cos(P) * np.sin(T), 0.1 * np.sin(P) * np.cos(T)

    for s in (0.6, 0.75, 0.9):
        assert halfsphere_rayleigh(2, s, perturbation=(f, grad)) > halfsphere_rayleigh(2, s)


def test_halfsphere_validation():
    with pytest.raises(ValueError):
        halfsphere_rayleigh(3, 0.75)
    with pytest.raises(ValueError):
        halfsphere_rayleigh(2, 0.75, resolution=32)
