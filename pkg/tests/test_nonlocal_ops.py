import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from fracobstacle.grid import Field, build_grid, random_smooth_field
from fracobstacle.nonlocal_ops import (
    OperatorParams,
    QuadratureConfig,
    QuadratureWarning,
    frac_laplacian,
    g_integrand,
    gradient,
    i_apply,
    kernel_operator,
    modulated_kernel,
    normalization_constant,
    power_kernel,
    pucci,
    sandwich_check,
    tail_report,
)
from fracobstacle.spectral_oracle import PeriodicField, dft_frac_laplacian

from conftest import constant_field


def _cos_field(grid, k=1.0):
    f = lambda p: np.cos(k * p[..., 0])  # noqa: E731
    return Field(grid, f(grid.points()), f)


def test_normalization_constant_closed_forms():
    assert normalization_constant(1, 0.5) == pytest.approx(1 / math.pi)
    assert normalization_constant(2, 0.5) == pytest.approx(1 / (2 * math.pi))


@pytest.mark.parametrize("s", [0.55, 0.75, 0.9])
def test_normalization_constant_matches_symbol_integral(s):
    # c * int_R (1 - cos y) |y|^{-1-2s} dy = 1 makes the symbol |xi|^{2s}
    near, _ = integrate.quad(lambda y: (1 - math.cos(y)) * y ** (-1 - 2 * s), 0, 1, limit=200)
    far_cos, _ = integrate.quad(lambda y: y ** (-1 - 2 * s), 1, np.inf, weight="cos", wvar=1.0)
    total = 2 * (near + 1 / (2 * s) - far_cos)
    assert normalization_constant(1, s) * total == pytest.approx(1.0, rel=1e-8)


@pytest.mark.parametrize("bad", [(3, 0.5), (1, 0.0), (1, 1.0)])
def test_normalization_constant_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        normalization_constant(*bad)


@pytest.mark.parametrize("s", [0.6, 0.75, 0.9])
@pytest.mark.parametrize("k", [1.0, 2.0])
def test_cosine_is_an_eigenfunction(s, k):
    g = build_grid(1, 4 * math.pi, 1025)
    out = frac_laplacian(_cos_field(g, k), s).values
    inner = np.abs(g.axis) <= 2 * math.pi
    assert np.max(np.abs(out - k ** (2 * s) * np.cos(k * g.axis))[inner]) < 2e-3 * k ** (2 * s)


def test_two_dimensional_diagonal_cosine():
    g = build_grid(2, 4 * math.pi, 129)
    f = lambda p: np.cos(p[..., 0] + p[..., 1])  # noqa: E731
    P = g.points()
    out = frac_laplacian(Field(g, f(P), f), 0.75).values
    inner = np.max(np.abs(P), axis=-1) <= 2 * math.pi
    assert np.max(np.abs(out - 2**0.75 * f(P))[inner]) < 2e-2


@pytest.mark.parametrize("s", [0.6, 0.75, 0.9])
def test_gaussian_matches_kummer_closed_form(s):
    # (-Delta)^s e^{-x^2/2} = 2^s Gamma(1/2+s)/Gamma(1/2) M(1/2+s, 1/2, -x^2/2)
    g = build_grid(1, 16.0, 513)
    f = lambda p: np.exp(-np.sum(p * p, axis=-1) / 2)  # noqa: E731
    got = frac_laplacian(Field(g, f(g.points()), f), s).values
    x = g.axis
    ref = 2**s * special.gamma(0.5 + s) / special.gamma(0.5) * special.hyp1f1(0.5 + s, 0.5, -x * x / 2)
    inner = np.abs(x) <= 4
    assert np.max(np.abs(got - ref)[inner]) <= 1e-3 * np.max(np.abs(ref))


def test_fourier_reference_agrees_up_to_periodization():
    # the periodic reference differs from the whole-line operator by a near-constant offset
    g = build_grid(1, 16.0, 513)
    f = lambda p: np.exp(-np.sum(p * p, axis=-1) / 2)  # noqa: E731
    u = Field(g, f(g.points()), f)
    diff = frac_laplacian(u, 0.75).values - dft_frac_laplacian(PeriodicField.from_field(u), 0.75).to_field().values
    inner = np.abs(g.axis) <= 4
    assert np.ptp(diff[inner]) < 1e-3


@pytest.mark.parametrize("dim", [1, 2])
def test_constants_are_annihilated(dim):
    g = build_grid(dim, 4.0, 65 if dim == 1 else 33)
    u = constant_field(g, 3.7)
    assert np.max(np.abs(frac_laplacian(u, 0.75).values)) < 1e-12
    params = OperatorParams(0.75, 0.3, 0.5, 2.0, i_variant="linear", kernels=(power_kernel(0.3),))
    assert np.max(np.abs(i_apply(u, params).values)) < 1e-12
    assert np.max(np.abs(pucci(u, params, "+").values)) < 1e-12


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_frac_laplacian_is_linear(a, b, seed):
    g = build_grid(1, 4.0, 129)
    rng = np.random.default_rng(seed)
    u, v = random_smooth_field(g, rng), random_smooth_field(g, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuadratureWarning)
        lhs = frac_laplacian(a * u + b * v, 0.7).values
        rhs = a * frac_laplacian(u, 0.7).values + b * frac_laplacian(v, 0.7).values
    assert np.allclose(lhs, rhs, atol=1e-10 * (1 + abs(a) + abs(b)))


@given(st.integers(-8, 8))
def test_frac_laplacian_commutes_with_lattice_shifts(shift):
    g = build_grid(1, 16.0, 257)
    f = lambda p: np.exp(-np.sum(p * p, axis=-1))  # noqa: E731
    c = shift * g.h
    fs = lambda p: f(p - c)  # noqa: E731
    a = frac_laplacian(Field(g, f(g.points()), f), 0.75).values
    b = frac_laplacian(Field(g, fs(g.points()), fs), 0.75).values
    inner = slice(64, 193)
    assert np.allclose(np.roll(a, shift)[inner], b[inner], atol=1e-9)


def _family(sigma, lam, Lam, size=4, aniso=0.0):
    return tuple(modulated_kernel(sigma, lam, Lam, phase=2 * math.pi * k / size, aniso=aniso) for k in range(size))


@given(st.integers(0, 2**31 - 1), st.sampled_from(["linear", "pucci_sup"]))
def test_sandwich_inequality_on_random_pairs(seed, variant):
    g = build_grid(1, 4.0, 129)
    rng = np.random.default_rng(seed)
    kernels = _family(0.3, 0.5, 2.0)
    params = OperatorParams(0.75, 0.3, 0.5, 2.0, i_variant=variant,
                            kernels=kernels[:1] if variant == "linear" else kernels)
    rep = sandwich_check(random_smooth_field(g, rng), random_smooth_field(g, rng), params)
    scale = 1 + np.max(np.abs(rep.middle))
    assert rep.violation <= 1e-10 * scale


def test_pucci_collapses_when_ellipticity_bounds_agree():
    g = build_grid(1, 4.0, 129)
    u = random_smooth_field(g, np.random.default_rng(3))
    params = OperatorParams(0.75, 0.3, 1.5, 1.5)
    ref = 1.5 * kernel_operator(u, power_kernel(0.3)).values
    assert np.allclose(pucci(u, params, "+").values, ref, atol=1e-12)
    assert np.allclose(pucci(u, params, "-").values, ref, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_pucci_antisymmetry(seed):
    g = build_grid(1, 4.0, 65)
    u = random_smooth_field(g, np.random.default_rng(seed))
    params = OperatorParams(0.75, 0.3, 0.5, 2.0)
    assert np.allclose(pucci(u, params, "-").values, -pucci(-u, params, "+").values, atol=1e-12)
    assert np.all(pucci(u, params, "+").values >= pucci(u, params, "-").values - 1e-12)


def test_pucci_rejects_unknown_sign():
    g = build_grid(1, 4.0, 65)
    with pytest.raises(ValueError):
        pucci(constant_field(g, 1.0), OperatorParams(0.75, 0.3), "*")


def test_envelope_violation_is_reported():
    g = build_grid(1, 4.0, 65)
    u = random_smooth_field(g, np.random.default_rng(0))
    params = OperatorParams(0.75, 0.3, 0.5, 2.0, i_variant="linear", kernels=(power_kernel(0.3, 3.0),))
    with pytest.raises(ValueError):
        i_apply(u, params)


@pytest.mark.parametrize("dim", [1, 2])
def test_centered_gradient_is_exact_on_affine_fields(dim):
    g = build_grid(dim, 2.0, 33)
    slope = np.array([0.7, -1.3])[:dim]
    f = lambda p: p @ slope + 0.25  # noqa: E731
    grad = gradient(Field(g, f(g.points()), f))
    for k in range(dim):
        assert np.allclose(grad[k], slope[k], atol=1e-12)
    up = gradient(Field(g, f(g.points()), f), upwind=np.ones(dim))
    assert np.allclose(up[0], slope[0], atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(s=0.4, sigma=0.2),
        dict(s=0.75, sigma=0.8),
        dict(s=0.75, sigma=0.3, lam=2.0, Lam=1.0),
        dict(s=0.75, sigma=0.3, i_variant="bogus"),
        dict(s=0.75, sigma=0.3, i_variant="linear"),
        dict(s=0.75, sigma=0.3, i_variant="pucci_sup"),
        dict(s=0.75, sigma=0.3, i_variant="g_integrand"),
        dict(s=0.75, sigma=0.6, i_variant="g_integrand", G=np.tanh),
    ],
)
def test_operator_params_validation(kwargs):
    with pytest.raises(ValueError):
        OperatorParams(**kwargs)


def test_g_integral_with_identity_converges_to_half_the_symmetric_operator():
    # int (u(x+y) - u(x)) K = 1/2 int delta u K for symmetric K; hat weights converge at order 2 - 2 sigma
    errs = []
    for n in (257, 513):
        g = build_grid(1, 8.0, n)
        f = lambda p: np.exp(-np.sum(p * p, axis=-1))  # noqa: E731
        u = Field(g, f(g.points()), f)
        params = OperatorParams(0.75, 0.3, i_variant="g_integrand", G=lambda z: z)
        ref = 0.5 * kernel_operator(u, power_kernel(0.3)).values
        errs.append(np.max(np.abs(g_integrand(u, params) - ref)) / np.max(np.abs(ref)))
    assert errs[-1] <= 1e-2
    assert math.log2(errs[0] / errs[1]) == pytest.approx(2 - 2 * 0.3, abs=0.2)


def test_tail_report_remainder_is_below_tolerance_for_localized_data(gaussian_1d):
    rep = tail_report(gaussian_1d, OperatorParams(0.75, 0.3))
    for name in ("frac_laplacian", "lower_order"):
        assert rep[name]["remainder"] <= 1e-4
        assert rep[name]["bound"] >= 0


def test_short_tail_warns():
    g = build_grid(1, 2.0, 65)
    f = lambda p: np.sqrt(np.abs(p[..., 0]))  # noqa: E731
    u = Field(g, f(g.points()), f)
    with pytest.warns(QuadratureWarning):
        frac_laplacian(u, 0.6, QuadratureConfig(tail_radius=8.0, tail_nodes=8))


def test_quadrature_config_validation():
    with pytest.raises(ValueError):
        QuadratureConfig(inner_radius=0)
    with pytest.raises(ValueError):
        QuadratureConfig(tail_nodes=7)
    with pytest.raises(ValueError):
        QuadratureConfig(tail_radius=1.0).tail_for(build_grid(1, 2.0, 17))
