import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fracobstacle.spectral_oracle import PeriodicField, dft_frac_laplacian, duhamel_solve, heat_evolve

L = math.pi
N = 64


def _axis():
    return PeriodicField(L, np.zeros(N)).axis


def _random(seed, dim=1):
    rng = np.random.default_rng(seed)
    return PeriodicField(L, rng.normal(size=(N,) * dim))


def test_rejects_non_power_of_two_and_non_square():
    with pytest.raises(ValueError):
        PeriodicField(1.0, np.zeros(48))
    with pytest.raises(ValueError):
        PeriodicField(1.0, np.zeros((16, 8)))


def test_constant_is_annihilated():
    out = dft_frac_laplacian(PeriodicField(L, np.full(N, 2.5)), 0.7)
    assert np.max(np.abs(out.values)) < 1e-12


@pytest.mark.parametrize("k", [1, 3, 7])
@pytest.mark.parametrize("s", [0.55, 0.75, 0.95])
def test_cosine_mode_is_exact(k, s):
    x = _axis()
    out = dft_frac_laplacian(PeriodicField(L, np.cos(k * x)), s)
    assert np.allclose(out.values, k ** (2 * s) * np.cos(k * x), atol=1e-12)


def test_two_dimensional_mode():
    x = _axis()
    X, Y = np.meshgrid(x, x, indexing="ij")
    out = dft_frac_laplacian(PeriodicField(L, np.cos(X + 2 * Y)), 0.6)
    assert np.allclose(out.values, 5**0.6 * np.cos(X + 2 * Y), atol=1e-11)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    u, v = _random(seed), _random(seed + 1)
    lhs = dft_frac_laplacian(u.with_values(a * u.values + b * v.values), 0.8).values
    rhs = a * dft_frac_laplacian(u, 0.8).values + b * dft_frac_laplacian(v, 0.8).values
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) * N)


@given(st.integers(0, 2**31 - 1), st.integers(-N, N))
def test_commutes_with_whole_node_shifts(seed, shift):
    u = _random(seed)
    a = np.roll(dft_frac_laplacian(u, 0.65).values, shift)
    b = dft_frac_laplacian(u.with_values(np.roll(u.values, shift)), 0.65).values
    assert np.allclose(a, b, atol=1e-11)


def test_heat_identity_at_time_zero():
    u = _random(4)
    assert np.allclose(heat_evolve(u, 0.0, 0.75).values, u.values, atol=1e-12)
    with pytest.raises(ValueError):
        heat_evolve(u, -1.0, 0.75)


def test_heat_preserves_constants_and_damps_modes():
    x = _axis()
    assert np.allclose(heat_evolve(PeriodicField(L, np.full(N, 3.0)), 5.0, 0.6).values, 3.0)
    out = heat_evolve(PeriodicField(L, np.cos(2 * x)), 0.3, 0.75)
    assert np.allclose(out.values, math.exp(-(2**1.5) * 0.3) * np.cos(2 * x), atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.floats(0, 2), st.floats(0, 2))
def test_heat_is_a_semigroup_with_decaying_energy(seed, t1, t2):
    u = _random(seed, dim=2)
    two = heat_evolve(heat_evolve(u, t1, 0.7), t2, 0.7).values
    one = heat_evolve(u, t1 + t2, 0.7).values
    assert np.allclose(two, one, atol=1e-12)
    assert np.linalg.norm(heat_evolve(u, t1, 0.7).values) <= np.linalg.norm(u.values) + 1e-12
    assert np.linalg.norm(one) <= np.linalg.norm(heat_evolve(u, t1, 0.7).values) + 1e-12


def test_duhamel_without_source_composes_heat_steps():
    u = _random(9)
    traj = duhamel_solve(u, None, 0.05, 0.5, 0.75)
    assert len(traj.times) == 11
    ref = heat_evolve(u, 0.5, 0.75).values
    assert np.allclose(traj.fields[-1].values[:-1], ref, atol=1e-12)


def test_duhamel_constant_source_grows_linearly():
    init = PeriodicField(L, np.zeros(N))
    traj = duhamel_solve(init, lambda t: np.full(N, 0.4), 0.1, 1.0, 0.75)
    for t, f in zip(traj.times, traj.fields):
        assert np.allclose(f.values, 0.4 * t, atol=1e-12)


def test_duhamel_accepts_snapshot_sequences():
    init = PeriodicField(L, np.zeros(N))
    seq = [init.with_values(np.full(N, 1.0))] * 5
    traj = duhamel_solve(init, seq, 0.25, 1.0, 0.6)
    assert np.allclose(traj.fields[-1].values, 1.0, atol=1e-12)


def test_duhamel_rejects_misaligned_horizon():
    with pytest.raises(ValueError):
        duhamel_solve(_random(0), None, 0.3, 1.0, 0.75)


def test_duhamel_manufactured_solution_is_second_order():
    # u = e^{-t} cos(2x) solves u_t + (-Delta)^s u = (2^{2s} - 1) e^{-t} cos(2x)
    s, x = 0.75, _axis()
    lam = 2 ** (2 * s)
    init = PeriodicField(L, np.cos(2 * x))
    errs = []
    for dt in (0.1, 0.05, 0.025):
        traj = duhamel_solve(init, lambda t: (lam - 1) * math.exp(-t) * np.cos(2 * x), dt, 1.0, s)
        exact = math.exp(-1.0) * np.cos(2 * x)
        errs.append(np.max(np.abs(traj.fields[-1].values[:-1] - exact)) / np.max(np.abs(exact)))
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert all(o == pytest.approx(2.0, abs=0.1) for o in orders)
