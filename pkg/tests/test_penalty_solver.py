import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import fracobstacle.penalty_solver as ps
from fracobstacle.grid import Field, ObstacleSpec, Trajectory, build_grid
from fracobstacle.nonlocal_ops import OperatorParams, power_kernel
from fracobstacle.spectral_oracle import PeriodicField, heat_evolve


def _problem(n=129, L=4.0, obstacle=None, **kw):
    params = OperatorParams(0.75, 0.3, **kw)
    return ps.Problem(build_grid(1, L, n), obstacle or ObstacleSpec("bump", 1.0, 2.0), params)


def _lower_order_problem(n=129):
    return _problem(n, lam=0.5, Lam=1.0, i_variant="linear", kernels=(power_kernel(0.3, 0.7),), b=(0.2,), r=0.1)


def test_beta_closed_forms():
    assert ps.beta(0.0, 0.3) == 1.0
    assert ps.beta(0.05, 0.05) == pytest.approx(math.exp(-1))
    assert ps.beta(-0.1, 0.1) == pytest.approx(math.e)
    assert ps.beta(-1e6, 1e-3) == ps.BETA_CEILING
    with pytest.raises(ValueError):
        ps.beta(0.0, 0.0)


@given(st.floats(0, 100), st.floats(1e-3, 1.0))
def test_beta_is_at_most_one_on_the_feasible_side(x, eps):
    assert 0 <= ps.beta(x, eps) <= 1.0


@given(st.floats(-5, 5), st.floats(1e-2, 1.0))
def test_beta_derivative_identity(t, eps):
    x = t * eps
    h = 1e-6 * eps
    fd = (ps.beta(x + h, eps) - ps.beta(x - h, eps)) / (2 * h)
    assert fd == pytest.approx(-ps.beta(x, eps) / eps, rel=1e-5)


@pytest.mark.parametrize(
    "kwargs",
    [dict(eps=0.0), dict(T=0.0), dict(dt=2.0, T=1.0), dict(scheme="rk4"), dict(snapshot_every=0), dict(picard_max=0)],
)
def test_penalty_config_validation(kwargs):
    with pytest.raises(ValueError):
        ps.PenaltyConfig(**kwargs)


def test_default_step_is_quarter_eps():
    assert ps.PenaltyConfig(eps=0.1).step() == pytest.approx(0.025)


def test_zero_state_gains_dt_per_step_in_the_interior():
    p = _problem(obstacle=ObstacleSpec("bump", amplitude=0.0))
    zero = Field(p.grid, np.zeros(p.grid.shape), p.obstacle)
    errs = []
    for dt in (1e-2, 5e-3):
        u = ps.step_imex(zero, dt, p, 0.1, zero)
        errs.append(abs(u.values[p.grid.center_index] - dt))
    # the pinned far field only perturbs at order dt^2
    assert errs[0] < 1e-2 * 1e-2 * 0.1
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_imex_step_is_consistent_as_dt_shrinks():
    p = _lower_order_problem()
    psi = p.psi_eps(0.1)
    moves = [np.max(np.abs(ps.step_imex(psi, dt, p, 0.1, psi).values - psi.values)) for dt in (1e-2, 1e-3)]
    assert moves[1] < 0.2 * moves[0]


def test_implicit_step_matches_fourier_heat_semigroup_to_second_order_per_step():
    g = build_grid(1, 16.0, 513)
    f = lambda p: np.exp(-np.sum(p * p, axis=-1) / 2)  # noqa: E731
    p = ps.Problem(g, ObstacleSpec("gaussian", 1.0, 1.0), OperatorParams(0.75, 0.3))
    u0 = Field(g, f(g.points()), lambda q: np.zeros(q.shape[:-1]))
    inner = np.abs(g.axis) <= 4
    errs = []
    for dt in (1e-2, 5e-3):
        a = ps.linear_evolve(p, u0, dt, dt).values
        b = heat_evolve(PeriodicField.from_field(u0), dt, 0.75).to_field().values
        errs.append(np.max(np.abs(a - b)[inner]))
    assert math.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.25)


def test_linear_evolution_obeys_the_maximum_principle():
    p = _problem()
    u0 = p.psi()
    u = ps.linear_evolve(p, u0, 0.5, 0.05)
    assert np.max(np.abs(u.values)) <= np.max(np.abs(u0.values)) + 1e-12


def test_dense_and_iterative_solves_agree(monkeypatch):
    p = _lower_order_problem()
    psi = p.psi_eps(0.2)
    dense = ps.step_imex(psi, 0.01, p, 0.2, psi).values
    monkeypatch.setattr(ps, "DENSE_LIMIT", 0)
    p2 = _lower_order_problem()
    iterative = ps.step_imex(psi, 0.01, p2, 0.2, psi).values
    assert np.max(np.abs(dense - iterative)) < 1e-8


def test_projected_step_keeps_constants_and_the_obstacle():
    p = _problem(65, obstacle=ObstacleSpec("gaussian", 2.0, 1e8))
    rep = ps.solve_projected(p, 0.2)
    assert np.max(np.abs(rep.trajectory.stack() - 2.0)) < 1e-12
    p = _lower_order_problem()
    psi = p.psi()
    nxt = ps.step_projected(psi, 0.5 * ps.explicit_dt_limit(p), p, psi)
    assert np.all(nxt.values >= psi.values)


def test_zero_obstacle_and_zero_data_stay_zero():
    p = _lower_order_problem()
    p = p.with_obstacle(ObstacleSpec("bump", amplitude=0.0))
    rep = ps.solve_projected(p, 0.1)
    assert np.max(np.abs(rep.trajectory.stack())) == 0.0


def test_projected_step_rejects_unstable_dt():
    p = _lower_order_problem()
    psi = p.psi()
    with pytest.raises(ps.NumericalAbort):
        ps.step_projected(psi, 2 * ps.explicit_dt_limit(p), p, psi)
    with pytest.raises(ps.NumericalAbort):
        ps.solve_projected(p, 0.5, dt=2 * ps.explicit_dt_limit(p))


def test_non_finite_state_aborts():
    p = _lower_order_problem()
    psi = p.psi()
    bad = psi.with_values(np.full(psi.grid.shape, np.nan))
    with pytest.raises(ps.NumericalAbort):
        ps.step_imex(bad, 0.01, p, 0.1, psi)


def test_projected_snapshots_are_evenly_spaced():
    rep = ps.solve_projected(_problem(65), 0.5, snapshots=16)
    t = np.asarray(rep.trajectory.times)
    assert len(t) == 17
    assert np.allclose(np.diff(t), 0.5 / 16)


def test_penalized_run_reports_bounded_penalty():
    p = _lower_order_problem(129)
    rep = ps.solve_penalized(p, ps.PenaltyConfig(eps=0.1, T=0.2))
    assert np.isfinite(rep.max_beta)
    assert rep.trajectory.times[-1] == pytest.approx(0.2)
    assert rep.summary()["scheme"] == "imex"


def test_solve_dispatches_on_scheme():
    p = _lower_order_problem()
    assert ps.solve(p, ps.PenaltyConfig(scheme="explicit", T=0.05)).scheme == "projected"
    assert ps.solve(p, ps.PenaltyConfig(eps=0.1, T=0.05)).scheme == "imex"


def test_comparison_of_identical_problems_is_zero():
    p = _lower_order_problem()
    rep = ps.comparison_run(p, p, ps.PenaltyConfig(eps=0.1, T=0.1))
    assert rep.max_violation == 0.0


def test_comparison_requires_a_shared_grid():
    with pytest.raises(ValueError):
        ps.comparison_run(_problem(65), _problem(129), ps.PenaltyConfig())


def test_picard_contracts_and_matches_the_step_equation():
    p = _lower_order_problem()
    cfg = ps.PenaltyConfig(eps=0.1, T=0.1, picard_tol=1e-9, picard_max=60)
    res = ps.picard_solve(p, cfg)
    assert res.contracting
    assert res.residuals[-1] <= cfg.picard_tol
    assert all(r < 1 for r in res.ratios[2:])
    assert res.step_residual <= 10 * cfg.picard_tol


@given(st.integers(0, 2**31 - 1))
def test_oracle_distance_is_zero_against_itself(seed):
    g = build_grid(1, 1.0, 17)
    rng = np.random.default_rng(seed)
    traj = Trajectory([0.0, 0.5, 1.0], [Field(g, rng.normal(size=g.shape)) for _ in range(3)], 0.5)
    assert ps.oracle_distance(traj, traj) == 0.0


def test_oracle_distance_interpolates_in_time():
    g = build_grid(1, 1.0, 17)
    ones = np.ones(g.shape)
    coarse = Trajectory([0.0, 1.0], [Field(g, 0 * ones), Field(g, ones)], 1.0)
    fine = Trajectory([0.0, 0.5, 1.0], [Field(g, 0 * ones), Field(g, 0.5 * ones), Field(g, ones)], 0.5)
    assert ps.oracle_distance(fine, coarse) == pytest.approx(0.0, abs=1e-15)


def test_nesting_violation_counts_re_entering_nodes():
    shrinking = np.array([[1, 1, 1, 0], [1, 1, 0, 0], [0, 1, 0, 0]], dtype=bool)
    assert ps.nesting_violation(shrinking) == 0.0
    re_enter = np.array([[1, 0, 0, 0], [0, 0, 0, 0], [1, 0, 0, 0]], dtype=bool)
    assert ps.nesting_violation(re_enter) == pytest.approx(0.25)
    assert ps.nesting_violation(shrinking[:1]) == 0.0
