"""Time stepping for the penalized equation and the obstacle problem.

Two independent discretizations of the same lattice operators:

* ``step_imex``: implicit in the fractional Laplacian, explicit in the
  lower-order operator and in the penalty ``beta_eps(u - psi_eps)``;
* ``step_projected``: explicit Euler followed by projection onto ``u >= psi``,
  used as the oracle for the obstacle problem itself.

Picard iteration on frozen penalty sources is provided for checking the
contraction argument behind existence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, cg

from .grid import Field, Grid, ObstacleSpec, Trajectory, mollify, sample_obstacle
from .nonlocal_ops import (
    OperatorParams,
    QuadratureConfig,
    _cached_stencil,
    _hat_stencil,
    frac_laplacian_stencil,
    lower_order_apply,
)

BETA_CEILING = 1e12
BLOWUP = 1e6
DENSE_LIMIT = 4097


class NumericalAbort(RuntimeError):
    """Blow-up, solver failure, or an unstable step size."""


def beta(x, eps: float, ceiling: float = BETA_CEILING):
    """Penalty ``exp(-x / eps)``, clamped at ``ceiling``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return np.minimum(np.exp(-x / eps), ceiling)


# -- configuration ---------------------------------------------------------------


SCHEMES = ("imex", "explicit")


@dataclass(frozen=True)
class PenaltyConfig:
    """Step controls. ``dt=None`` means ``eps/4`` for IMEX and the CFL limit for explicit runs."""

    eps: float = 0.05
    dt: float | None = None
    T: float = 0.5
    scheme: str = "imex"
    picard_tol: float = 1e-8
    picard_max: int = 60
    snapshot_every: int = 1
    cfl_safety: float = 0.9

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.dt is not None and not 0 < self.dt <= self.T:
            raise ValueError("need 0 < dt <= T")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.snapshot_every < 1 or self.picard_max < 1:
            raise ValueError("snapshot_every and picard_max must be positive")

    def step(self) -> float:
        return self.eps / 4 if self.dt is None else self.dt


@dataclass(frozen=True)
class Problem:
    grid: Grid
    obstacle: ObstacleSpec
    params: OperatorParams
    quad: QuadratureConfig = QuadratureConfig()

    def __post_init__(self):
        object.__setattr__(self, "obstacle", self.obstacle.resolved(self.grid))

    def psi(self) -> Field:
        return sample_obstacle(self.obstacle, self.grid)

    def psi_eps(self, eps: float) -> Field:
        return mollify(self.obstacle, self.grid, eps)

    def with_obstacle(self, obstacle: ObstacleSpec) -> "Problem":
        return replace(self, obstacle=obstacle)


@dataclass
class SolveReport:
    trajectory: Trajectory
    max_beta: float
    min_slack: float
    wall_time: float
    cfl_margin: float
    monotonicity_violation: float
    scheme: str
    eps: float | None = None
    dt: float = 0.0
    contact_tol: float = 0.0
    beta_history: list[float] = field(default_factory=list, repr=False)

    def summary(self) -> dict[str, float | str]:
        return {
            "scheme": self.scheme,
            "eps": self.eps if self.eps is not None else float("nan"),
            "dt": self.dt,
            "steps": len(self.beta_history),
            "max_beta": self.max_beta,
            "min_slack": self.min_slack,
            "monotonicity_violation": self.monotonicity_violation,
            "cfl_margin": self.cfl_margin,
            "runtime_s": self.wall_time,
        }


# -- discrete operators ----------------------------------------------------------


class _Operators:
    """``(-Delta)^s u = A_lin u - far_term`` plus diagonal bounds for step limits."""

    def __init__(self, problem: Problem):
        self.problem = problem
        g, p = problem.grid, problem.params
        self.stencil, factor = frac_laplacian_stencil(g, p.s, problem.quad)
        self.c = -factor
        self._solvers: dict[float, Callable] = {}

    @property
    def diag(self) -> float:
        return self.c * self.stencil.diagonal

    def a_lin(self, values: np.ndarray) -> np.ndarray:
        return -self.c * self.stencil.apply_linear(values)

    def far_term(self, far) -> np.ndarray:
        return self.c * self.stencil.far_vector(far)

    def frac(self, u: Field) -> np.ndarray:
        return self.a_lin(u.values) - self.far_term(u.far)

    def lower(self, u: Field) -> np.ndarray:
        return lower_order_apply(u, self.problem.params, self.problem.quad).values

    def lower_diag(self) -> float:
        """Bound on the magnitude of the ``u(x)`` coefficient in the lower-order operator."""
        p, g, q = self.problem.params, self.problem.grid, self.problem.quad
        if p.i_variant == "zero":
            d_i = 0.0
        elif p.i_variant in ("linear", "pucci_sup"):
            d_i = max(_cached_stencil(g, k, k.sigma, q, envelope=(p.lam, p.Lam)).diagonal for k in p.kernels)
        else:
            st = _hat_stencil(g, p.sigma, q)
            d_i = p.G_lipschitz * (st.W.sum() + st.tail_w.sum())
        return d_i + abs(p.r) + float(np.sum(np.abs(p.drift(g.dim)))) / g.h

    def explicit_dt_limit(self) -> float:
        return 1.0 / (self.diag + self.lower_diag())

    def solver(self, dt: float) -> Callable[[np.ndarray], np.ndarray]:
        """Solve ``(I + dt A_lin) x = rhs``."""
        hit = self._solvers.get(dt)
        if hit is not None:
            return hit
        g = self.problem.grid
        if g.dim == 1 and g.n <= DENSE_LIMIT:
            M = np.eye(g.n) - dt * self.c * self.stencil.matrix()
            lu = scipy.linalg.lu_factor(M, check_finite=False)
            fn = lambda rhs: scipy.linalg.lu_solve(lu, rhs, check_finite=False)  # noqa: E731
        else:
            N = g.size
            op = LinearOperator(
                (N, N), matvec=lambda x: x + dt * self.a_lin(x.reshape(g.shape)).ravel(), dtype=float
            )

            def fn(rhs):
                x, info = cg(op, rhs.ravel(), x0=rhs.ravel(), rtol=1e-10, atol=0.0, maxiter=10 * N)
                if info != 0:
                    raise NumericalAbort(f"conjugate gradients did not converge (info={info})")
                return x.reshape(g.shape)

        self._solvers[dt] = fn
        return fn


_OPS: dict[int, tuple[Problem, _Operators]] = {}


def _operators(problem: Problem) -> _Operators:
    hit = _OPS.get(id(problem))
    if hit is not None and hit[0] is problem:
        return hit[1]
    ops = _Operators(problem)
    if len(_OPS) >= 8:
        _OPS.pop(next(iter(_OPS)))
    _OPS[id(problem)] = (problem, ops)
    return ops


def explicit_dt_limit(problem: Problem) -> float:
    """Largest stable step of :func:`step_projected`."""
    return _operators(problem).explicit_dt_limit()


# -- single steps ----------------------------------------------------------------


def step_imex(
    state: Field,
    dt: float,
    problem: Problem,
    eps: float,
    psi_eps: Field,
    *,
    source: np.ndarray | None = None,
) -> Field:
    """``(I + dt A) u+ = u + dt (R u + beta_eps(u - psi_eps))``.

    ``source`` replaces the penalty term when given (frozen-source solves).
    """
    if not np.all(np.isfinite(state.values)):
        raise NumericalAbort("state has non-finite values")
    ops = _operators(problem)
    pen = beta(state.values - psi_eps.values, eps) if source is None else source
    rhs = state.values + dt * (ops.lower(state) + pen + ops.far_term(state.far))
    return state.with_values(ops.solver(dt)(rhs))


def step_projected(state: Field, dt: float, problem: Problem, psi: Field) -> Field:
    """``max(psi, u - dt ((-Delta)^s u - R u))``; raises if ``dt`` breaks the explicit limit."""
    ops = _operators(problem)
    limit = ops.explicit_dt_limit()
    if dt > limit * (1 + 1e-12):
        raise NumericalAbort(f"dt = {dt:.3g} exceeds the explicit stability limit {limit:.3g}")
    if not np.all(np.isfinite(state.values)):
        raise NumericalAbort("state has non-finite values")
    nxt = state.values - dt * (ops.frac(state) - ops.lower(state))
    return state.with_values(np.maximum(psi.values, nxt))


# -- drivers ---------------------------------------------------------------------


def _steps(T: float, dt: float) -> tuple[int, float]:
    m = max(1, int(np.ceil(T / dt - 1e-9)))
    return m, T / m


def solve_penalized(problem: Problem, config: PenaltyConfig) -> SolveReport:
    """Penalized evolution from ``u(0) = psi_eps``."""
    t0 = time.perf_counter()
    eps = config.eps
    steps, dt = _steps(config.T, config.step())
    psi = problem.psi()
    psi_eps = problem.psi_eps(eps)
    u = Field(problem.grid, psi_eps.values.copy(), problem.obstacle)
    ops = _operators(problem)
    traj = Trajectory([0.0], [u], dt)
    betas, min_slack, mono = [], float(np.min(u.values - psi.values)), 0.0
    for m in range(steps):
        b = beta(u.values - psi_eps.values, eps)
        betas.append(float(b.max()))
        nxt = step_imex(u, dt, problem, eps, psi_eps)
        if np.max(np.abs(nxt.values)) > BLOWUP or not np.all(np.isfinite(nxt.values)):
            raise NumericalAbort(f"solution blew up at t = {(m + 1) * dt:.4g} (|u| > {BLOWUP:g})")
        mono = min(mono, float(np.min(nxt.values - u.values)))
        min_slack = min(min_slack, float(np.min(nxt.values - psi.values)))
        u = nxt
        if (m + 1) % config.snapshot_every == 0 or m + 1 == steps:
            traj.append((m + 1) * dt, u)
    betas.append(float(beta(u.values - psi_eps.values, eps).max()))
    return SolveReport(
        trajectory=traj,
        max_beta=max(betas),
        min_slack=min_slack,
        wall_time=time.perf_counter() - t0,
        cfl_margin=1.0 - dt * ops.lower_diag(),
        monotonicity_violation=mono,
        scheme="imex",
        eps=eps,
        dt=dt,
        contact_tol=10 * eps,
        beta_history=betas,
    )


def solve_projected(problem: Problem, T: float, dt: float | None = None, *, snapshot_every: int = 1,
                    safety: float = 0.9, snapshots: int | None = None) -> SolveReport:
    """Projected explicit scheme from ``u(0) = psi``; ``dt`` defaults to ``safety`` times the limit.

    With ``snapshots`` the step is shrunk so that exactly that many evenly
    spaced snapshots (after ``t = 0``) are stored, independent of the grid.
    """
    t0 = time.perf_counter()
    limit = explicit_dt_limit(problem)
    dt = safety * limit if dt is None else dt
    if snapshots is not None:
        per = max(1, math.ceil(T / (snapshots * dt)))
        dt = T / (snapshots * per)
        snapshot_every = per
    steps, dt = _steps(T, dt)
    psi = problem.psi()
    u = Field(problem.grid, psi.values.copy(), problem.obstacle)
    traj = Trajectory([0.0], [u], dt)
    mono = 0.0
    for m in range(steps):
        nxt = step_projected(u, dt, problem, psi)
        if np.max(np.abs(nxt.values)) > BLOWUP:
            raise NumericalAbort(f"solution blew up at t = {(m + 1) * dt:.4g}")
        mono = min(mono, float(np.min(nxt.values - u.values)))
        u = nxt
        if (m + 1) % snapshot_every == 0 or m + 1 == steps:
            traj.append((m + 1) * dt, u)
    return SolveReport(
        trajectory=traj,
        max_beta=0.0,
        min_slack=float(min(np.min(f.values - psi.values) for f in traj.fields)),
        wall_time=time.perf_counter() - t0,
        cfl_margin=1.0 - dt / limit,
        monotonicity_violation=mono,
        scheme="projected",
        dt=dt,
        contact_tol=problem.grid.h ** (1 + problem.params.s),
        beta_history=[0.0] * steps,
    )


def linear_evolve(problem: Problem, u0: Field, T: float, dt: float) -> Field:
    """Backward Euler for ``u_t + (-Delta)^s u = 0`` with no obstacle or lower-order terms.

    Only the fractional part of ``problem`` is used; it is the reference path
    for checking the implicit solve against the Fourier heat semigroup.
    """
    steps, dt = _steps(T, dt)
    ops = _operators(problem)
    solve_fn = ops.solver(dt)
    u = u0
    for _ in range(steps):
        u = u.with_values(solve_fn(u.values + dt * ops.far_term(u.far)))
    return u


def solve(problem: Problem, config: PenaltyConfig) -> SolveReport:
    """Dispatch on ``config.scheme``: ``imex`` is penalized, ``explicit`` is the projected oracle."""
    if config.scheme == "imex":
        return solve_penalized(problem, config)
    return solve_projected(problem, config.T, config.dt, snapshot_every=config.snapshot_every,
                           safety=config.cfl_safety)


@dataclass
class PicardResult:
    trajectory: Trajectory
    residuals: list[float]
    contracting: bool
    step_residual: float

    @property
    def ratios(self) -> list[float]:
        r = self.residuals
        return [r[k] / r[k - 1] if r[k - 1] > 0 else 0.0 for k in range(1, len(r))]


def picard_solve(problem: Problem, config: PenaltyConfig) -> PicardResult:
    """Iterate ``L u_k = beta_eps(u_{k-1} - psi_eps)`` from ``u_0 = 0``.

    Each iterate is a full IMEX solve over ``[0, T]`` with the penalty source
    frozen at the previous iterate; ``residuals[k-1] = ||u_k - u_{k-1}||``
    (sup over nodes and time levels). The iteration is flagged non-contracting
    if the residual fails to decrease three times in a row.
    """
    eps = config.eps
    steps, dt = _steps(config.T, config.step())
    psi_eps = problem.psi_eps(eps)
    g = problem.grid
    start = Field(g, psi_eps.values.copy(), problem.obstacle)
    prev = np.zeros((steps + 1,) + g.shape)
    residuals: list[float] = []
    rises = 0
    contracting = True
    for _ in range(config.picard_max):
        cur = np.empty_like(prev)
        cur[0] = start.values
        u = start
        for m in range(steps):
            src = beta(prev[m] - psi_eps.values, eps)
            u = step_imex(u, dt, problem, eps, psi_eps, source=src)
            if np.max(np.abs(u.values)) > 1e300 or not np.all(np.isfinite(u.values)):
                raise NumericalAbort("Picard iterate overflowed")
            cur[m + 1] = u.values
        res = float(np.max(np.abs(cur - prev)))
        if residuals and res >= residuals[-1]:
            rises += 1
            if rises >= 3:
                contracting = False
        else:
            rises = 0
        residuals.append(res)
        prev = cur
        if res <= config.picard_tol:
            break
    fields = [start.with_values(v) for v in prev]
    traj = Trajectory([m * dt for m in range(steps + 1)], fields, dt)
    step_res = max(
        float(np.max(np.abs(fields[m + 1].values - step_imex(fields[m], dt, problem, eps, psi_eps).values)))
        for m in range(steps)
    )
    return PicardResult(traj, residuals, contracting, step_res)


@dataclass
class ComparisonReport:
    max_violation: float
    report1: SolveReport
    report2: SolveReport


def comparison_run(problem1: Problem, problem2: Problem, config: PenaltyConfig) -> ComparisonReport:
    """Solve both problems with the same controls; report ``max (u1 - u2)^+`` over space-time."""
    if problem1.grid != problem2.grid:
        raise ValueError("problems must share a grid")
    r1, r2 = solve(problem1, config), solve(problem2, config)
    a, b = r1.trajectory.stack(), r2.trajectory.stack()
    return ComparisonReport(float(max(0.0, np.max(a - b))), r1, r2)


def oracle_distance(a: Trajectory, b: Trajectory) -> float:
    """``sup_t ||a(t) - b(t)||_inf`` at the snapshot times of ``a``, ``b`` interpolated linearly in time."""
    tb = np.asarray(b.times)
    B = b.stack()
    worst = 0.0
    for t, f in zip(a.times, a.fields):
        if t > tb[-1] + 1e-12:
            break
        k = int(np.clip(np.searchsorted(tb, t) - 1, 0, len(tb) - 2))
        w = (t - tb[k]) / (tb[k + 1] - tb[k])
        w = min(max(w, 0.0), 1.0)
        ref = (1 - w) * B[k] + w * B[k + 1]
        worst = max(worst, float(np.max(np.abs(f.values - ref))))
    return worst


def contact_masks(report: SolveReport, psi: Field) -> np.ndarray:
    """Indicator of ``{u - psi <= tol}`` per snapshot, tolerance from the report's scheme."""
    return report.trajectory.stack() - psi.values <= report.contact_tol


def nesting_violation(masks: np.ndarray) -> float:
    """Fraction of nodes that re-enter the contact set at a later snapshot."""
    if len(masks) < 2:
        return 0.0
    re_enter = np.any(masks[1:] & ~np.logical_and.accumulate(masks, axis=0)[:-1], axis=0)
    return float(np.mean(re_enter))
