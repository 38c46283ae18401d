"""Free-boundary extraction and measured regularity of solved trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import Field, Grid, Trajectory
from .nonlocal_ops import OperatorParams, QuadratureConfig, frac_laplacian, gradient, lower_order_apply

# -- contact set and free boundary -----------------------------------------------


@dataclass(frozen=True, eq=False)
class ContactMask:
    mask: np.ndarray
    tol: float

    def __array__(self, dtype=None, copy=None):
        return self.mask if dtype is None else self.mask.astype(dtype)

    @property
    def fraction(self) -> float:
        return float(np.mean(self.mask))


def contact_set(u: Field, psi: Field, tol: float | None = None) -> ContactMask:
    """``{u - psi <= tol}``; ``tol`` defaults to ``h^{1+s}`` with ``s = 3/4`` if not given."""
    if u.grid != psi.grid:
        raise ValueError("fields live on different grids")
    tol = u.grid.h**1.75 if tol is None else tol
    return ContactMask(u.values - psi.values <= tol, float(tol))


@dataclass
class FreeBoundary:
    indices: list[tuple[int, ...]]
    points: np.ndarray
    degenerate: bool


def _as_mask(mask) -> np.ndarray:
    return np.asarray(mask.mask if isinstance(mask, ContactMask) else mask, dtype=bool)


def free_boundary(mask, grid: Grid | None = None) -> FreeBoundary:
    """Masked nodes with at least one unmasked axis neighbour.

    The result is flagged ``degenerate`` when most masked nodes are boundary
    nodes (e.g. a checkerboard), i.e. the mask is not resolved.
    """
    m = _as_mask(mask)
    if not m.any() or m.all():
        raise ValueError("mask is empty or full; no free boundary")
    edge = np.zeros_like(m)
    for ax in range(m.ndim):
        for shift in (1, -1):
            nb = np.roll(m, shift, axis=ax)
            # neighbours across the box edge do not count
            idx = [slice(None)] * m.ndim
            idx[ax] = 0 if shift == 1 else -1
            nb[tuple(idx)] = True
            edge |= m & ~nb
    ind = [tuple(int(i) for i in k) for k in np.argwhere(edge)]
    pts = np.array(ind, dtype=float)
    if grid is not None:
        pts = -grid.half_width + pts * grid.h
    n_mask = int(m.sum())
    return FreeBoundary(ind, pts, n_mask > 4 and len(ind) > 0.5 * n_mask)


def probe_point(mask) -> tuple[int, ...]:
    """Free-boundary node farthest from the box boundary (ties: lowest index)."""
    m = _as_mask(mask)
    fb = free_boundary(m)
    n = m.shape[0]
    best = max(fb.indices, key=lambda k: (min(min(i, n - 1 - i) for i in k), tuple(-i for i in k)))
    return best


# -- exponent fits ---------------------------------------------------------------


@dataclass
class ExponentFit:
    exponent: float
    band: float
    range_used: tuple[float, float]
    samples: list[tuple[float, float]] = field(default_factory=list)


def _fit_loglog(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    lx, ly = np.log(xs), np.log(ys)
    slope, icpt = np.polyfit(lx, ly, 1)
    local = np.diff(ly) / np.diff(lx)
    band = float(np.max(np.abs(local - slope))) if len(local) else 0.0
    return float(slope), band


def dyadic_radii(h: float, r_min: float, r_max: float) -> list[float]:
    """Powers of two in ``[r_min, r_max]``."""
    k0 = math.ceil(math.log2(r_min) - 1e-12)
    k1 = math.floor(math.log2(r_max) + 1e-12)
    return [2.0**k for k in range(k0, k1 + 1)]


def decay_exponent(u: Field, psi: Field, x0, radii: Sequence[float] | None = None) -> ExponentFit:
    """Slope of ``log sup_{B_r(x0)} |u - psi|`` against ``log r``.

    ``x0`` is a node index. Radii outside ``[8h, L/4]`` are dropped; at least
    four must remain. By default the radii also stop at half the distance from
    ``x0`` to the farthest contact node, so a ball never swallows the whole
    contact set (beyond that the supremum saturates).
    """
    g = u.grid
    if radii is None:
        r_max = g.half_width / 4
        contact = u.values - psi.values <= g.h ** 1.75
        if contact.any():
            r_max = min(r_max, 0.5 * float(g.radius(np.atleast_1d(x0))[contact].max()))
        radii = dyadic_radii(g.h, 8 * g.h, r_max)
    radii = [r for r in radii if 8 * g.h * (1 - 1e-12) <= r <= g.half_width / 4 * (1 + 1e-12)]
    if len(radii) < 4:
        raise ValueError(f"only {len(radii)} resolved radii in [8h, L/4]; need 4")
    dist = g.radius(np.atleast_1d(x0))
    gap = np.abs(u.values - psi.values)
    sups = np.array([gap[dist <= r + 1e-12 * r].max() for r in radii])
    if np.any(sups <= 0):
        raise ValueError("u coincides with psi on a sampled ball; decay not measurable")
    k, band = _fit_loglog(np.array(radii), sups)
    return ExponentFit(k, band, (radii[0], radii[-1]), list(zip(radii, sups.tolist())))


def holder_seminorm(f: Field, beta: float, window: float) -> float:
    """``max |f(x) - f(z)| / |x - z|^beta`` over node pairs with ``0 < |x - z| <= window``."""
    if not 0 < beta < 2:
        raise ValueError("beta must lie in (0, 2)")
    g = f.grid
    K = int(math.floor(window / g.h + 1e-9))
    v = f.values
    best = 0.0
    if g.dim == 1:
        for k in range(1, min(K, g.n - 1) + 1):
            d = np.abs(v[k:] - v[:-k]).max() / (k * g.h) ** beta
            best = max(best, float(d))
        return best
    for k0 in range(0, K + 1):
        for k1 in range(-K, K + 1):
            if (k0 == 0 and k1 <= 0) or k0 * k0 + k1 * k1 > K * K or k0 >= g.n or abs(k1) >= g.n:
                continue
            a = v[k0:, max(k1, 0) : g.n + min(k1, 0)]
            b = v[: g.n - k0, max(-k1, 0) : g.n - max(k1, 0)]
            d = np.abs(a - b).max() / (math.hypot(k0, k1) * g.h) ** beta
            best = max(best, float(d))
    return best


def time_derivative(traj: Trajectory) -> np.ndarray:
    """Centred differences of snapshots (one-sided at the ends); shape ``(K, *grid.shape)``."""
    U = traj.stack()
    t = np.asarray(traj.times)
    if len(t) < 2:
        raise ValueError("need at least two snapshots")
    return np.gradient(U, t, axis=0)


SELECTORS = ("u", "dt_u", "fraclap_u")


def time_exponent(
    traj: Trajectory,
    x,
    selector: str = "u",
    *,
    start: int = 0,
    s: float | None = None,
    quad: QuadratureConfig = QuadratureConfig(),
    min_snapshots: int = 16,
) -> ExponentFit:
    """Hoelder exponent in time of ``f(., x)`` from its dyadic oscillation modulus.

    For each dyadic offset ``tau`` the modulus is ``max_t |f(t + tau, x) - f(t, x)|``
    over start snapshots ``t >= t_start``; the exponent is the slope of
    ``log modulus`` against ``log tau``. Offsets run up to half the remaining
    window so every ``tau`` is sampled from several starts. Snapshots must be
    evenly spaced. For ``dt_u`` the end snapshots (one-sided differences) are
    excluded.
    """
    if selector not in SELECTORS:
        raise ValueError(f"selector must be one of {SELECTORS}")
    if len(traj.times) < min_snapshots:
        raise ValueError(f"need at least {min_snapshots} snapshots")
    t = np.asarray(traj.times)
    spacing = np.diff(t)
    if np.ptp(spacing) > 1e-9 * spacing.max():
        raise ValueError("snapshots must be evenly spaced")
    x = tuple(int(i) for i in np.atleast_1d(x))
    U = traj.stack()
    rounding = np.finfo(float).eps * max(float(np.max(np.abs(U))), 1.0)
    if selector == "u":
        series = U[(slice(None),) + x]
        lo, hi = start, len(series) - 1
    elif selector == "dt_u":
        series = time_derivative(traj)[(slice(None),) + x]
        lo, hi = max(start, 1), len(series) - 2
        rounding /= spacing[0]
    else:
        if s is None:
            raise ValueError("fraclap_u needs the order s")
        series = np.array([frac_laplacian(f, s, quad).values[x] for f in traj.fields])
        lo, hi = start, len(series) - 1
        rounding *= traj.grid.h ** (-2 * s)
    window = series[lo : hi + 1]
    steps = []
    k = 1
    while 2 * k <= len(window) - 1:
        steps.append(k)
        k *= 2
    if len(steps) < 3:
        raise ValueError("too few dyadic time offsets after the start snapshot")
    taus = np.array([k * spacing[0] for k in steps])
    mods = np.array([np.max(np.abs(window[k:] - window[:-k])) for k in steps])
    if np.any(mods <= 10 * rounding):
        raise ValueError("unresolved: increments below 10x the arithmetic noise floor")
    k_t, band = _fit_loglog(taus, mods)
    return ExponentFit(k_t, band, (float(taus[0]), float(taus[-1])), list(zip(taus.tolist(), mods.tolist())))


def release_point(traj: Trajectory, psi: Field, tol: float) -> tuple[tuple[int, ...], int] | None:
    """A node that starts in the contact set and leaves it mid-run, with its last contact snapshot.

    Among such nodes the one released closest to the middle of the run is used.
    """
    masks = traj.stack() - psi.values <= tol
    K = len(masks)
    in_first = masks[0]
    left = in_first & ~masks[-1]
    if not left.any():
        return None
    last_in = np.where(left, K - 1 - np.argmax(masks[::-1], axis=0), -1)
    target = K // 2
    score = np.where(left, np.abs(last_in - target), K * 10)
    idx = np.unravel_index(np.argmin(score), score.shape)
    return tuple(int(i) for i in idx), int(last_in[idx])


# -- structural checks -----------------------------------------------------------


def semiconvexity_constant(u: Field, margin: float | None = None) -> float:
    """``-min delta u(x, h e_i) / h^2`` over interior nodes and axes, floored at 0.

    Nodes within ``margin`` (default ``L/4``) of the box edge are skipped:
    there the truncation to exterior data distorts the solution.
    """
    g = u.grid
    margin = g.half_width / 4 if margin is None else margin
    v, h = u.values, g.h
    inner = np.all(np.abs(g.points()) <= g.half_width - margin + 1e-12, axis=-1)
    worst = 0.0
    for ax in range(v.ndim):
        d2 = np.full(v.shape, np.inf)
        idx = [slice(None)] * v.ndim
        idx[ax] = slice(1, -1)
        d2[tuple(idx)] = np.diff(v, n=2, axis=ax)
        worst = min(worst, float(np.min(d2[inner])) / (h * h))
    return max(0.0, -worst)


@dataclass
class MonotonicityCheck:
    violation: float
    tol: float
    at: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.violation >= -self.tol


def monotone_in_time_check(traj: Trajectory, tol: float) -> MonotonicityCheck:
    """Worst ``u(t_{k+1}) - u(t_k)`` over snapshots and nodes (0 when never negative)."""
    U = traj.stack()
    if len(U) < 2:
        raise ValueError("need at least two snapshots")
    d = np.diff(U, axis=0)
    k = np.unravel_index(np.argmin(d), d.shape)
    return MonotonicityCheck(min(0.0, float(d[k])), tol, tuple(int(i) for i in k))


def nesting_fraction(traj: Trajectory, psi: Field, tol: float) -> float:
    """Fraction of nodes that are in contact at some snapshot after having left it."""
    masks = traj.stack() - psi.values <= tol
    if len(masks) < 2:
        return 0.0
    so_far = np.logical_and.accumulate(masks, axis=0)
    re_enter = np.any(masks[1:] & ~so_far[:-1], axis=0)
    return float(np.mean(re_enter))


def lipschitz_constants(traj: Trajectory) -> tuple[float, float]:
    """``sup |d_t u|`` (snapshot differences) and ``sup |grad u|`` over the trajectory."""
    dt_sup = float(np.max(np.abs(np.diff(traj.stack(), axis=0)) / np.diff(traj.times).reshape((-1,) + (1,) * traj.grid.dim)))
    gr = max(float(np.max(np.sqrt(np.sum(gradient(f) ** 2, axis=0)))) for f in traj.fields)
    return dt_sup, gr


@dataclass
class SignStructure:
    contact_violation: float
    free_violation: float
    tol: float
    g: np.ndarray = field(repr=False)

    def passed(self, limit: float = 0.02) -> bool:
        return self.contact_violation <= limit and self.free_violation <= limit


def sign_structure_check(
    u: Field,
    psi: Field,
    params: OperatorParams,
    quad: QuadratureConfig = QuadratureConfig(),
    mask=None,
    *,
    tol: float | None = None,
    rel_tol: float = 5e-2,
) -> SignStructure:
    """Fractions of contact nodes with ``g < -tol`` and free nodes with ``g > tol``.

    ``g = (-Delta)^s u - R u``. Without ``tol`` it is ``rel_tol * max |g|``,
    floored at the rounding level of the quadrature.
    """
    g = frac_laplacian(u, params.s, quad).values - lower_order_apply(u, params, quad).values
    m = _as_mask(mask if mask is not None else contact_set(u, psi, u.grid.h ** (1 + params.s)))
    if tol is None:
        noise = 1e-12 * max(1.0, float(np.max(np.abs(u.values)))) * u.grid.h ** (-2 * params.s)
        tol = max(rel_tol * float(np.max(np.abs(g))), noise)
    on = float(np.mean(g[m] < -tol)) if m.any() else 0.0
    off = float(np.mean(g[~m] > tol)) if (~m).any() else 0.0
    return SignStructure(on, off, tol, g)


# -- exponent bookkeeping --------------------------------------------------------


def exponent_map(alpha, s):
    """``Phi(alpha) = (1 + alpha)(1 - s)/(1 + s)``."""
    return (1 + alpha) * (1 - s) / (1 + s)


def exponent_ladder(s, alpha0, k_max: int = 40) -> tuple[list, object]:
    """Iterates of ``Phi`` from ``alpha0`` and the fixed point ``(1 - s)/(2 s)``.

    Works with floats or :class:`fractions.Fraction` (exact arithmetic).
    """
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    limit = (1 - s) / (2 * s)
    if not 0 < alpha0 < limit:
        raise ValueError("alpha0 must lie in (0, (1-s)/(2s))")
    ladder = [alpha0]
    for _ in range(k_max):
        ladder.append(exponent_map(ladder[-1], s))
    return ladder, limit


@dataclass(frozen=True)
class AuxConstants:
    gamma: float
    delta: float
    eta: float
    a: float


def aux_constants(s: float, sigma: float, alpha: float, n: int) -> AuxConstants:
    if not 0.5 < s < 1 or not 0 < sigma < s:
        raise ValueError("need 1/2 < s < 1 and 0 < sigma < s")
    if not alpha > 0 or n < 1:
        raise ValueError("need alpha > 0 and n >= 1")
    a = 1 - 2 * s
    return AuxConstants(
        gamma=s - max(sigma, 0.5),
        delta=0.25 * (alpha / (alpha + 2 * s) - alpha / 2),
        eta=math.sqrt((1 + a) / (2 * n)),
        a=a,
    )


# -- report ----------------------------------------------------------------------


@dataclass
class ReportRow:
    quantity: str
    value: float
    band: str
    range_used: str
    passed: bool | None


@dataclass
class RegularityReport:
    rows: list[ReportRow] = field(default_factory=list)
    free_boundary_points: list = field(default_factory=list)

    def add(self, quantity, value, band="", range_used="", passed=None):
        self.rows.append(ReportRow(quantity, float(value), str(band), str(range_used), passed))

    def get(self, quantity: str) -> ReportRow:
        for r in self.rows:
            if r.quantity == quantity:
                return r
        raise KeyError(quantity)

    @property
    def all_passed(self) -> bool:
        return all(r.passed is not False for r in self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value", "band", "range_used", "pass"])
            for r in self.rows:
                w.writerow([r.quantity, f"{r.value:.10g}", r.band, r.range_used,
                            "" if r.passed is None else str(bool(r.passed)).lower()])


def analyze_trajectory(
    traj: Trajectory,
    psi: Field,
    params: OperatorParams,
    quad: QuadratureConfig = QuadratureConfig(),
    *,
    contact_tol: float,
    mono_tol: float = 0.0,
) -> RegularityReport:
    """Regularity diagnostics of a solved trajectory, each with the band it is judged against."""
    rep = RegularityReport()
    g = traj.grid
    s = params.s
    mono = monotone_in_time_check(traj, mono_tol)
    rep.add("monotonicity_violation", mono.violation, f">= -{mono_tol:g}", "all snapshots", mono.passed)
    nest = nesting_fraction(traj, psi, contact_tol)
    rep.add("contact_nesting_violation", nest, "<= 0.01", "all snapshots", nest <= 0.01)
    c0 = semiconvexity_constant(traj.fields[-1])
    rep.add("semiconvexity_C0", c0, "", "final snapshot")
    lt, lx = lipschitz_constants(traj)
    rep.add("sup_dt_u", lt, "", "all snapshots")
    rep.add("sup_grad_u", lx, "", "all snapshots")
    mid = traj.fields[len(traj.fields) // 2]
    mask = contact_set(mid, psi, contact_tol)
    final_mask = contact_set(traj.fields[-1], psi, contact_tol)
    if mask.mask.any() and not mask.mask.all():
        sign = sign_structure_check(mid, psi, params, quad, mask)
        rep.add("sign_contact_violation", sign.contact_violation, "<= 0.02", f"tol={sign.tol:.3g}", sign.contact_violation <= 0.02)
        rep.add("sign_free_violation", sign.free_violation, "<= 0.02", f"tol={sign.tol:.3g}", sign.free_violation <= 0.02)
    if final_mask.mask.any() and not final_mask.mask.all():
        # the decay profile is measured on the final slice, where the initial layer has faded
        x0 = probe_point(final_mask)
        rep.free_boundary_points = free_boundary(final_mask, g).points.tolist()
        try:
            fit = decay_exponent(traj.fields[-1], psi, x0)
            lo, hi = 1 + s - 0.2, 1 + s + 0.2
            rep.add("kappa_space", fit.exponent, f"[{lo:.3g}, {hi:.3g}] +- {fit.band:.3g}",
                    f"r in [{fit.range_used[0]:.3g}, {fit.range_used[1]:.3g}]", lo <= fit.exponent <= hi)
        except ValueError as exc:
            rep.add("kappa_space", float("nan"), str(exc), "", None)
    rel = release_point(traj, psi, contact_tol)
    if rel is not None and len(traj.times) >= 16:
        node, _ = rel
        try:
            fit = time_exponent(traj, node, "dt_u")
            lo = (1 - s) / (2 * s) - 0.15
            rep.add("kappa_time", fit.exponent, f">= {lo:.3g} +- {fit.band:.3g}",
                    f"tau in [{fit.range_used[0]:.3g}, {fit.range_used[1]:.3g}]", fit.exponent >= lo)
        except ValueError as exc:
            rep.add("kappa_time", float("nan"), str(exc), "", None)
    return rep
