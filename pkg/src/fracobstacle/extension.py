"""Upper-half-space extension, the w field, and related diagnostics.

The extension of ``u`` is the Poisson-kernel average
``v(x, y) = int P(x - z, y) u(z) dz`` with
``P(x, y) = c^P y^{2s} / (|x|^2 + y^2)^{(d+2s)/2}``. It is evaluated in the
second-difference form ``v(x, y) = u(x) + 1/2 int P(z, y) delta u(x, z) dz``
with the lattice quadrature of :mod:`nonlocal_ops`, so that for small ``y``
the extension reproduces the discrete fractional Laplacian through its
``y^{2s}`` boundary layer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betainc, gamma as gamma_fn

from .grid import Field, Grid, _extended_values
from .nonlocal_ops import (
    KernelSpec,
    OperatorParams,
    QuadratureConfig,
    _angle_rule,
    _gl01,
    _radial_rule,
    _square_rays,
    build_stencil,
    frac_laplacian,
    lower_order_apply,
)


def poisson_constant(d: int, s: float) -> float:
    """``c^P_{d,s}`` giving ``P(., y)`` unit mass: ``Gamma(d/2 + s) / (pi^{d/2} Gamma(s))``."""
    return gamma_fn(d / 2 + s) / (math.pi ** (d / 2) * gamma_fn(s))


def poisson_kernel(d: int, s: float, x, y: float) -> np.ndarray:
    """``P(x, y)``; ``x`` has shape ``(..., d)`` (a scalar or 1-D array is accepted for ``d = 1``)."""
    if not y > 0:
        raise ValueError("y must be positive")
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    r2 = np.sum(x * x, axis=-1)
    return poisson_constant(d, s) * y ** (2 * s) / (r2 + y * y) ** ((d + 2 * s) / 2)


def poisson_mass_within(d: int, s: float, R: float, y: float) -> float:
    """Mass of ``P(., y)`` in the ball of radius ``R``: ``I_{R^2/(R^2+y^2)}(d/2, s)``."""
    return float(betainc(d / 2, s, R * R / (R * R + y * y)))


def flux_constant(s: float) -> float:
    """``kappa_s = 2^{1-2s} Gamma(1-s) / Gamma(s)``: ``-lim y^a v_y = kappa_s (-Delta)^s u``."""
    return 2.0 ** (1 - 2 * s) * gamma_fn(1 - s) / gamma_fn(s)


def graded_mesh(Y: float, M: int, power: float = 3.0) -> np.ndarray:
    """``y_j = Y (j/M)^power``, ``j = 0..M``."""
    if M < 32:
        raise ValueError("need at least 32 levels in y")
    if power < 2:
        raise ValueError("grading power must be at least 2")
    return Y * (np.arange(M + 1) / M) ** power


@dataclass(frozen=True, eq=False)
class ExtensionField:
    """Samples ``v(x_i, y_j)``; ``values[0]`` is the boundary data.

    ``a`` is the weight exponent of the degenerate operator the field is
    harmonic for (``a = 1 - 2 s`` for the order ``s`` used to build it).
    """

    grid: Grid
    y: np.ndarray
    values: np.ndarray
    s: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if y[0] != 0.0 or np.any(np.diff(y) <= 0):
            raise ValueError("y mesh must start at 0 and increase strictly")
        if vals.shape != (len(y),) + self.grid.shape:
            raise ValueError("values must have shape (len(y), *grid.shape)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("extension has non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "values", vals)

    @property
    def a(self) -> float:
        return 1.0 - 2.0 * self.s

    @property
    def boundary(self) -> np.ndarray:
        return self.values[0]

    def write_csv(self, path) -> None:
        """Rows ``x[,x1],y,value``."""
        pts = self.grid.points().reshape(-1, self.grid.dim)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow((["x"] if self.grid.dim == 1 else ["x0", "x1"]) + ["y", "value"])
            for j, yj in enumerate(self.y):
                for p, v in zip(pts, self.values[j].reshape(-1)):
                    w.writerow([f"{c:.17g}" for c in p] + [f"{yj:.17g}", f"{v:.17g}"])


def _poisson_spec(d: int, s: float, y: float) -> KernelSpec:
    c = poisson_constant(d, s)

    def K(z):
        r2 = np.sum(z * z, axis=-1)
        return c * y ** (2 * s) / (r2 + y * y) ** ((d + 2 * s) / 2)

    return KernelSpec(K, s, f"poisson({s:g},{y:g})")


def _quadrature_mass(grid: Grid, kernel: KernelSpec, stencil, quad: QuadratureConfig) -> float:
    """Mass of the kernel under the same near-square, cell, and tail rules as the stencil."""
    d, h, J, m = grid.dim, grid.h, grid.n - 1, quad.inner_radius
    rt, rw = _radial_rule(d - 1.0)
    R = m * h
    if d == 1:
        near = 2 * np.sum(rw * R * kernel((rt * R)[:, None]))
        t, w = _gl01(quad.cell_order)
        z = (np.arange(m, J)[:, None] + t[None, :]) * h
        cells = 2 * np.sum(w * h * kernel(z[..., None]))
    else:
        th, thw = _angle_rule(64, 0.0, 2 * math.pi)
        rho = R * _square_rays(th)
        r = rho[:, None] * rt[None, :]
        z = np.stack([r * np.cos(th)[:, None], r * np.sin(th)[:, None]], axis=-1)
        near = np.sum((thw * rho)[:, None] * rw[None, :] * r * kernel(z))
        t, w = _gl01(quad.cell_order)
        k = np.arange(-J, J)
        k0, k1 = np.meshgrid(k, k, indexing="ij")
        keep = ~((k0 >= -m) & (k0 < m) & (k1 >= -m) & (k1 < m))
        t0, t1 = (a.ravel() for a in np.meshgrid(t, t, indexing="ij"))
        wt = np.outer(w, w).ravel()
        z = np.stack([(k0[keep][:, None] + t0) * h, (k1[keep][:, None] + t1) * h], axis=-1)
        cells = np.sum(wt * h * h * kernel(z))
    return float(near + cells + stencil.tail_w.sum())


def extend(
    boundary: Field,
    s: float | OperatorParams,
    y_mesh: np.ndarray | None = None,
    quad: QuadratureConfig = QuadratureConfig(),
    *,
    mass_tol: float = 1e-6,
) -> ExtensionField:
    """Poisson extension of ``boundary`` to the graded ``y`` mesh.

    ``s`` may be any order in ``(0, 1)`` (``OperatorParams`` gives its ``s``).
    The default mesh is ``graded_mesh(L/2, 64)``. Raises if the quadrature mass
    of ``P(., y_j)`` drifts from 1 by more than ``mass_tol`` at any level.
    """
    s = s.s if isinstance(s, OperatorParams) else float(s)
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    g = boundary.grid
    y = graded_mesh(g.half_width / 2, 64) if y_mesh is None else np.asarray(y_mesh, dtype=float)
    if not np.all(np.isfinite(boundary.values)):
        raise ValueError("boundary has non-finite values")
    out = np.empty((len(y),) + g.shape)
    out[0] = boundary.values
    for j, yj in enumerate(y[1:], start=1):
        kern = _poisson_spec(g.dim, s, yj)
        st = build_stencil(g, kern, s, quad, near_power=g.dim + 1.0)
        mass = _quadrature_mass(g, kern, st, quad)
        if st.tail_end.any() and abs(mass - 1.0) > 1e-9:
            # the mass node only knows the leading power of the kernel while the
            # exterior mass is known exactly (total 1); calibrate small drifts
            w = st.tail_w.copy()
            factor = 1.0 + (1.0 - mass) / w[st.tail_end].sum()
            if abs(factor - 1.0) <= 0.05:
                w[st.tail_end] *= factor
                st = replace(st, tail_w=w, _far_cache={})
                mass = _quadrature_mass(g, kern, st, quad)
        if abs(mass - 1.0) > mass_tol:
            raise ValueError(f"Poisson kernel mass {mass:.10f} at y = {yj:.4g} drifts from 1 by more than {mass_tol:g}")
        out[j] = boundary.values + 0.5 * st.apply(boundary)
    return ExtensionField(g, y, out, s)


@dataclass
class FluxResult:
    flux: Field
    flagged: np.ndarray
    leading: np.ndarray = field(repr=False)


def normal_flux(ext: ExtensionField, *, levels: int = 6, return_details: bool = False):
    """Estimate ``(-Delta)^s`` of the boundary data from the ``y^{2s}`` boundary layer.

    Fits ``v(x, y_j) - v(x, 0) = A y^{2s} + B y^2`` on the first ``levels`` mesh
    levels and returns ``-2 s A / kappa_s``, the limit of ``-y^a v_y`` in the
    normalization where the symbol of ``(-Delta)^s`` is ``|xi|^{2s}``. Nodes whose
    fit residual exceeds 10% of the leading term are flagged.
    """
    s = ext.s
    y = ext.y[1 : levels + 1]
    if len(y) < 2:
        raise ValueError("need at least two positive mesh levels")
    P = np.stack([y ** (2 * s), y**2], axis=1)
    scale = np.abs(P).max(axis=0)
    rhs = (ext.values[1 : levels + 1] - ext.values[0]).reshape(len(y), -1)
    coef, *_ = np.linalg.lstsq(P / scale, rhs, rcond=None)
    coef = coef / scale[:, None]
    A = coef[0]
    resid = np.max(np.abs(P @ coef - rhs), axis=0)
    lead = np.abs(A) * y[-1] ** (2 * s)
    flagged = (resid > 0.1 * lead) & (resid > 1e-13)
    flux = Field(ext.grid, (-2 * s * A / flux_constant(s)).reshape(ext.grid.shape))
    if return_details:
        return FluxResult(flux, flagged.reshape(ext.grid.shape), A.reshape(ext.grid.shape))
    return flux


# -- recentring and the w field --------------------------------------------------


def recenter(f: Field, index) -> Field:
    """``x -> f(x + x_index)`` on the same grid; values shifted in from the far field."""
    g = f.grid
    idx = np.atleast_1d(np.asarray(index, dtype=int))
    shift = idx - np.asarray(g.center_index)
    pad = int(np.max(np.abs(shift))) if shift.size else 0
    offset = shift * g.h
    far = None
    if f.far is not None:
        far = lambda p, F=f.far, o=offset: F(p + o)  # noqa: E731
    if pad == 0:
        return Field(g, f.values.copy(), far)
    ext = _extended_values(f, pad)
    sl = tuple(slice(pad + k, pad + k + g.n) for k in shift)
    return Field(g, ext[sl].copy(), far)


def _recenter_mask(mask: np.ndarray, grid: Grid, index) -> np.ndarray:
    m = Field(grid, mask.astype(float))
    return recenter(m, index).values > 0.5


@dataclass
class WBoundary:
    """Boundary data ``[(-Delta)^s u - R u(0)] chi_contact`` after recentring."""

    values: Field
    mask: np.ndarray
    lower_at_origin: float
    center: tuple[int, ...]
    clipped: int
    tol: float


def build_w(
    u_slice: Field,
    psi: Field,
    params: OperatorParams,
    quad: QuadratureConfig = QuadratureConfig(),
    *,
    mask: np.ndarray | None = None,
    tol: float | None = None,
    center=None,
    y_mesh: np.ndarray | None = None,
) -> tuple[WBoundary, ExtensionField]:
    """Assemble ``w(., 0)`` about a free-boundary node and extend it with order ``1 - s``.

    Without ``center`` the free-boundary node farthest from the box boundary is
    used. Negative values on the contact set are clipped at ``-tol`` and counted.
    """
    from .regularity import contact_set, probe_point

    g = u_slice.grid
    tol = g.h ** (1 + params.s) if tol is None else tol
    if mask is None:
        mask = contact_set(u_slice, psi, tol)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no contact set")
    if center is None:
        center = probe_point(mask)
    center = tuple(int(c) for c in np.atleast_1d(center))
    u = recenter(u_slice, center)
    m = _recenter_mask(mask, g, center)
    lower = lower_order_apply(u, params, quad).values[g.center_index]
    vals = np.where(m, frac_laplacian(u, params.s, quad).values - lower, 0.0)
    neg = m & (vals < -tol)
    vals = np.where(neg, -tol, vals)
    wb = WBoundary(Field(g, vals), m, float(lower), center, int(neg.sum()), tol)
    return wb, extend(wb.values, 1.0 - params.s, y_mesh, quad)


def vtilde(
    u_slice: Field,
    psi: Field,
    params: OperatorParams,
    quad: QuadratureConfig = QuadratureConfig(),
    *,
    center=None,
    y_mesh: np.ndarray | None = None,
) -> ExtensionField:
    """``ext(u) + kappa_s R u(0) y^{1-a} / (1-a) - psi`` about the chosen centre."""
    g = u_slice.grid
    if center is not None:
        u_slice, psi = recenter(u_slice, center), recenter(psi, center)
    ext = extend(u_slice, params.s, y_mesh, quad)
    lower = lower_order_apply(u_slice, params, quad).values[g.center_index]
    a = params.a
    shift = flux_constant(params.s) * lower * ext.y ** (1 - a) / (1 - a)
    vals = ext.values + shift.reshape((-1,) + (1,) * g.dim) - psi.values[None]
    return ExtensionField(g, ext.y, vals, params.s)


@dataclass
class VtildeBoundReport:
    worst_ratio: float
    worst_at: tuple
    checked: int


def vtilde_bounds_check(
    ext: ExtensionField, mask: np.ndarray, C0: float, C1: float, gamma: float, *, kappa: float | None = None
) -> VtildeBoundReport:
    """Worst ratio of ``vt(x, y) - vt(x, 0)`` to ``n C0 y^2/(1+a) + kappa C1 |x|^gamma y^{1-a}/(1-a)`` on the mask.

    ``kappa`` defaults to the flux constant of ``ext.s``: with the symbol
    normalization of this package the flux of the extension is ``kappa_s`` times
    the fractional Laplacian.
    """
    g = ext.grid
    a = ext.a
    kappa = flux_constant(ext.s) if kappa is None else kappa
    r = g.radius()
    y = ext.y[1:].reshape((-1,) + (1,) * g.dim)
    rhs = g.dim * C0 * y**2 / (1 + a) + kappa * C1 * r[None] ** gamma * y ** (1 - a) / (1 - a)
    diff = ext.values[1:] - ext.values[0][None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, diff / rhs, np.where(diff > 0, np.inf, 0.0))
    ratio = np.where(np.asarray(mask, dtype=bool)[None], ratio, -np.inf)
    k = np.unravel_index(np.argmax(ratio), ratio.shape)
    worst = float(ratio[k]) if np.any(mask) else 0.0
    return VtildeBoundReport(max(worst, 0.0) if np.isfinite(worst) else worst, (float(ext.y[k[0] + 1]),) + tuple(int(i) for i in k[1:]), int(np.sum(mask)) * (len(ext.y) - 1))


def dyadic_flux_infima(ext: ExtensionField, kmax: int = 4) -> list[tuple[int, float]]:
    """``inf y^a vt_y`` over ``B_{4^-k} x [0, eta 4^-k]`` for ``k = 0..kmax`` (reported only)."""
    g = ext.grid
    a = ext.a
    eta = math.sqrt((1 + a) / (2 * g.dim))
    ym = 0.5 * (ext.y[1:] + ext.y[:-1])
    dv = np.diff(ext.values, axis=0) / np.diff(ext.y).reshape((-1,) + (1,) * g.dim)
    flux = ym.reshape((-1,) + (1,) * g.dim) ** a * dv
    r = g.radius()
    out = []
    for k in range(kmax + 1):
        rad = 4.0**-k
        sel = (ym <= eta * rad)[:, None] if g.dim == 1 else (ym <= eta * rad)[:, None, None]
        region = sel & (r <= rad)[None]
        out.append((k, float(flux[region].min()) if region.any() else float("nan")))
    return out


# -- monotonicity quantity and convex hull ---------------------------------------


def aux_delta(alpha: float, s: float) -> float:
    return 0.25 * (alpha / (alpha + 2 * s) - alpha / 2)


@dataclass
class MonotonicityReport:
    radii: list[float]
    phi: list[float]
    alpha: float
    delta: float
    eta: float
    excluded: list[float]

    @property
    def bound_multiplier(self) -> float:
        """``max_r phi(r) / (1 + phi(1))``; ``phi(1)`` is taken at the largest radius when 1 is not sampled."""
        ref = self.phi[int(np.argmin(np.abs(np.asarray(self.radii) - 1.0)))]
        return max(self.phi) / (1.0 + ref)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "phi"])
            for r, p in zip(self.radii, self.phi):
                w.writerow([f"{r:.17g}", f"{p:.17g}"])


def phi(ext_w: ExtensionField, r: float, *, exclude: float | None = None, return_excluded: bool = False):
    """``r^{-(1-a)} int_{B_r^+} |grad w|^2 y^a / |z|^{n-1+a} dz`` with ``a`` the field's weight exponent.

    For the extension of ``w`` (order ``1 - s``) this is the monotonicity
    quantity with normalization ``r^{2(1-s)}``. Cell-centred gradients; cells
    within ``exclude`` (default ``2h``) of the origin are left out.
    """
    g = ext_w.grid
    h = g.h
    if r < 8 * h * (1 - 1e-12):
        raise ValueError(f"unresolved radius r = {r:g} < 8h = {8 * h:g}")
    if r > min(g.half_width, ext_w.y[-1]) * (1 + 1e-12):
        raise ValueError("radius exceeds the sampled half-ball")
    exclude = 2 * h if exclude is None else exclude
    a, n = ext_w.a, g.dim
    V = ext_w.values
    y = ext_w.y
    dy = np.diff(y)
    yc = 0.5 * (y[1:] + y[:-1])
    if n == 1:
        x = g.axis
        xc = 0.5 * (x[1:] + x[:-1])
        vx = 0.5 * (np.diff(V[1:], axis=1) + np.diff(V[:-1], axis=1)) / h
        vy = 0.5 * (np.diff(V, axis=0)[:, 1:] + np.diff(V, axis=0)[:, :-1]) / dy[:, None]
        Y, X = np.meshgrid(yc, xc, indexing="ij")
        grad2 = vx**2 + vy**2
        vol = dy[:, None] * h
    else:
        x = g.axis
        xc = 0.5 * (x[1:] + x[:-1])
        dv_x0 = np.diff(V, axis=1)
        dv_x1 = np.diff(V, axis=2)
        dv_y = np.diff(V, axis=0)

        def avg(arr, axes):
            for ax in axes:
                arr = 0.5 * (np.take(arr, range(arr.shape[ax] - 1), axis=ax) + np.take(arr, range(1, arr.shape[ax]), axis=ax))
            return arr

        g0 = avg(dv_x0, (0, 2)) / h
        g1 = avg(dv_x1, (0, 1)) / h
        gy = avg(dv_y, (1, 2)) / dy[:, None, None]
        grad2 = g0**2 + g1**2 + gy**2
        Y, X0, X1 = np.meshgrid(yc, xc, xc, indexing="ij")
        X = np.sqrt(X0**2 + X1**2)
        vol = dy[:, None, None] * h * h
    rho = np.sqrt(X**2 + Y**2)
    inside = rho <= r
    core = inside & (rho < exclude)
    dens = grad2 * Y**a / rho ** (n - 1 + a) * vol
    val = float(np.sum(dens[inside & ~core])) / r ** (1 - a)
    if return_excluded:
        return val, float(np.sum(dens[core])) / r ** (1 - a)
    return val


def monotonicity_profile(ext_w: ExtensionField, radii, *, alpha: float = 0.0) -> MonotonicityReport:
    vals, excl = [], []
    for r in radii:
        v, e = phi(ext_w, r, return_excluded=True)
        vals.append(v)
        excl.append(e)
    s = 1.0 - ext_w.s
    a = 1 - 2 * s
    eta = math.sqrt((1 + a) / (2 * ext_w.grid.dim))
    return MonotonicityReport(list(map(float, radii)), vals, alpha, aux_delta(alpha, s) if alpha > 0 else 0.0, eta, excl)


def convex_hull_check(w_bdry: WBoundary, r: float, alpha: float, delta: float) -> bool:
    """True when the origin lies outside ``co({w(., 0) >= r^{alpha+delta}} cap B_r)``."""
    g = w_bdry.values.grid
    pts = g.points().reshape(-1, g.dim)
    vals = w_bdry.values.values.reshape(-1)
    sel = (vals >= r ** (alpha + delta)) & (np.linalg.norm(pts, axis=1) <= r)
    return origin_outside_hull(pts[sel])


def origin_outside_hull(points: np.ndarray, atol: float = 1e-12) -> bool:
    """Whether the origin is outside the convex hull of ``points`` (shape ``(m, d)``)."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return True
    if points.ndim == 1:
        points = points[:, None]
    norms = np.linalg.norm(points, axis=1)
    if np.any(norms <= atol):
        return False
    if points.shape[1] == 1:
        x = points[:, 0]
        return bool(np.all(x > 0) or np.all(x < 0))
    ang = np.sort(np.arctan2(points[:, 1], points[:, 0]))
    gaps = np.diff(np.append(ang, ang[0] + 2 * math.pi))
    # a gap of exactly pi leaves the origin on a hull edge, which counts as inside
    return bool(gaps.max() > math.pi + atol)


# -- half-sphere eigenvalue ------------------------------------------------------


def _tanh_sinh(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-sinh nodes and weights on ``(0, pi)``, endpoint-free."""
    hstep = 6.0 / n
    k = np.arange(-n, n + 1) * hstep
    u = 0.5 * math.pi * np.sinh(k)
    x = np.tanh(u)
    w = hstep * 0.5 * math.pi * np.cosh(k) / np.cosh(u) ** 2
    keep = np.abs(x) < 1
    t = 0.5 * math.pi * (x[keep] + 1)
    return t, 0.5 * math.pi * w[keep]


def halfsphere_rayleigh(n: int, s: float, resolution: int = 128, *, perturbation=None) -> float:
    """Rayleigh quotient of ``(sqrt(x_n^2 + y^2) - x_n)^{1-s}`` on the unit upper half-sphere.

    Coordinates ``x_1 = cos phi``, ``x_2 = sin phi cos theta``, ``y = sin phi sin theta``
    with weight ``y^{2s-1}``. ``perturbation`` is an optional pair of callables
    ``(f, grad)`` in the angles, added to the test function; ``grad`` returns
    ``(f_phi, f_theta)``.
    """
    if n != 2:
        raise ValueError("only the two-dimensional half-sphere (n = 2) is implemented")
    if resolution < 64:
        raise ValueError("resolution must be at least 64 per angle")
    t, w = _tanh_sinh(resolution)
    P, T = np.meshgrid(t, t, indexing="ij")
    W = np.outer(w, w)
    sp, cp, st = np.sin(P), np.cos(P), np.sin(T)
    e = 1 - s
    half = np.sin(0.5 * T)
    H = (2 * sp * half**2) ** e
    H_phi = e * H * cp / sp
    H_theta = e * H * np.cos(0.5 * T) / half
    if perturbation is not None:
        f, grad = perturbation
        fp, ft = grad(P, T)
        H, H_phi, H_theta = H + f(P, T), H_phi + fp, H_theta + ft
    weight = (sp * st) ** (2 * s - 1) * sp
    num = np.sum(W * (H_phi**2 + H_theta**2 / sp**2) * weight)
    den = np.sum(W * H**2 * weight)
    return float(num / den)


def halfsphere_eigenvalue(n: int, s: float) -> float:
    return (1 - s) * (n - 1 + s)
