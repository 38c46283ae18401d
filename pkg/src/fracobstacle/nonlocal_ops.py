"""Quadrature for the fractional Laplacian and translation-invariant jump operators.

All operators share one discretization of ``I_K u(x) = int delta u(x, y) K(y) dy``
with ``delta u(x, y) = u(x + y) + u(x - y) - 2 u(x)``:

* near square ``|y|_inf < m h``: second-order Taylor model, the second
  derivatives taken from centered differences and integrated against
  ``y_i y_j K(y)``;
* lattice window ``m h <= |y|_inf <= 2L``: ``delta u / |y|^2`` is interpolated
  (multi)linearly between lattice offsets and integrated against
  ``|y|^2 K(y)``, which makes the rule exact for quadratics in 1-D;
* beyond the window: log-radial rays against the far field, plus one node
  carrying the mass past ``R_tail``.

Since every offset ``y_j`` carries a nonnegative weight ``W_j``, replacing
``K`` by its extremal envelope term by term gives discrete Pucci operators that
bracket every linear operator of the class exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import warnings
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.signal import correlate
from scipy.special import gamma as gamma_fn

from .grid import Field, Grid, _extended_values

Kernel = Callable[[np.ndarray], np.ndarray]


def normalization_constant(d: int, s: float) -> float:
    """``c_{d,s}`` making the Fourier symbol of the singular integral ``|xi|^{2s}``."""
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    return 4.0**s * gamma_fn(d / 2 + s) / (math.pi ** (d / 2) * abs(gamma_fn(-s)))


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureConfig:
    """Knobs of the shared quadrature.

    ``inner_radius`` is the half-width of the Taylor square in units of ``h``;
    ``tail_radius`` defaults to ``64 L``; ``tail_nodes`` counts log-radial
    nodes per ray and ``tail_angles`` the rays over a half circle (2-D).
    """

    inner_radius: int = 1
    tail_radius: float | None = None
    tail_nodes: int | None = None
    tail_angles: int = 32
    cell_order: int = 6
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.inner_radius < 1:
            raise ValueError("inner_radius must be at least one cell")
        if (self.tail_nodes or 8) % 8 or self.tail_angles % 8:
            raise ValueError("tail_nodes and tail_angles must be multiples of 8")

    def radial_nodes(self, dim: int) -> int:
        """Tail nodes per ray; 64 in 1-D and 24 per ray in 2-D unless set."""
        if self.tail_nodes is not None:
            return self.tail_nodes
        return 64 if dim == 1 else 24

    def tail_for(self, grid: Grid) -> float:
        R = 64.0 * grid.half_width if self.tail_radius is None else self.tail_radius
        if R < 2 * grid.half_width:
            raise ValueError("tail_radius must be at least 2 L")
        return R


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Symmetric jump kernel ``K(y)`` of order ``2 sigma``.

    ``evaluator`` maps points of shape ``(..., d)`` to positive values.
    """

    evaluator: Kernel
    sigma: float
    name: str = "kernel"

    def __call__(self, y):
        return self.evaluator(np.asarray(y, dtype=float))


def power_kernel(sigma: float, coef: float = 1.0, d: int | None = None) -> KernelSpec:
    """``coef / |y|^{d + 2 sigma}`` (``d`` taken from the evaluation points)."""

    def K(y):
        dim = y.shape[-1] if d is None else d
        r = np.sqrt(np.sum(y * y, axis=-1))
        return coef * r ** (-dim - 2.0 * sigma)

    return KernelSpec(K, sigma, f"power({sigma:g},{coef:g})")


def modulated_kernel(
    sigma: float, lam: float, Lam: float, *, phase: float = 0.0, freq: float = 1.0, aniso: float = 0.0
) -> KernelSpec:
    """Kernel oscillating inside the ``[lam, Lam]`` envelope.

    ``K(y) = |y|^{-d-2 sigma} (m + A cos(freq |y| + phase) + B cos(2 theta))``
    with the amplitudes chosen so the factor stays in ``[lam, Lam]``; the angular
    term only matters in 2-D and keeps ``K(y) = K(-y)``.
    """
    mid = 0.5 * (lam + Lam)
    span = 0.5 * (Lam - lam)
    aniso = float(np.clip(aniso, 0.0, 1.0))
    A, B = span * (1 - aniso), span * aniso

    def K(y):
        r = np.sqrt(np.sum(y * y, axis=-1))
        fac = mid + A * np.cos(freq * r + phase)
        if y.shape[-1] == 2 and B:
            th = np.arctan2(y[..., 1], y[..., 0])
            fac = fac + B * np.cos(2 * th)
        return r ** (-y.shape[-1] - 2.0 * sigma) * fac

    return KernelSpec(K, sigma, f"modulated({sigma:g},{phase:g},{freq:g})")


I_VARIANTS = ("zero", "linear", "pucci_sup", "g_integrand")


@dataclass(frozen=True)
class OperatorParams:
    """Coefficients of ``u_t + (-Delta)^s u - b.grad u - I u - r u``."""

    s: float
    sigma: float
    lam: float = 1.0
    Lam: float = 1.0
    b: tuple[float, ...] = (0.0,)
    r: float = 0.0
    i_variant: str = "zero"
    kernels: tuple[KernelSpec, ...] = ()
    G: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    G_lipschitz: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.s < 1:
            raise ValueError(f"s = {self.s} must lie in (1/2, 1)")
        if not 0 < self.sigma < self.s:
            raise ValueError(f"assumption (iv) requires s > sigma > 0; got s={self.s}, sigma={self.sigma}")
        if not 0 < self.lam <= self.Lam:
            raise ValueError("ellipticity bounds need 0 < lam <= Lam")
        if self.i_variant not in I_VARIANTS:
            raise ValueError(f"unknown I variant {self.i_variant!r}")
        if self.i_variant == "linear" and len(self.kernels) != 1:
            raise ValueError("linear variant takes exactly one kernel")
        if self.i_variant == "pucci_sup" and not self.kernels:
            raise ValueError("pucci_sup variant needs a kernel family")
        if self.i_variant == "g_integrand":
            if self.G is None:
                raise ValueError("g_integrand variant needs G")
            if self.sigma >= 0.5:
                raise ValueError("g_integrand requires sigma < 1/2")
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))

    @property
    def a(self) -> float:
        return 1.0 - 2.0 * self.s

    @property
    def gamma(self) -> float:
        return self.s - max(self.sigma, 0.5)

    def drift(self, d: int) -> np.ndarray:
        b = np.zeros(d)
        b[: len(self.b)] = self.b[:d]
        return b


# -- stencil construction --------------------------------------------------------

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl01(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(order)
        _GL_CACHE[order] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[order]


def _radial_rule(p_local: float, levels: int = 48, order: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Rule on ``[0, 1]`` for integrands behaving like ``t^p_local`` at 0.

    Geometric panels ``[2^-(k+1), 2^-k]`` plus one node at the innermost point
    carrying the analytic power-law remainder.
    """
    t, w = _gl01(order)
    lo = 2.0 ** -np.arange(1, levels + 1)
    nodes = (lo[:, None] * (1 + t[None, :])).ravel()
    weights = (lo[:, None] * w[None, :]).ravel()
    r_min = 2.0**-levels
    nodes = np.append(nodes, r_min)
    weights = np.append(weights, r_min / (p_local + 1.0))
    return nodes, weights


def _angle_rule(n: int, start: float, stop: float) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss rule with panels cut at multiples of ``pi/4``."""
    t, w = _gl01(8)
    edges = np.arange(start, stop + 1e-12, math.pi / 4)
    per = max(n // (len(edges) - 1) // 8, 1)
    th, wt = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sub = np.linspace(a, b, per + 1)
        for c, e in zip(sub[:-1], sub[1:]):
            th.append(c + (e - c) * t)
            wt.append((e - c) * w)
    return np.concatenate(th), np.concatenate(wt)


def _square_rays(theta: np.ndarray) -> np.ndarray:
    """Distance from the origin to the unit square boundary along angle ``theta``."""
    return 1.0 / np.maximum(np.abs(np.cos(theta)), np.abs(np.sin(theta)))


@dataclass
class Stencil:
    """Lattice weights ``W`` on offsets ``|j|_inf <= J`` plus far-field tail nodes.

    ``I[u](x) = sum_j W_j delta u(x, y_j) + sum_q tail_w[q] delta u(x, Y_q)``
    where the sums over ``j`` run over all offsets and the tail nodes cover a
    half-space of directions (``delta u`` is even in ``y``).
    """

    grid: Grid
    J: int
    W: np.ndarray
    tail_pts: np.ndarray
    tail_w: np.ndarray
    sigma: float
    tail_end: np.ndarray = field(default=None, repr=False)
    _far_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.tail_end is None:
            self.tail_end = np.zeros(len(self.tail_w), dtype=bool)

    @property
    def window_mass(self) -> float:
        return float(self.W.sum())

    @property
    def tail_mass(self) -> float:
        return float(self.tail_w.sum())

    @property
    def diagonal(self) -> float:
        """Magnitude of the coefficient of ``u(x)`` in ``I[u](x)``."""
        return 2.0 * (self.window_mass + self.tail_mass)

    # The far-field pieces are fixed for a given far-field rule; cache them.
    def _far_terms(self, far) -> tuple[np.ndarray, np.ndarray]:
        key = id(far)
        hit = self._far_cache.get(key)
        if hit is not None and hit[0] is far:
            return hit[1], hit[2]
        g = self.grid
        if far is None or not len(self.tail_w):
            tail_sum = np.zeros(g.shape + (len(self.tail_w),))
        else:
            tail_sum = _tail_values(g, self.tail_pts, far)
        zero = Field(g, np.zeros(g.shape), far)
        far_ext = _extended_values(zero, self.J)
        far_conv = 2.0 * self._correlate(far_ext)
        if len(self._far_cache) >= 8:
            self._far_cache.pop(next(iter(self._far_cache)))
        self._far_cache[key] = (far, tail_sum, far_conv)
        return tail_sum, far_conv

    def _correlate(self, ext: np.ndarray) -> np.ndarray:
        return correlate(ext, self.W, mode="valid", method="fft")

    def far_vector(self, far) -> np.ndarray:
        """Affine part of ``I[u]`` coming from values outside the box."""
        tail_sum, far_conv = self._far_terms(far)
        return far_conv + tail_sum @ self.tail_w

    def apply_linear(self, values: np.ndarray) -> np.ndarray:
        """Linear part of ``I[u]`` (zero far field)."""
        ext = np.pad(values, self.J)
        return 2.0 * self._correlate(ext) - self.diagonal * values

    def apply(self, u: Field) -> np.ndarray:
        if not np.all(np.isfinite(u.values)):
            raise ValueError("field has non-finite values")
        return self.apply_linear(u.values) + self.far_vector(u.far)

    def apply_pointwise(self, u: Field, g: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``sum_j W_j g(delta u(x, y_j))`` including tail nodes."""
        if not np.all(np.isfinite(u.values)):
            raise ValueError("field has non-finite values")
        ext = _extended_values(u, self.J)
        n, J, d = self.grid.n, self.J, self.grid.dim
        out = np.zeros(self.grid.shape)
        for off in _half_offsets(J, d):
            w = self.W[tuple(J + o for o in off)]
            if w == 0.0:
                continue
            plus = ext[tuple(slice(J + o, J + o + n) for o in off)]
            minus = ext[tuple(slice(J - o, J - o + n) for o in off)]
            out += 2.0 * w * g(plus + minus - 2.0 * u.values)
        tail_sum, _ = self._far_terms(u.far)
        if len(self.tail_w):
            out += g(tail_sum - 2.0 * u.values[..., None]) @ self.tail_w
        return out

    def matrix(self) -> np.ndarray:
        """Dense matrix of :meth:`apply_linear` (1-D only)."""
        if self.grid.dim != 1:
            raise ValueError("dense matrix only for 1-D grids")
        from scipy.linalg import toeplitz

        col = 2.0 * self.W[self.J : self.J + self.grid.n].copy()
        col[0] = -self.diagonal
        return toeplitz(col)

    def tail_remainder(self, u: Field) -> float:
        """Change of the mass node's contribution when its far values move from ``R_tail`` to ``2 R_tail``.

        The last node of every ray treats ``delta u`` as frozen beyond ``R_tail``;
        this measures how wrong that is for the attached far field.
        """
        if u.far is None or not len(self.tail_w):
            return 0.0
        idx = np.flatnonzero(self.tail_end)
        pts = self.grid.points()[..., None, :]
        Y = self.tail_pts[idx]
        near = u.far(pts + Y) + u.far(pts - Y)
        far = u.far(pts + 2 * Y) + u.far(pts - 2 * Y)
        return float(np.max(np.abs((far - near) @ self.tail_w[idx])))

    def tail_bound(self, u: Field) -> float:
        """Crude bound ``Lam osc(u) R_tail^{-2 sigma}`` on the neglected far tail."""
        osc = float(np.ptp(u.values)) if u.values.size else 0.0
        R = np.max(np.linalg.norm(self.tail_pts, axis=-1)) if len(self.tail_w) else 1.0
        return osc * R ** (-2.0 * self.sigma)


def _half_offsets(J: int, d: int):
    if d == 1:
        for j in range(1, J + 1):
            yield (j,)
        return
    for j0 in range(0, J + 1):
        for j1 in range(-J, J + 1):
            if j0 == 0 and j1 <= 0:
                continue
            yield (j0, j1)


def build_stencil(
    grid: Grid,
    kernel: Kernel,
    sigma: float,
    quad: QuadratureConfig = QuadratureConfig(),
    *,
    near_power: float | None = None,
    envelope: tuple[float, float] | None = None,
) -> Stencil:
    """Assemble lattice and tail weights for ``I_K``.

    ``near_power`` is the exponent ``p`` with ``t^2 K(t) t^{d-1} ~ t^p`` at the
    origin (default ``1 - 2 sigma``); ``sigma`` also fixes the power-law mass
    placed past ``R_tail``. With ``envelope = (lam, Lam)`` every quadrature node
    is checked against ``lam |y|^{-d-2 sigma} <= K <= Lam |y|^{-d-2 sigma}``.
    """
    d, h, J, m = grid.dim, grid.h, grid.n - 1, quad.inner_radius
    if m >= J:
        raise ValueError("inner_radius exceeds the lattice window")
    p_near = 1.0 - 2.0 * sigma if near_power is None else near_power

    def K(y):
        vals = np.asarray(kernel(y), dtype=float)
        if envelope is not None:
            _check_envelope(y, vals, sigma, *envelope)
        return vals

    W = np.zeros((2 * J + 1,) * d)

    # lattice cells outside the Taylor square
    t, w = _gl01(quad.cell_order)
    if d == 1:
        k = np.arange(m, J)
        for sign in (1, -1):
            y = sign * (k[:, None] + t[None, :]) * h
            base = w[None, :] * h * y**2 * K(y[..., None])
            left = base * (1 - t) / (k[:, None] * h) ** 2
            right = base * t / ((k[:, None] + 1) * h) ** 2
            np.add.at(W, J + sign * k, left.sum(axis=1))
            np.add.at(W, J + sign * (k + 1), right.sum(axis=1))
    else:
        idx = np.arange(-J, J)
        k0, k1 = np.meshgrid(idx, idx, indexing="ij")
        outside = ~((k0 >= -m) & (k0 < m) & (k1 >= -m) & (k1 < m))
        k0, k1 = k0[outside], k1[outside]
        t0, t1 = np.meshgrid(t, t, indexing="ij")
        t0, t1 = t0.ravel(), t1.ravel()
        wt = np.outer(w, w).ravel()
        for chunk in np.array_split(np.arange(len(k0)), max(1, len(k0) // 2048)):
            c0, c1 = k0[chunk, None], k1[chunk, None]
            y = np.stack([(c0 + t0) * h, (c1 + t1) * h], axis=-1)
            base = wt * h * h * np.sum(y * y, axis=-1) * K(y)
            for a in (0, 1):
                for b in (0, 1):
                    phi = (t0 if a else 1 - t0) * (t1 if b else 1 - t1)
                    j0, j1 = c0[:, 0] + a, c1[:, 0] + b
                    r2 = (j0 * j0 + j1 * j1) * h * h
                    np.add.at(W, (J + j0, J + j1), (base * phi).sum(axis=1) / r2)

    # Taylor square: int y_i y_j K over |y|_inf < m h
    rt, rw = _radial_rule(p_near)
    R = m * h
    if d == 1:
        Q = 0.0
        for sign in (1, -1):
            y = sign * rt * R
            Q += np.sum(rw * R * y**2 * K(y[:, None]))
        W[J + 1] += Q / (2 * h * h)
        W[J - 1] += Q / (2 * h * h)
    else:
        th, thw = _angle_rule(64, 0.0, 2 * math.pi)
        rho = R * _square_rays(th)
        r = rho[:, None] * rt[None, :]
        y = np.stack([r * np.cos(th)[:, None], r * np.sin(th)[:, None]], axis=-1)
        jac = (thw * rho)[:, None] * rw[None, :] * r
        Kv = K(y)
        Qm = np.array(
            [[np.sum(jac * Kv * y[..., i] * y[..., j]) for j in range(2)] for i in range(2)]
        )
        c = J
        W[c + 1, c] += Qm[0, 0] / (2 * h * h)
        W[c - 1, c] += Qm[0, 0] / (2 * h * h)
        W[c, c + 1] += Qm[1, 1] / (2 * h * h)
        W[c, c - 1] += Qm[1, 1] / (2 * h * h)
        cross = Qm[0, 1] / (4 * h * h)
        W[c + 1, c + 1] += cross
        W[c - 1, c - 1] += cross
        W[c + 1, c - 1] -= cross
        W[c - 1, c + 1] -= cross

    W = 0.5 * (W + W[(slice(None, None, -1),) * d])
    W[(J,) * d] = 0.0

    tail_pts, tail_w, tail_end = _tail_rule(grid, K, sigma, quad)
    return Stencil(grid, J, W, tail_pts, tail_w, sigma, tail_end)


@lru_cache(maxsize=32)
def _tail_geometry(grid: Grid, quad: QuadratureConfig):
    """Kernel-free tail nodes: points over half the directions, measure, mass-node mask.

    The measure of a mass node is ``|Y|^d`` and still needs the factor ``1/(2 sigma)``.
    """
    d, R1 = grid.dim, (grid.n - 1) * grid.h
    R_tail = quad.tail_for(grid)
    if R_tail <= R1:
        return np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=bool)
    t, w = _gl01(8)
    panels = quad.radial_nodes(d) // 8
    if d == 1:
        rays = [(0.0, 1.0, R1)]
    else:
        th, thw = _angle_rule(quad.tail_angles, 0.0, math.pi)
        rays = zip(th, thw, R1 * _square_rays(th))
    pts, meas, end = [], [], []
    for angle, aw, r0 in rays:
        edges = np.linspace(math.log(r0), math.log(R_tail), panels + 1)
        lr = (edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * t).ravel()
        lw = ((edges[1:] - edges[:-1])[:, None] * w).ravel()
        r = np.append(np.exp(lr), R_tail)
        if d == 1:
            pts.append(r[:, None])
        else:
            pts.append(np.stack([r * math.cos(angle), r * math.sin(angle)], axis=-1))
        meas.append(aw * r**d * np.append(lw, 1.0))
        end.append(np.arange(len(r)) == len(r) - 1)
    out = np.concatenate(pts), np.concatenate(meas), np.concatenate(end)
    for arr in out:
        arr.setflags(write=False)
    return out


def _tail_rule(grid: Grid, K, sigma: float, quad: QuadratureConfig):
    """Tail nodes and weights; the factor 2 in the weights accounts for ``-Y`` (``K`` is even)."""
    pts, meas, end = _tail_geometry(grid, quad)
    if not len(meas):
        return pts, meas, end
    weights = 2.0 * meas * np.where(end, 1.0 / (2.0 * sigma), 1.0) * K(pts)
    return pts, weights, end


_TAIL_VALUES: dict = {}


def _tail_values(grid: Grid, pts: np.ndarray, far) -> np.ndarray:
    """``far(x + Y) + far(x - Y)`` for every node ``x`` and tail node ``Y`` (shared by all kernels)."""
    key = (id(far), id(pts))
    hit = _TAIL_VALUES.get(key)
    if hit is not None and hit[0] is far and hit[1] is pts:
        return hit[2]
    x = grid.points()[..., None, :]
    vals = far(x + pts) + far(x - pts)
    if len(_TAIL_VALUES) >= 16:
        _TAIL_VALUES.pop(next(iter(_TAIL_VALUES)))
    _TAIL_VALUES[key] = (far, pts, vals)
    return vals


def _check_envelope(y, vals, sigma, lam, Lam):
    y = np.asarray(y, dtype=float)
    r = np.sqrt(np.sum(y * y, axis=-1))
    base = r ** (-y.shape[-1] - 2.0 * sigma)
    bad = (vals < lam * base * (1 - 1e-12)) | (vals > Lam * base * (1 + 1e-12))
    if np.any(bad):
        i = np.argwhere(bad)[0]
        pt = y[tuple(i)]
        raise ValueError(
            f"kernel leaves the [lam, Lam] envelope at quadrature node y = {pt.tolist()}: "
            f"K = {vals[tuple(i)]:.6g}, bounds [{lam * base[tuple(i)]:.6g}, {Lam * base[tuple(i)]:.6g}]"
        )


# -- operators -------------------------------------------------------------------

_STENCILS: dict = {}


def _cached_stencil(grid: Grid, kernel, sigma: float, quad: QuadratureConfig, **kw) -> Stencil:
    key = (grid, id(kernel), sigma, quad, tuple(sorted(kw.items())))
    hit = _STENCILS.get(key)
    if hit is not None and hit[0] is kernel:
        return hit[1]
    st = build_stencil(grid, kernel, sigma, quad, **kw)
    if len(_STENCILS) >= 32:
        _STENCILS.pop(next(iter(_STENCILS)))
    _STENCILS[key] = (kernel, st)
    return st


_POWER: dict[float, KernelSpec] = {}


def _unit_power(sigma: float) -> KernelSpec:
    if sigma not in _POWER:
        _POWER[sigma] = power_kernel(sigma)
    return _POWER[sigma]


def base_stencil(grid: Grid, sigma: float, quad: QuadratureConfig = QuadratureConfig()) -> Stencil:
    """Stencil of ``int delta u |y|^{-d-2 sigma} dy``."""
    return _cached_stencil(grid, _unit_power(sigma), sigma, quad)


def frac_laplacian_stencil(grid: Grid, s: float, quad: QuadratureConfig = QuadratureConfig()) -> tuple[Stencil, float]:
    """Base stencil of order ``s`` and the factor ``-c_{d,s}/2`` turning it into ``(-Delta)^s``."""
    return base_stencil(grid, s, quad), -0.5 * normalization_constant(grid.dim, s)


def second_difference(u: Field, i: Sequence[int] | int, offset: Sequence[int] | int) -> float:
    """``u(x_i + y_j) + u(x_i - y_j) - 2 u(x_i)`` with ``y_j = offset * h``."""
    g = u.grid
    i = np.atleast_1d(np.asarray(i, dtype=int))
    j = np.atleast_1d(np.asarray(offset, dtype=int))
    if i.size != g.dim or j.size != g.dim:
        raise ValueError("index and offset need one entry per dimension")

    def value(idx):
        if np.all((idx >= 0) & (idx < g.n)):
            return float(u.values[tuple(idx)])
        return float(u.far_values((-g.half_width + idx * g.h)[None, :])[0])

    return value(i + j) + value(i - j) - 2.0 * value(i)


class QuadratureWarning(UserWarning):
    """Quadrature tolerance unmet at the requested truncation."""


def frac_laplacian(u: Field, s: float | OperatorParams, quad: QuadratureConfig = QuadratureConfig()) -> Field:
    """``(-Delta)^s u`` with the symbol ``|xi|^{2s}`` normalization."""
    s = s.s if isinstance(s, OperatorParams) else float(s)
    st, factor = frac_laplacian_stencil(u.grid, s, quad)
    out = factor * st.apply(u)
    remainder = abs(factor) * st.tail_remainder(u)
    if remainder > quad.tolerance * max(float(np.max(np.abs(out))), 1e-12):
        warnings.warn(
            f"far-tail remainder {remainder:.3g} exceeds the quadrature tolerance; increase tail_radius",
            QuadratureWarning,
            stacklevel=2,
        )
    return Field(u.grid, out)


def kernel_operator(
    u: Field,
    kernel: KernelSpec,
    quad: QuadratureConfig = QuadratureConfig(),
    *,
    envelope: tuple[float, float] | None = None,
) -> Field:
    """``int delta u(x, y) K(y) dy``; ``envelope=(lam, Lam)`` checks every quadrature node."""
    st = _cached_stencil(u.grid, kernel, kernel.sigma, quad, envelope=envelope)
    return Field(u.grid, st.apply(u))


def pucci(u: Field, params: OperatorParams, sign: str = "+", quad: QuadratureConfig = QuadratureConfig()) -> Field:
    """Extremal operators ``M^+`` (``sign='+'``) and ``M^-``."""
    if sign not in ("+", "-"):
        raise ValueError("sign must be '+' or '-'")
    hi, lo = (params.Lam, params.lam) if sign == "+" else (params.lam, params.Lam)
    st = base_stencil(u.grid, params.sigma, quad)
    return Field(u.grid, st.apply_pointwise(u, lambda d: hi * np.maximum(d, 0.0) - lo * np.maximum(-d, 0.0)))


def i_apply(u: Field, params: OperatorParams, quad: QuadratureConfig = QuadratureConfig()) -> Field:
    """The nonlocal lower-order operator selected by ``params.i_variant``."""
    env = (params.lam, params.Lam)
    v = params.i_variant
    if v == "zero":
        return Field(u.grid, np.zeros(u.grid.shape))
    if v == "linear":
        return kernel_operator(u, params.kernels[0], quad, envelope=env)
    if v == "pucci_sup":
        outs = [kernel_operator(u, k, quad, envelope=env).values for k in params.kernels]
        return Field(u.grid, np.max(outs, axis=0))
    return Field(u.grid, g_integrand(u, params, quad))


def g_integrand(u: Field, params: OperatorParams, quad: QuadratureConfig = QuadratureConfig()) -> np.ndarray:
    """``int G(u(x+y) - u(x)) |y|^{-d-2 sigma} dy`` for ``sigma < 1/2``.

    One-sided differences are integrated with plain (multi)linear hat weights;
    cells touching the origin use a radial rule for the ``|y|^{-2 sigma}``
    behaviour of the hat functions there.
    """
    if params.sigma >= 0.5:
        raise ValueError("the G-integral needs sigma < 1/2")
    st = _hat_stencil(u.grid, params.sigma, quad)
    G = params.G
    ext = _extended_values(u, st.J)
    n, J = u.grid.n, st.J
    out = np.zeros(u.grid.shape)
    it = np.ndindex(*st.W.shape)
    for idx in it:
        w = st.W[idx]
        if w == 0.0:
            continue
        off = tuple(k - J for k in idx)
        shifted = ext[tuple(slice(J + o, J + o + n) for o in off)]
        out += w * G(shifted - u.values)
    if len(st.tail_w):
        pts = u.grid.points()[..., None, :]
        for sgn in (1.0, -1.0):
            far = u.far_values(pts + sgn * st.tail_pts)
            out += G(far - u.values[..., None]) @ (0.5 * st.tail_w)
    return out


def _hat_stencil(grid: Grid, sigma: float, quad: QuadratureConfig) -> Stencil:
    key = ("hat", grid, sigma, quad)
    hit = _STENCILS.get(key)
    if hit is not None:
        return hit[1]
    d, h, J = grid.dim, grid.h, grid.n - 1
    K = _unit_power(sigma)
    W = np.zeros((2 * J + 1,) * d)
    t, w = _gl01(quad.cell_order)
    rt, rw = _radial_rule(-2.0 * sigma)
    if d == 1:
        k = np.arange(1, J)
        for sign in (1, -1):
            y = sign * (k[:, None] + t[None, :]) * h
            base = w[None, :] * h * K(y[..., None])
            np.add.at(W, J + sign * k, (base * (1 - t)).sum(axis=1))
            np.add.at(W, J + sign * (k + 1), (base * t).sum(axis=1))
            # origin cell: only the hat at +-h matters since the integrand vanishes at 0
            W[J + sign] += np.sum(rw * h * rt * K((rt * h)[:, None]))
    else:
        idx = np.arange(-J, J)
        k0, k1 = np.meshgrid(idx, idx, indexing="ij")
        origin = (k0 >= -1) & (k0 < 1) & (k1 >= -1) & (k1 < 1)
        t0, t1 = (a.ravel() for a in np.meshgrid(t, t, indexing="ij"))
        wt = np.outer(w, w).ravel()
        c0, c1 = k0[~origin][:, None], k1[~origin][:, None]
        for chunk in np.array_split(np.arange(len(c0)), max(1, len(c0) // 2048)):
            a0, a1 = c0[chunk], c1[chunk]
            y = np.stack([(a0 + t0) * h, (a1 + t1) * h], axis=-1)
            base = wt * h * h * K(y)
            for a in (0, 1):
                for b in (0, 1):
                    phi = (t0 if a else 1 - t0) * (t1 if b else 1 - t1)
                    np.add.at(W, (J + a0[:, 0] + a, J + a1[:, 0] + b), (base * phi).sum(axis=1))
        # the four origin cells, polar coordinates centred at the origin corner
        th, thw = _angle_rule(64, 0.0, 2 * math.pi)
        rho = h * _square_rays(th)
        r = rho[:, None] * rt[None, :]
        y0, y1 = r * np.cos(th)[:, None], r * np.sin(th)[:, None]
        jac = (thw * rho)[:, None] * rw[None, :] * r * K(np.stack([y0, y1], axis=-1))
        u0, u1 = np.abs(y0) / h, np.abs(y1) / h
        s0, s1 = np.where(y0 >= 0, 1, -1), np.where(y1 >= 0, 1, -1)
        np.add.at(W, (J + s0, np.full_like(s1, J)), jac * u0 * (1 - u1))
        np.add.at(W, (np.full_like(s0, J), J + s1), jac * (1 - u0) * u1)
        np.add.at(W, (J + s0, J + s1), jac * u0 * u1)
    W[(J,) * d] = 0.0
    tail_pts, tail_w, tail_end = _tail_rule(grid, K, sigma, quad)
    st = Stencil(grid, J, W, tail_pts, tail_w, sigma, tail_end)
    _STENCILS[key] = (None, st)
    return st


def gradient(u: Field, *, upwind: Sequence[float] | None = None) -> np.ndarray:
    """Finite-difference gradient, shape ``(d, *grid.shape)``.

    Centered by default (exact on affine data); with ``upwind`` set to the drift
    vector the one-sided difference in the direction of ``b`` is used.
    """
    g = u.grid
    ext = _extended_values(u, 1)
    n = g.n
    out = np.empty((g.dim,) + g.shape)
    for k in range(g.dim):
        def sl(shift):
            return ext[tuple(slice(1 + (shift if a == k else 0), 1 + (shift if a == k else 0) + n) for a in range(g.dim))]

        fwd, mid, bwd = sl(1), sl(0), sl(-1)
        if upwind is None or upwind[k] == 0:
            out[k] = (fwd - bwd) / (2 * g.h)
        elif upwind[k] > 0:
            out[k] = (fwd - mid) / g.h
        else:
            out[k] = (mid - bwd) / g.h
    return out


def lower_order_apply(
    u: Field, params: OperatorParams, quad: QuadratureConfig = QuadratureConfig(), *, upwind: bool = False
) -> Field:
    """``I u + b . grad u + r u``."""
    b = params.drift(u.grid.dim)
    out = i_apply(u, params, quad).values + params.r * u.values
    if np.any(b):
        grad = gradient(u, upwind=b if upwind else None)
        out = out + np.tensordot(b, grad, axes=1)
    return Field(u.grid, out)


@dataclass
class SandwichReport:
    """Worst signed violations of ``M^- (u - v) <= I u - I v <= M^+ (u - v)``."""

    lower_violation: float
    upper_violation: float
    lower: np.ndarray = field(repr=False)
    middle: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)

    @property
    def violation(self) -> float:
        return max(self.lower_violation, self.upper_violation)


def sandwich_check(u: Field, v: Field, params: OperatorParams, quad: QuadratureConfig = QuadratureConfig()) -> SandwichReport:
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    diff = u - v
    lo = pucci(diff, params, "-", quad).values
    hi = pucci(diff, params, "+", quad).values
    mid = i_apply(u, params, quad).values - i_apply(v, params, quad).values
    return SandwichReport(float(np.max(lo - mid)), float(np.max(mid - hi)), lo, mid, hi)


def tail_report(u: Field, params: OperatorParams, quad: QuadratureConfig = QuadratureConfig()) -> dict:
    """Far-tail diagnostics for the two kernel orders.

    ``remainder`` is the measured change of the far-field node contribution
    (:meth:`Stencil.tail_remainder`) and ``bound`` the a priori
    ``Lam osc(u) R_tail^{-2 sigma}``; both carry the operator's scale.
    """
    out = {}
    for name, order, scale in (("frac_laplacian", params.s, 0.5 * normalization_constant(u.grid.dim, params.s)),
                               ("lower_order", params.sigma, params.Lam)):
        st = base_stencil(u.grid, order, quad)
        out[name] = {"remainder": scale * st.tail_remainder(u), "bound": scale * st.tail_bound(u)}
    return out
