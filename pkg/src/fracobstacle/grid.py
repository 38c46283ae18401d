"""Truncated computational domain, obstacles, and the far-field rule.

Every nonlocal operator in the package reads values outside the box
``[-L, L]^d`` through the obstacle's closed-form evaluator: the solution is
taken to coincide with the obstacle away from the box.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

FarField = Callable[[np.ndarray], np.ndarray]

MIN_NODES = 17


@dataclass(frozen=True)
class Grid:
    """Uniform lattice on ``[-L, L]^dim`` with ``n`` nodes per axis.

    ``n`` is odd so that the origin is always a node.
    """

    dim: int
    half_width: float
    n: int

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / (self.n - 1)

    @cached_property
    def axis(self) -> np.ndarray:
        i = np.arange(self.n)
        return -self.half_width + i * self.h

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def center_index(self) -> tuple[int, ...]:
        return ((self.n - 1) // 2,) * self.dim

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``."""
        axes = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(axes, axis=-1)

    def lattice_points(self, pad: int) -> np.ndarray:
        """Coordinates of the lattice extended by ``pad`` nodes on every side."""
        i = np.arange(-pad, self.n + pad)
        ax = -self.half_width + i * self.h
        axes = np.meshgrid(*([ax] * self.dim), indexing="ij")
        return np.stack(axes, axis=-1)

    def radius(self, center: Sequence[int] | None = None) -> np.ndarray:
        """Euclidean distance of every node to node ``center`` (default origin)."""
        pts = self.points()
        if center is not None:
            pts = pts - pts[tuple(center)]
        return np.sqrt(np.sum(pts**2, axis=-1))


def build_grid(dim: int, half_width: float, n: int, *, min_nodes: int = MIN_NODES) -> Grid:
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if not half_width > 0:
        raise ValueError("half_width must be positive")
    if n % 2 == 0:
        raise ValueError(f"n must be odd so the origin is a node, got {n}")
    if n < min_nodes:
        raise ValueError(f"n must be at least {min_nodes}, got {n}")
    return Grid(dim, float(half_width), int(n))


# -- mollifier -----------------------------------------------------------------


def _bump_profile(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(1.0 / (r2[inside] - 1.0))
    return out


def _mollifier_mass(dim: int) -> float:
    if dim == 1:
        val, _ = integrate.quad(lambda x: math.exp(1.0 / (x * x - 1.0)), -1, 1)
        return val
    val, _ = integrate.quad(lambda r: 2 * math.pi * r * math.exp(1.0 / (r * r - 1.0)), 0, 1)
    return val


MOLLIFIER_MASS = {1: _mollifier_mass(1), 2: _mollifier_mass(2)}


def mollifier(x: np.ndarray, eps: float, dim: int) -> np.ndarray:
    """Standard mollifier ``eta_eps`` evaluated at points ``x`` of shape ``(..., dim)``."""
    r2 = np.sum(np.asarray(x) ** 2, axis=-1) / eps**2
    return _bump_profile(r2) / (MOLLIFIER_MASS[dim] * eps**dim)


# Gauss-Legendre nodes for the smoothed put payoff.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)


def _smoothed_put(x: np.ndarray, strike: float, delta: float) -> np.ndarray:
    """``eta_delta * max(strike - e^x, 0)`` in one dimension, by quadrature.

    The payoff is smooth on ``z > x - log(strike)``, so the quadrature runs only
    over that part of the mollifier support.
    """
    x = np.asarray(x, dtype=float)
    kink = math.log(strike)
    lo = np.clip(x - kink, -delta, delta)
    hi = np.full_like(x, delta)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    z = mid[..., None] + half[..., None] * _GL_X
    # x - z <= log(strike) on the integration range; the clip only guards empty ranges
    payoff = strike - np.exp(np.minimum(x[..., None] - z, kink))
    eta = mollifier(z[..., None], delta, 1)
    return np.sum(_GL_W * eta * payoff, axis=-1) * half


# -- obstacles -----------------------------------------------------------------

OBSTACLE_KINDS = ("bump", "gaussian", "mollified_put", "tabulated")


@dataclass(frozen=True)
class ObstacleSpec:
    """Closed-form obstacle ``psi >= 0``.

    bump:          ``A * max(0, 1 - |x - c|^2 / rho^2)^3`` with ``rho = scale``.
    gaussian:      ``A * exp(-|x - c|^2 / (2 scale^2))``.
    mollified_put: ``A * eta_delta * max(strike - e^x, 0)`` (1-D only);
                   ``delta`` defaults to ``4 h`` once a grid is known.
    tabulated:     node values on ``table_grid``; linear interpolation inside
                   the box and zero outside.

    ``shift`` is added to every kind (used for ordered obstacle pairs).
    """

    kind: str
    amplitude: float = 1.0
    scale: float = 1.0
    center: tuple[float, ...] = ()
    strike: float = 1.0
    delta: float | None = None
    shift: float = 0.0
    table: np.ndarray | None = field(default=None, compare=False)
    table_grid: Grid | None = None

    def __post_init__(self):
        if self.kind not in OBSTACLE_KINDS:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if self.kind == "tabulated" and (self.table is None or self.table_grid is None):
            raise ValueError("tabulated obstacle needs table and table_grid")
        if self.kind == "tabulated" and np.min(self.table) < 0:
            raise ValueError("tabulated obstacle must be nonnegative")
        if self.amplitude < 0 or self.shift < 0:
            raise ValueError("obstacle amplitude and shift must be nonnegative")

    def resolved(self, grid: Grid) -> "ObstacleSpec":
        """Fix grid-dependent parameters (the put smoothing width)."""
        if self.kind == "mollified_put":
            if grid.dim != 1:
                raise ValueError("mollified_put is one-dimensional")
            if self.delta is None:
                return replace(self, delta=4.0 * grid.h)
        return self

    def _offset(self, x: np.ndarray) -> np.ndarray:
        if not self.center:
            return x
        return x - np.asarray(self.center, dtype=float)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points of shape ``(..., dim)``."""
        x = np.asarray(x, dtype=float)
        return self._profile(x) + self.shift

    def _profile(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "bump":
            r2 = np.sum(self._offset(x) ** 2, axis=-1) / self.scale**2
            return self.amplitude * np.maximum(0.0, 1.0 - r2) ** 3
        if self.kind == "gaussian":
            r2 = np.sum(self._offset(x) ** 2, axis=-1) / self.scale**2
            return self.amplitude * np.exp(-0.5 * r2)
        if self.kind == "mollified_put":
            if self.delta is None:
                raise ValueError("mollified_put needs delta; call resolved(grid) first")
            return self.amplitude * _smoothed_put(x[..., 0], self.strike, self.delta)
        return self._tabulated(x)

    def _tabulated(self, x: np.ndarray) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator

        g = self.table_grid
        interp = RegularGridInterpolator(
            (g.axis,) * g.dim, self.table, bounds_error=False, fill_value=0.0
        )
        return interp(x.reshape(-1, g.dim)).reshape(x.shape[:-1])


# -- fields --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Field:
    """Node values on a grid plus the rule giving values outside the box."""

    grid: Grid
    values: np.ndarray
    far: FarField | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values have shape {vals.shape}, grid expects {self.grid.shape}")
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values, self.far)

    def far_values(self, points: np.ndarray) -> np.ndarray:
        if self.far is None:
            return np.zeros(np.shape(points)[:-1])
        return self.far(points)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, c):
        c = float(c)
        far = None if self.far is None else (lambda p, f=self.far: c * f(p))
        return Field(self.grid, self.values * c, far)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def _combine(self, other, op) -> "Field":
        if isinstance(other, Field):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            a, b = self, other
            far = lambda p: op(a.far_values(p), b.far_values(p))  # noqa: E731
            return Field(self.grid, op(self.values, other.values), far)
        c = float(other)
        far = lambda p, f=self: op(f.far_values(p), c)  # noqa: E731
        return Field(self.grid, op(self.values, c), far)


@dataclass
class Trajectory:
    """Snapshots ``(t_k, u(t_k))`` on one grid with uniform spacing ``dt``."""

    times: list[float]
    fields: list[Field]
    dt: float

    def __post_init__(self):
        if len(self.times) != len(self.fields):
            raise ValueError("times and fields differ in length")
        if self.times and self.times[0] != 0.0:
            raise ValueError("trajectory must start at t = 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        grids = {f.grid for f in self.fields}
        if len(grids) > 1:
            raise ValueError("all snapshots must share one grid")

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    def stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])

    def append(self, t: float, f: Field) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("times must be strictly increasing")
        self.times.append(float(t))
        self.fields.append(f)


# -- operations ----------------------------------------------------------------


def sample_obstacle(spec: ObstacleSpec, grid: Grid) -> Field:
    spec = spec.resolved(grid)
    if spec.kind == "tabulated":
        if spec.table_grid != grid:
            raise ValueError("tabulated obstacle was sampled on a different grid")
        return Field(grid, np.array(spec.table, dtype=float) + spec.shift, spec)
    return Field(grid, spec(grid.points()), spec)


def far_field(spec: ObstacleSpec, point) -> np.ndarray:
    """Value assigned to the solution outside the box: the obstacle itself."""
    return spec(np.asarray(point, dtype=float))


def mollify(spec: ObstacleSpec, grid: Grid, eps: float) -> Field:
    """Discrete convolution ``eta_eps * psi`` on the lattice.

    The discrete kernel is renormalized to unit sum, so constants are
    reproduced exactly and, by symmetry, affine functions too.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    spec = spec.resolved(grid)
    base = sample_obstacle(spec, grid)
    if eps < grid.h:
        warnings.warn(
            f"mollifier radius {eps} below grid spacing {grid.h}; returning unmollified obstacle",
            stacklevel=2,
        )
        return base
    pad = int(math.floor(eps / grid.h))
    offs = np.arange(-pad, pad + 1) * grid.h
    mesh = np.stack(np.meshgrid(*([offs] * grid.dim), indexing="ij"), axis=-1)
    kern = mollifier(mesh, eps, grid.dim)
    kern /= kern.sum()
    ext = _extended_values(base, pad, spec)
    from scipy.signal import correlate

    vals = correlate(ext, kern, mode="valid", method="direct")
    vals = np.minimum(np.maximum(vals, 0.0), ext.max())
    return Field(grid, vals, spec)


def _extended_values(f: Field, pad: int, spec: FarField | None = None) -> np.ndarray:
    """Node values padded by ``pad`` lattice nodes taken from the far field."""
    far = spec if spec is not None else f.far
    pts = f.grid.lattice_points(pad)
    ext = np.zeros(pts.shape[:-1]) if far is None else np.asarray(far(pts), dtype=float)
    inner = tuple(slice(pad, pad + f.grid.n) for _ in range(f.grid.dim))
    ext[inner] = f.values
    return ext


# -- CSV -----------------------------------------------------------------------


def write_field_csv(f: Field, path) -> None:
    """Header ``x0[,x1],value``; row-major over nodes; 17 significant digits."""
    pts = f.grid.points().reshape(-1, f.grid.dim)
    vals = f.values.reshape(-1)
    header = [f"x{k}" for k in range(f.grid.dim)] + ["value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p, v in zip(pts, vals):
            w.writerow([f"{c:.17g}" for c in p] + [f"{v:.17g}"])


def read_field_csv(path, far: FarField | None = None) -> Field:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    dim = data.shape[1] - 1
    n = round(len(data) ** (1.0 / dim))
    if n**dim != len(data):
        raise ValueError(f"{path}: {len(data)} rows is not a square lattice")
    x0 = data[:, 0]
    grid = Grid(dim, float(-x0.min()), n)
    return Field(grid, data[:, -1].reshape(grid.shape), far)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Header ``t,x0[,x1],value``; snapshots in time order, nodes row-major."""
    g = traj.grid
    pts = g.points().reshape(-1, g.dim)
    blocks = [
        np.column_stack([np.full(len(pts), t), pts, f.values.reshape(-1)])
        for t, f in zip(traj.times, traj.fields)
    ]
    header = ",".join(["t"] + [f"x{k}" for k in range(g.dim)] + ["value"])
    np.savetxt(path, np.vstack(blocks), delimiter=",", header=header, comments="", fmt="%.17g")


def read_trajectory_csv(path, far: FarField | None = None) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times, start = np.unique(data[:, 0], return_index=True)
    order = np.argsort(start)
    times, start = times[order], start[order]
    size = len(data) // len(times)
    if size * len(times) != len(data):
        raise ValueError(f"{path}: snapshots have unequal sizes")
    dim = data.shape[1] - 2
    n = round(size ** (1.0 / dim))
    if n**dim != size:
        raise ValueError(f"{path}: {size} nodes per snapshot is not a square lattice")
    grid = Grid(dim, float(-data[:size, 1].min()), n)
    fields = [Field(grid, data[k : k + size, -1].reshape(grid.shape), far) for k in start]
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
    return Trajectory([float(t) for t in times], fields, dt)


def random_smooth_field(grid: Grid, rng: np.random.Generator, bumps: int = 4) -> Field:
    """Sum of a few random Gaussians centred in ``|x| <= L/2``; zero outside the box.

    Widths are at least ``4 h`` so the field is resolved; used for randomized
    property checks.
    """
    x = grid.points()
    L = grid.half_width
    vals = np.zeros(grid.shape)
    for _ in range(bumps):
        c = rng.uniform(-L / 2, L / 2, size=grid.dim)
        w_min = max(4 * grid.h, L / 16)
        w = rng.uniform(w_min, max(w_min, L / 4))
        a = rng.uniform(-1.0, 1.0)
        vals += a * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * w * w))
    return Field(grid, vals)
