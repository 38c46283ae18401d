"""Fourier evaluation and evolution on the periodic box ``[-L, L)^d``.

The symbol of the fractional Laplacian is ``|xi|^{2s}`` by definition, so the
transforms here give an independent reference for the lattice quadrature as
long as the data are concentrated well inside the box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import Field, Grid, Trajectory


@dataclass(frozen=True, eq=False)
class PeriodicField:
    """Samples on ``N`` equispaced points per axis of a period-``2L`` box."""

    half_width: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        n = vals.shape[0]
        if vals.ndim not in (1, 2) or any(m != n for m in vals.shape):
            raise ValueError("values must be a 1-D array or a square 2-D array")
        if n < 2 or n & (n - 1):
            raise ValueError(f"length {n} is not a power of two")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def axis(self) -> np.ndarray:
        return -self.half_width + np.arange(self.n) * (2 * self.half_width / self.n)

    def wavenumber_modulus(self) -> np.ndarray:
        """``|xi|`` on the FFT layout, with ``xi_k = pi k / L``."""
        k = np.fft.fftfreq(self.n, d=1.0 / self.n) * np.pi / self.half_width
        if self.dim == 1:
            return np.abs(k)
        k0, k1 = np.meshgrid(k, k, indexing="ij")
        return np.hypot(k0, k1)

    def with_values(self, values) -> "PeriodicField":
        return PeriodicField(self.half_width, values)

    @classmethod
    def from_field(cls, f: Field) -> "PeriodicField":
        """Drop the last node per axis (it duplicates the first under periodicity)."""
        sl = tuple(slice(0, f.grid.n - 1) for _ in range(f.grid.dim))
        return cls(f.grid.half_width, f.values[sl])

    def to_field(self, grid: Grid | None = None) -> Field:
        """Inverse of :meth:`from_field`; the wrap-around node is appended."""
        grid = grid or Grid(self.dim, self.half_width, self.n + 1)
        vals = np.pad(self.values, [(0, 1)] * self.dim, mode="wrap")
        return Field(grid, vals)


def _apply_symbol(f: PeriodicField, symbol: np.ndarray) -> PeriodicField:
    axes = tuple(range(f.dim))
    spec = np.fft.rfftn(f.values, axes=axes) * _half(symbol, f.dim)
    return f.with_values(np.fft.irfftn(spec, s=f.values.shape, axes=axes))


def _half(full: np.ndarray, dim: int) -> np.ndarray:
    return full[..., : full.shape[-1] // 2 + 1]


def dft_frac_laplacian(f: PeriodicField, s: float) -> PeriodicField:
    """Inverse transform of ``|xi|^{2s} F u``."""
    return _apply_symbol(f, f.wavenumber_modulus() ** (2 * s))


def heat_evolve(f: PeriodicField, t: float, s: float) -> PeriodicField:
    """Inverse transform of ``exp(-|xi|^{2s} t) F u``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return _apply_symbol(f, np.exp(-f.wavenumber_modulus() ** (2 * s) * t))


Source = Callable[[float], np.ndarray] | Sequence


def duhamel_solve(
    init: PeriodicField,
    source: Source | None,
    dt: float,
    T: float,
    s: float,
) -> Trajectory:
    """``u_t + (-Delta)^s u = f`` with an exact integrating factor per mode.

    The source enters through the trapezoidal rule
    ``u^+ = e^{-lam dt} u + dt/2 (e^{-lam dt} f(t) + f(t + dt))``, which is
    second order in ``dt``. ``source`` is a callable of time or a sequence of
    snapshots on the ``dt`` lattice (arrays or :class:`PeriodicField`).
    """
    if not dt > 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a multiple of dt")
    lam = _half(init.wavenumber_modulus() ** (2 * s), init.dim)
    decay = np.exp(-lam * dt)
    shape = init.values.shape

    def f_hat(m):
        if source is None:
            return 0.0
        val = source(m * dt) if callable(source) else source[m]
        val = val.values if isinstance(val, PeriodicField) else np.asarray(val, dtype=float)
        return np.fft.rfftn(np.broadcast_to(val, shape), axes=tuple(range(len(shape))))

    u = np.fft.rfftn(init.values, axes=tuple(range(init.dim)))
    traj = Trajectory([0.0], [init.to_field()], dt)
    f_now = f_hat(0)
    for m in range(steps):
        f_next = f_hat(m + 1)
        u = decay * u + 0.5 * dt * (decay * f_now + f_next)
        f_now = f_next
        traj.append((m + 1) * dt, init.with_values(np.fft.irfftn(u, s=shape, axes=tuple(range(init.dim)))).to_field())
    return traj
