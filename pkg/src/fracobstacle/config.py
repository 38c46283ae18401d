"""Run configuration: INI sections mapped onto dataclasses, plus the market parameter map.

Every section is a flat dataclass. Unknown sections and keys are rejected, and
:func:`dumps` followed by :func:`loads` reproduces the configuration exactly.
"""

from __future__ import annotations

import configparser
import math
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .grid import ObstacleSpec, build_grid
from .nonlocal_ops import (
    I_VARIANTS,
    KernelSpec,
    OperatorParams,
    QuadratureConfig,
    modulated_kernel,
    power_kernel,
)
from .penalty_solver import PenaltyConfig, Problem


class ConfigError(ValueError):
    """Unparseable or inconsistent configuration."""


# -- sections --------------------------------------------------------------------


@dataclass
class GridSection:
    dim: int = 1
    half_width: float = 6.0
    n: int = 513


@dataclass
class ObstacleSection:
    kind: str = "mollified_put"
    amplitude: float = 1.0
    scale: float = 1.0
    center: tuple[float, ...] = ()
    strike: float = 1.0
    delta: float | None = None
    shift: float = 0.0


KERNEL_SHAPES = ("power", "modulated")
G_FUNCTIONS = {"identity": lambda z: z, "tanh": np.tanh, "sin": np.sin}


@dataclass
class OperatorSection:
    s: float = 0.75
    sigma: float = 0.3
    lam: float = 1.0
    Lam: float = 1.0
    drift: tuple[float, ...] = (0.0,)
    rate: float = 0.0
    i_variant: str = "zero"
    kernel: str = "power"
    family_size: int = 4
    kernel_freq: float = 1.0
    kernel_aniso: float = 0.0
    g_function: str = "identity"


@dataclass
class MarketParams:
    """Short rate, dividend rates and jump data of an exponential pure-jump market."""

    short_rate: float = 0.05
    dividends: tuple[float, ...] = (0.0,)
    s: float = 0.75
    sigma: float = 0.3
    strike: float = 1.0
    jump_intensity: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.s < 1:
            raise ConfigError(f"market jump order s = {self.s} must lie in (1/2, 1)")
        if not 0 < self.sigma < self.s:
            raise ConfigError(f"assumption (iv) requires s > sigma > 0; got s={self.s}, sigma={self.sigma}")
        if not self.jump_intensity > 0:
            raise ConfigError("jump_intensity must be positive")


def merton_map(m: MarketParams) -> OperatorParams:
    """Operator coefficients of the log-price pricing equation.

    The drift is ``b_i = d_i - r``, the discount rate is copied and the jump
    correction is linear with ``K(y) = lam / |y|^{d + 2 sigma}``, ``lam = Lam``
    equal to the jump intensity.
    """
    lam = m.jump_intensity
    return OperatorParams(
        s=m.s,
        sigma=m.sigma,
        lam=lam,
        Lam=lam,
        b=tuple(d - m.short_rate for d in m.dividends),
        r=m.short_rate,
        i_variant="linear",
        kernels=(power_kernel(m.sigma, lam),),
    )


@dataclass
class MarketSection:
    enabled: bool = False
    short_rate: float = 0.05
    dividends: tuple[float, ...] = (0.0,)
    jump_intensity: float = 1.0


SCHEME_NAMES = ("imex", "projected", "picard")


@dataclass
class SolverSection:
    scheme: str = "imex"
    eps: float = 0.05
    dt: float | None = None
    T: float = 0.5
    snapshot_every: int = 1
    snapshots: int | None = None
    cfl_safety: float = 0.9


@dataclass
class PicardSection:
    tol: float = 1e-8
    max_iter: int = 60


@dataclass
class QuadratureSection:
    inner_radius: int = 1
    tail_radius: float | None = None
    tail_nodes: int | None = None
    tail_angles: int = 32
    cell_order: int = 6
    tolerance: float = 1e-4


@dataclass
class AnalysisSection:
    regularity: bool = True
    extension: bool = False
    eigcheck: bool = False
    mono_tol: float | None = None
    eps_sweep: tuple[float, ...] = ()


@dataclass
class OutputSection:
    dir: str = "out"
    write_snapshots: bool = True


SECTIONS = {
    "grid": GridSection,
    "obstacle": ObstacleSection,
    "operator": OperatorSection,
    "market": MarketSection,
    "solver": SolverSection,
    "picard": PicardSection,
    "quadrature": QuadratureSection,
    "analysis": AnalysisSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    obstacle: ObstacleSection = field(default_factory=ObstacleSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    market: MarketSection = field(default_factory=MarketSection)
    solver: SolverSection = field(default_factory=SolverSection)
    picard: PicardSection = field(default_factory=PicardSection)
    quadrature: QuadratureSection = field(default_factory=QuadratureSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- domain objects ----------------------------------------------------------

    def market_params(self) -> MarketParams:
        m, op = self.market, self.operator
        return MarketParams(m.short_rate, m.dividends, op.s, op.sigma, self.obstacle.strike, m.jump_intensity)

    def _kernels(self, op: OperatorSection) -> tuple[KernelSpec, ...]:
        if op.i_variant == "linear":
            if op.kernel == "power":
                if op.lam != op.Lam:
                    raise ConfigError("a power kernel is a single multiple of |y|^{-d-2sigma}; set lam = Lam")
                return (power_kernel(op.sigma, op.lam),)
            return (modulated_kernel(op.sigma, op.lam, op.Lam, freq=op.kernel_freq, aniso=op.kernel_aniso),)
        if op.i_variant == "pucci_sup":
            if op.family_size < 1:
                raise ConfigError("family_size must be at least 1")
            return tuple(
                modulated_kernel(op.sigma, op.lam, op.Lam, phase=2 * math.pi * k / op.family_size,
                                 freq=op.kernel_freq, aniso=op.kernel_aniso)
                for k in range(op.family_size)
            )
        return ()

    def operator_params(self) -> OperatorParams:
        op = self.operator
        try:
            if self.market.enabled:
                return merton_map(self.market_params())
            if op.kernel not in KERNEL_SHAPES:
                raise ConfigError(f"kernel must be one of {KERNEL_SHAPES}")
            if op.g_function not in G_FUNCTIONS:
                raise ConfigError(f"g_function must be one of {tuple(G_FUNCTIONS)}")
            return OperatorParams(
                s=op.s,
                sigma=op.sigma,
                lam=op.lam,
                Lam=op.Lam,
                b=op.drift,
                r=op.rate,
                i_variant=op.i_variant,
                kernels=self._kernels(op),
                G=G_FUNCTIONS[op.g_function] if op.i_variant == "g_integrand" else None,
                G_lipschitz=1.0,
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def quad_config(self) -> QuadratureConfig:
        q = self.quadrature
        return QuadratureConfig(q.inner_radius, q.tail_radius, q.tail_nodes, q.tail_angles, q.cell_order, q.tolerance)

    def problem(self) -> Problem:
        g, ob = self.grid, self.obstacle
        try:
            grid = build_grid(g.dim, g.half_width, g.n)
            center = ob.center or (0.0,) * g.dim
            if len(center) != g.dim:
                raise ConfigError(f"obstacle center has {len(center)} coordinates for a {g.dim}-D grid")
            spec = ObstacleSpec(ob.kind, ob.amplitude, ob.scale, tuple(center), ob.strike, ob.delta, ob.shift)
            return Problem(grid, spec, self.operator_params(), self.quad_config())
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def penalty_config(self, **overrides) -> PenaltyConfig:
        s = self.solver
        try:
            cfg = PenaltyConfig(
                eps=s.eps,
                dt=s.dt,
                T=s.T,
                scheme="explicit" if s.scheme == "projected" else "imex",
                picard_tol=self.picard.tol,
                picard_max=self.picard.max_iter,
                snapshot_every=s.snapshot_every,
                cfl_safety=s.cfl_safety,
            )
            return replace(cfg, **overrides) if overrides else cfg
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> "RunConfig":
        """Build every derived object once so inconsistencies surface before a run."""
        if self.solver.scheme not in SCHEME_NAMES:
            raise ConfigError(f"scheme must be one of {SCHEME_NAMES}")
        if self.operator.i_variant not in I_VARIANTS:
            raise ConfigError(f"i_variant must be one of {I_VARIANTS}")
        if self.solver.snapshots is not None and self.solver.snapshots < 1:
            raise ConfigError("snapshots must be positive")
        self.problem()
        self.penalty_config()
        return self


# -- parsing ---------------------------------------------------------------------


def _base_type(tp):
    """Strip ``X | None`` to ``(X, optional)``."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _parse_value(text: str, tp, key: str):
    base, optional = _base_type(tp)
    text = text.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if base is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        if base is str:
            return text
        if typing.get_origin(base) is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"cannot read {key} = {text!r} as {getattr(base, '__name__', base)}") from None
    raise ConfigError(f"unsupported field type for {key}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def loads(text: str) -> RunConfig:
    """Parse INI text; missing keys take their defaults, unknown ones are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    kwargs = {}
    for name in cp.sections():
        cls = SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"unknown section [{name}]")
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        vals = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            vals[key] = _parse_value(raw, hints[key], f"{name}.{key}")
        try:
            kwargs[name] = cls(**vals)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**kwargs)


def dumps(config: RunConfig) -> str:
    """Serialize every key of every section (the inverse of :func:`loads`)."""
    lines = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file {str(p)!r} not found")
    return loads(p.read_text())


def save(config: RunConfig, path) -> None:
    Path(path).write_text(dumps(config))


BUNDLED = ("put1d", "cafi", "bump2d")


def bundled_path(name: str) -> Path:
    """Path of a configuration shipped with the package (``put1d``, ``cafi``, ``bump2d``)."""
    stem = name[:-4] if name.endswith(".cfg") else name
    if stem not in BUNDLED:
        raise ConfigError(f"no bundled configuration named {name!r}")
    return Path(__file__).parent / "configs" / f"{stem}.cfg"


def resolve(path_or_name) -> RunConfig:
    """Load a file, falling back to a bundled configuration of that name."""
    p = Path(path_or_name)
    if not p.is_file() and p.stem in BUNDLED and p.parent == Path("."):
        p = bundled_path(p.stem)
    return load(p)
