"""Twin-experiment configuration: dataclasses plus a strict TOML loader.

A config file has four tables mirroring :class:`ExperimentConfig`::

    [model]
    N = 128
    F = 8.0
    dt = 0.01
    spinup_duration = 100.0
    spinup_perturbation = 0.001

    [observation]
    steps_per_cycle = 15
    resolution_stride = 2      # observe every 2nd grid point
    noise_std = 0.364          # omit for 10% of the regime's climatological std

    [filter]
    K = 20
    rho = 1.05
    c = 4.0                    # inf disables localization
    sigma = 0.5
    mode = "perturbation"      # off | perturbation | whole-ensemble
    additive = 0.0
    initial_spread = 0.364     # omit to reuse noise_std

    [run]
    n_cycles = 1333
    rmse_window = 350
    seed = 0

Every key is optional; unknown tables or keys raise :class:`ConfigError`.
"""
from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .filter import MODES, FilterConfig
from .models import ModelParams

#: Long-run standard deviation of the N = 128 free run for the three reference regimes.
CLIMATOLOGICAL_STD = {4.0: 1.854, 8.0: 3.640, 16.0: 6.298}
NOISE_FRACTION = 0.1
SEED_LIMIT = 2**64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N: int = 128
    F: float = 8.0
    dt: float = 0.01
    spinup_duration: float = 100.0
    spinup_perturbation: float = 1e-3

    @property
    def params(self):
        return ModelParams(self.N, self.F, self.dt)


@dataclass(frozen=True)
class ObservationConfig:
    steps_per_cycle: int = 15
    resolution_stride: int = 1
    noise_std: float | None = None


@dataclass(frozen=True)
class EnsembleFilterConfig:
    K: int = 20
    rho: float = 1.0
    c: float = math.inf
    sigma: float = 0.0
    mode: str = "perturbation"
    additive: float = 0.0
    initial_spread: float | None = None

    @property
    def filter_config(self):
        return FilterConfig(rho=self.rho, c=self.c, sigma=self.sigma, mode=self.mode, additive=self.additive)


@dataclass(frozen=True)
class RunConfig:
    n_cycles: int = 1333
    rmse_window: int = 350
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    filter: EnsembleFilterConfig = field(default_factory=EnsembleFilterConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        validate(self)

    @property
    def noise_std(self):
        """Observation noise std, defaulting to 10% of the climatological std."""
        if self.observation.noise_std is not None:
            return self.observation.noise_std
        return NOISE_FRACTION * climatological_std(self.model.F)

    @property
    def initial_spread(self):
        if self.filter.initial_spread is not None:
            return self.filter.initial_spread
        return self.noise_std

    @property
    def cycle_interval(self):
        return self.observation.steps_per_cycle * self.model.dt

    def with_filter(self, **changes):
        return replace(self, filter=replace(self.filter, **changes))

    def with_run(self, **changes):
        return replace(self, run=replace(self.run, **changes))

    def with_observation(self, **changes):
        return replace(self, observation=replace(self.observation, **changes))

    def to_dict(self):
        return asdict(self)


def climatological_std(F):
    try:
        return CLIMATOLOGICAL_STD[float(F)]
    except KeyError:
        raise ConfigError(
            f"no reference climatological std for F={F}; set observation.noise_std explicitly"
        ) from None


def validate(cfg: ExperimentConfig):
    m, o, f, r = cfg.model, cfg.observation, cfg.filter, cfg.run
    try:
        m.params
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not m.spinup_duration > 0:
        raise ConfigError("model.spinup_duration must be positive")
    if o.steps_per_cycle < 1:
        raise ConfigError("observation.steps_per_cycle must be >= 1")
    if not 1 <= o.resolution_stride <= m.N:
        raise ConfigError("observation.resolution_stride must lie in 1..N")
    if o.noise_std is not None and not o.noise_std > 0:
        raise ConfigError("observation.noise_std must be positive")
    if f.K < 2:
        raise ConfigError("filter.K must be >= 2")
    if f.mode not in MODES:
        raise ConfigError(f"filter.mode must be one of {MODES}")
    if not f.rho >= 1 or not f.c > 0 or not f.sigma >= 0 or not f.additive >= 0:
        raise ConfigError("filter needs rho >= 1, c > 0, sigma >= 0, additive >= 0")
    if f.initial_spread is not None and not f.initial_spread > 0:
        raise ConfigError("filter.initial_spread must be positive")
    if not 1 <= r.rmse_window <= r.n_cycles:
        raise ConfigError("run needs n_cycles >= rmse_window >= 1")
    if not 0 <= r.seed < SEED_LIMIT:
        raise ConfigError("run.seed must be an unsigned 64-bit integer")


_SECTIONS = {
    "model": ModelConfig,
    "observation": ObservationConfig,
    "filter": EnsembleFilterConfig,
    "run": RunConfig,
}


def _coerce(cls, name, value):
    kinds = {f.name: f.type for f in fields(cls)}
    kind = kinds[name]
    if value is None:
        return None
    if kind == "int":
        if isinstance(value, bool) or int(value) != value:
            raise ConfigError(f"{cls.__name__}.{name} must be an integer, got {value!r}")
        return int(value)
    if kind == "str":
        return str(value)
    if isinstance(value, str):
        value = float(value)  # accepts "inf"
    if isinstance(value, bool):
        raise ConfigError(f"{cls.__name__}.{name} must be a number")
    return float(value)


def from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config table(s): {sorted(unknown)}")
    sections = {}
    for key, cls in _SECTIONS.items():
        table = data.get(key, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{key}] must be a table")
        names = {f.name for f in fields(cls)}
        bad = set(table) - names
        if bad:
            raise ConfigError(f"unknown key(s) in [{key}]: {sorted(bad)}")
        try:
            sections[key] = cls(**{k: _coerce(cls, k, v) for k, v in table.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{key}]: {exc}") from None
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    try:
        with Path(path).open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def _toml_value(v):
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as TOML that :func:`load_config` reads back unchanged."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items() if v is not None)
        lines.append("")
    return "\n".join(lines)
