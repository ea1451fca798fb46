"""JSON run configuration with strict validation.

Every key maps to a dataclass field; unknown keys and bad values raise
:class:`ConfigError` naming the dotted field path.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .bench import LEVELS, Cell, FitSettings
from .mcmc import MCMCConfig, TrendPrior
from .prior import level_plan
from .pyramid import PyramidLayout, check_levels, build_general_layout, build_oblique_layout
from .stochastic import ConcentrationRule, CorrelationKernel, martingale_alphas


class ConfigError(ValueError):
    pass


@dataclass
class KernelConfig:
    family: str = "gaussian"
    range: float = 5.0


@dataclass
class ConcentrationConfig:
    offset: float = 5.0
    power: float = 2.0


@dataclass
class TrendPriorConfig:
    mean: list[float] = field(default_factory=lambda: [5.0, 0.0])
    var: list[float] = field(default_factory=lambda: [3.0, 3.0])


@dataclass
class LayoutConfig:
    type: str = "oblique"
    # node path ("" for the root, "1.2" for child 2 of child 1) -> levels placed there
    splits: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class SigmaConfig:
    mode: str = "site_sd"              # site_sd | pooled | ols | sample | fixed
    value: Optional[float] = None      # used by "fixed" and by sample-prior


@dataclass
class MCMCSection:
    warmup: int = 1000
    iterations: int = 20000
    thin: int = 20
    level_steps: Optional[list[float]] = None
    trend_step: Optional[list[float]] = None
    trend_blocks: Optional[list[list[int]]] = None
    scale_step: float = 0.1


@dataclass
class DataConfig:
    path: Optional[str] = None
    format: str = "xy"                 # xy | cyclone
    year_origin: Optional[int] = None


@dataclass
class PriorSampleConfig:
    draws: int = 10
    x: list[float] = field(default_factory=lambda: [float(i) for i in range(1, 11)])
    route: str = "beta"


@dataclass
class PredictConfig:
    draws_path: Optional[str] = None
    x_star: list[float] = field(default_factory=list)


@dataclass
class BenchConfig:
    cells: list[list[Any]] = field(default_factory=lambda: [["1-1", 3, 100]])
    datasets: int = 20
    full_scale: bool = False


@dataclass
class LevyConfig:
    pairs: int = 1000
    max_levels: int = 8
    adversarial_share: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    levels: list[float] = field(default_factory=lambda: list(LEVELS[3]))
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    concentration: ConcentrationConfig = field(default_factory=ConcentrationConfig)
    trend_prior: TrendPriorConfig = field(default_factory=TrendPriorConfig)
    trend: str = "linear"
    beta_rule: str = "martingale"      # "literal" needs binary nodes and alphas below 1
    sigma: SigmaConfig = field(default_factory=SigmaConfig)
    mcmc: MCMCSection = field(default_factory=MCMCSection)
    data: DataConfig = field(default_factory=DataConfig)
    prior_samples: PriorSampleConfig = field(default_factory=PriorSampleConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    levy: LevyConfig = field(default_factory=LevyConfig)

    # -- builders ----------------------------------------------------------

    def build_layout(self) -> PyramidLayout:
        if self.layout.type not in ("oblique", "general"):
            raise ValueError(f"unknown layout type {self.layout.type!r}")
        if self.layout.type == "oblique":
            return build_oblique_layout(self.levels)
        spec = {_parse_path(k): v for k, v in self.layout.splits.items()}
        return build_general_layout(self.levels, spec)

    def build_kernel(self) -> CorrelationKernel:
        return CorrelationKernel(self.kernel.family, self.kernel.range)

    def build_alphas(self, layout: PyramidLayout | None = None):
        rule = ConcentrationRule(self.concentration.offset, self.concentration.power)
        return martingale_alphas(layout or self.build_layout(), rule)

    def build_trend_prior(self) -> TrendPrior:
        return TrendPrior(self.trend_prior.mean, self.trend_prior.var)

    def build_mcmc(self, seed: int | None = None) -> MCMCConfig:
        m = self.mcmc
        return MCMCConfig(warmup=m.warmup, iterations=m.iterations, thin=m.thin,
                          level_steps=m.level_steps, trend_blocks=m.trend_blocks,
                          trend_step=m.trend_step, scale_step=m.scale_step,
                          scale_mode="sample" if self.sigma.mode == "sample" else "plugin",
                          seed=self.seed if seed is None else seed)

    def fit_settings(self) -> FitSettings:
        return FitSettings(levels=tuple(self.levels), kernel=self.build_kernel(),
                           concentration=ConcentrationRule(self.concentration.offset,
                                                           self.concentration.power),
                           trend_prior=self.build_trend_prior(), sigma_mode=self.sigma.mode,
                           sigma_value=self.sigma.value, trend=self.trend,
                           mcmc=self.build_mcmc(), beta_rule=self.beta_rule,
                           layout=None if self.layout.type == "oblique" else self.build_layout())

    def cells(self) -> list[Cell]:
        cells = [Cell(str(c[0]), int(c[1]), int(c[2])) for c in self.bench.cells]
        for c in cells:
            c.spec()
            if c.T not in LEVELS:
                raise ValueError(f"T must be one of {sorted(LEVELS)}, got {c.T}")
        return cells

    def validate(self) -> "RunConfig":
        """Build every derived object once so errors surface before any computation."""
        try:
            check_levels(self.levels)
        except ValueError as exc:
            raise ConfigError(f"levels: {exc}") from None
        checks = {
            "layout": self.build_layout, "kernel": self.build_kernel,
            "trend_prior": self.build_trend_prior, "mcmc": self.build_mcmc,
            "bench.cells": self.cells,
        }
        for path, build in checks.items():
            try:
                build()
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        try:
            alphas = self.build_alphas()
        except ValueError as exc:
            raise ConfigError(f"concentration: {exc}") from None
        try:
            level_plan(self.build_layout(), alphas, self.beta_rule)
        except ValueError as exc:
            raise ConfigError(f"beta_rule: {exc}") from None
        if self.sigma.mode not in ("site_sd", "pooled", "ols", "sample", "fixed"):
            raise ConfigError(f"sigma.mode: unknown mode {self.sigma.mode!r}")
        if self.sigma.mode == "fixed" and not (self.sigma.value or 0) > 0:
            raise ConfigError("sigma.value: a positive value is required for mode 'fixed'")
        if self.trend not in ("linear", "constant"):
            raise ConfigError(f"trend: unknown trend form {self.trend!r}")
        if self.data.format not in ("xy", "cyclone"):
            raise ConfigError(f"data.format: unknown format {self.data.format!r}")
        if self.prior_samples.draws < 1:
            raise ConfigError("prior_samples.draws: must be positive")
        if self.bench.datasets < 1:
            raise ConfigError("bench.datasets: must be positive")
        if self.threads < 1:
            raise ConfigError("threads: must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_path(text: str) -> tuple[int, ...]:
    text = text.strip()
    return () if text in ("", "root") else tuple(int(p) for p in text.split("."))


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return {str(k): _convert(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return config_from_dict(data)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
