"""Run configuration: one INI file (``[section]`` + ``key = value``) for every subcommand."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .channel import ScenarioConfig
from .encoder import EncoderConfig
from .fusion import FusionConfig


@dataclass(frozen=True)
class EstimationConfig:
    calibration_count: int = 2000
    loading_factor: float = 1e-6


@dataclass(frozen=True)
class PreprocessConfig:
    eps: float = 1e-8
    eps_angle: float = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    stage1_epochs: int = 50
    stage2_epochs: int = 40
    samples_per_epoch: int = 256
    validation_period: int = 5
    validation_samples: int = 256
    freeze_encoders: bool = False
    skip_stage1: bool = False

    def __post_init__(self):
        if min(self.batch_size, self.samples_per_epoch, self.validation_period,
               self.validation_samples) < 1:
            raise ValueError("training counts must be positive")


@dataclass(frozen=True)
class QuantConfig:
    bits: tuple[int, ...] = (4, 10)
    percentile: float = 99.9
    calibration_samples: int = 256


@dataclass(frozen=True)
class EvalConfig:
    test_samples: int = 512
    cdf_bins: int = 100


@dataclass(frozen=True)
class TrajectoryConfig:
    points: int = 90
    radius: float = 6.0
    turns: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, seed=seed))

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section),
                                                                         **changes)})


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "yes", "1")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in text.replace(",", " ").split())
    return type(default)(text.strip())


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    base = RunConfig()
    sections = {}
    for f in dataclasses.fields(RunConfig):
        sub = getattr(base, f.name)
        if not cp.has_section(f.name):
            sections[f.name] = sub
            continue
        known = {sf.name for sf in dataclasses.fields(sub)}
        unknown = set(cp[f.name]) - known
        if unknown:
            raise ValueError(f"[{f.name}] unknown keys: {', '.join(sorted(unknown))}")
        changes = {k: _parse(v, getattr(sub, k)) for k, v in cp[f.name].items()}
        sections[f.name] = dataclasses.replace(sub, **changes)
    extra = set(cp.sections()) - set(sections)
    if extra:
        raise ValueError(f"unknown config sections: {', '.join(sorted(extra))}")
    return RunConfig(**sections)


def load_config(path) -> tuple[RunConfig, str]:
    """Parsed config and its verbatim text."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text), text


def render_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        sub = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in dataclasses.fields(sub):
            lines.append(f"{sf.name} = {_format(getattr(sub, sf.name))}")
        lines.append("")
    return "\n".join(lines)
