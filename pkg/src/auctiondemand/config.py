"""Run configuration: one YAML file drives a full experiment.

Every field has a documented default; unknown keys are rejected so typos
fail loudly. Any value can also be overridden through environment variables
of the form AUCTIONDEMAND_<SECTION>__<KEY> (case-insensitive), and the CLI
can override the seed and output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .nn import OptimizerConfig
from .pricing import QuadratureConfig

ENV_PREFIX = "AUCTIONDEMAND_"

# placeholder horizon; trainers recompute total_steps from the data size
SCHEDULE_TEMPLATE_STEPS = 10_000


@dataclass(frozen=True)
class DemandSection:
    kappa: int = 4
    n_min: int = 1
    n_max: int = 40


@dataclass(frozen=True)
class QuadratureSection:
    points: int = 512
    scheme: str = "sobol_1d"
    epsilon_clip: float = 1e-6
    censoring: str = "lowest"


@dataclass(frozen=True)
class EncoderSection:
    q: int = 64
    hidden: int = 128


@dataclass(frozen=True)
class SimulateSection:
    count: int = 2500
    val_fraction: float = 0.2
    zero_shot_brand: str = "dune"
    b_inc: float = 250.0
    reserve_shift: float = 0.75
    reserve_scale: float = 0.5
    keep_truth: bool = True


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 64
    max_lr: float = 8e-3
    warmup_steps: int = 300
    weight_decay: float = 0.01
    noise_sigma: float = 0.01


@dataclass(frozen=True)
class Stage2Section(TrainSection):
    epochs: int = 8
    batch_size: int = 32
    warmup_steps: int = 600
    j_max: int = 5


@dataclass(frozen=True)
class EvaluateSection:
    models: tuple[str, ...] = ("two_stage", "direct", "ols")
    hit_tolerance: float = 0.10


@dataclass(frozen=True)
class SweepSection:
    feature: str = "mileage"
    grid: tuple[float, ...] = (25_000.0, 50_000.0, 75_000.0, 100_000.0, 125_000.0, 150_000.0)
    sample_size: int = 200


@dataclass(frozen=True)
class AttributionSection:
    steps: int = 256
    baseline: str = "zero"
    rank: int = 2
    space: str = "embedding"


@dataclass(frozen=True)
class OlsSection:
    use_cohorts: bool = True
    cohort_cutoff: int = 50
    use_body_style: bool = False
    include_trend: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    demand: DemandSection = field(default_factory=DemandSection)
    quadrature: QuadratureSection = field(default_factory=QuadratureSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    stage1: TrainSection = field(default_factory=TrainSection)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    direct: Stage2Section = field(default_factory=Stage2Section)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    ols: OlsSection = field(default_factory=OlsSection)

    def quad_config(self) -> QuadratureConfig:
        return QuadratureConfig(
            points=self.quadrature.points,
            scheme=self.quadrature.scheme,
            epsilon_clip=self.quadrature.epsilon_clip,
        )

    def optimizer_template(self, section: TrainSection) -> OptimizerConfig:
        return OptimizerConfig(
            max_lr=section.max_lr,
            weight_decay=section.weight_decay,
            warmup_steps=section.warmup_steps,
            total_steps=max(SCHEDULE_TEMPLATE_STEPS, section.warmup_steps + 1),
        )


def _coerce(value, target_type, path: str):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _merge_section(section, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    by_name = {f.name: f for f in fields(section)}
    updates = {}
    for key, value in data.items():
        if key not in by_name:
            raise ConfigError(f"{path}.{key}: unknown key")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge_section(current, value, f"{path}.{key}")
        elif isinstance(current, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{key}: expected a list")
            elem_type = type(current[0]) if current else str
            updates[key] = tuple(
                _coerce(v, elem_type, f"{path}.{key}[{i}]") for i, v in enumerate(value)
            )
        else:
            updates[key] = _coerce(value, type(current), f"{path}.{key}")
    return dataclasses.replace(section, **updates)


def _apply_env(config: RunConfig, env) -> RunConfig:
    sections = {f.name for f in fields(RunConfig)}
    for raw_key, raw_value in sorted(env.items()):
        if not raw_key.upper().startswith(ENV_PREFIX):
            continue
        spec = raw_key[len(ENV_PREFIX):].lower()
        if "__" in spec:
            section_name, key = spec.split("__", 1)
            if section_name not in sections:
                raise ConfigError(f"{raw_key}: unknown config section {section_name!r}")
            config = _merge_section(config, {section_name: {key: raw_value}}, "config")
        else:
            if spec not in sections:
                raise ConfigError(f"{raw_key}: unknown config key {spec!r}")
            config = _merge_section(config, {spec: raw_value}, "config")
    return config


def load_config(path=None, env=None, seed_override: int | None = None,
                out_override: str | None = None,
                workers_override: int | None = None) -> RunConfig:
    """Defaults, overlaid by the YAML file, the environment, then CLI flags."""
    config = RunConfig()
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(raw)
        if data is None:
            data = {}
        config = _merge_section(config, data, "config")
    config = _apply_env(config, env if env is not None else os.environ)
    updates = {}
    if seed_override is not None:
        updates["seed"] = int(seed_override)
    if out_override is not None:
        updates["out_dir"] = str(out_override)
    if workers_override is not None:
        updates["workers"] = int(workers_override)
    if updates:
        config = dataclasses.replace(config, **updates)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    config.quad_config()
    if config.demand.kappa < 0 or config.demand.kappa > 8:
        raise ConfigError("demand.kappa must lie in 0..8")
    if not (1 <= config.demand.n_min <= config.demand.n_max):
        raise ConfigError("demand grid must satisfy 1 <= n_min <= n_max")
    if config.quadrature.censoring not in ("lowest", "renormalize"):
        raise ConfigError(f"unknown censoring rule {config.quadrature.censoring!r}")
    if not (0 < config.simulate.val_fraction < 1):
        raise ConfigError("simulate.val_fraction must lie in (0, 1)")
    if config.stage2.j_max < 2 or config.stage2.j_max > config.demand.n_max:
        raise ConfigError("stage2.j_max must lie in 2..n_max")
    if config.workers < 1:
        raise ConfigError("workers must be >= 1")
    if config.attribution.space not in ("embedding", "feature"):
        raise ConfigError("attribution.space must be 'embedding' or 'feature'")


def config_to_dict(config) -> dict:
    if dataclasses.is_dataclass(config) and not isinstance(config, type):
        return {f.name: config_to_dict(getattr(config, f.name)) for f in fields(config)}
    if isinstance(config, tuple):
        return [config_to_dict(v) for v in config]
    return config


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


DEFAULT_CONFIG_YAML = """\
# Full experiment configuration; every key shown with its default.
seed: 0
out_dir: runs/default
workers: 1

demand:
  kappa: 4          # valuation shape order (0..8)
  n_min: 1          # bidder-count grid lower edge
  n_max: 40         # one above the largest bidder count worth modeling

quadrature:
  points: 512
  scheme: sobol_1d  # or uniform_midpoint
  epsilon_clip: 1.0e-06
  censoring: lowest # mixture rule when the grid carries mass below a rank

encoder:
  q: 64             # embedding dimension
  hidden: 128

simulate:
  count: 2500
  val_fraction: 0.2
  zero_shot_brand: dune
  b_inc: 250.0
  reserve_shift: 0.75
  reserve_scale: 0.5
  keep_truth: true

stage1:
  epochs: 30
  batch_size: 64
  max_lr: 8.0e-03
  warmup_steps: 300
  weight_decay: 0.01
  noise_sigma: 0.01

stage2:
  epochs: 8
  batch_size: 32
  max_lr: 8.0e-03
  warmup_steps: 600  # clamped to total_steps/5 when the run is shorter
  weight_decay: 0.01
  noise_sigma: 0.01
  j_max: 5

direct:
  epochs: 8
  batch_size: 32
  max_lr: 8.0e-03
  warmup_steps: 600
  weight_decay: 0.01
  noise_sigma: 0.01
  j_max: 5

evaluate:
  models: [two_stage, direct, ols]
  hit_tolerance: 0.10

sweep:
  feature: mileage
  grid: [25000, 50000, 75000, 100000, 125000, 150000]
  sample_size: 200

attribution:
  steps: 256
  baseline: zero
  rank: 2
  space: embedding  # or feature

ols:
  use_cohorts: true
  cohort_cutoff: 50
  use_body_style: false
  include_trend: true
"""
