"""Run configuration: one JSON document covering every stage of a run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .data import MAP_KINDS, GenSpec
from .model import DenoiserConfig
from .sampler import SamplerConfig
from .training import TrainConfig

SCHEMA_VERSION = 1

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_bool = {"type": "boolean"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "schedule": _obj({
            "kind": {"enum": ["linear", "cosine"]},
            "K": {"type": "integer", "minimum": 2},
            "beta_range": {"oneOf": [{"type": "null"}, {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}]},
        }),
        "denoiser": _obj({
            "D": _pos_int, "blocks": _pos_int, "heads": _pos_int, "T": {"type": "integer", "minimum": 2},
            "H": _pos_int, "n_max": _pos_int, "t_hist": _pos_int, "n_polylines": _pos_int, "poly_points": {"type": "integer", "minimum": 2},
            "agent_attention": _bool, "augment": _bool, "dtype": {"enum": ["float64", "float32"]},
        }),
        "train": _obj({
            "lam": {"type": "number", "minimum": 0}, "lr": {"type": "number", "exclusiveMinimum": 0},
            "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "lr_decay_every": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "batch_size": _pos_int, "steps": _pos_int,
            "noise": {"enum": ["consistent", "independent"]}, "loss_norm": {"enum": ["l2", "l1"]},
            "checkpoint_every": {"type": "integer", "minimum": 0},
        }),
        "sampler": _obj({
            "M": _pos_int, "guidance": {"enum": ["noise", "state", "off"]},
            "noise": {"enum": ["consistent", "independent"]}, "stride": _pos_int, "clip_x0": _bool,
        }),
        "scoring": _obj({
            "counting": {"enum": ["timesteps", "episodes"]}, "keep": {"oneOf": [{"type": "null"}, _pos_int]},
            "oversample": {"type": "number", "minimum": 1},
        }),
        "metrics": _obj({"alpha": {"type": "number", "exclusiveMinimum": 0}}),
        "data": _obj({
            "n_scenes": _pos_int,
            "n_agents_range": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
            "map_kinds": {"type": "array", "items": {"enum": list(MAP_KINDS)}, "minItems": 1},
            "dt": {"type": "number", "exclusiveMinimum": 0}, "t_hist": _pos_int, "t_fut": {"type": "integer", "minimum": 2},
            "vehicle_speed": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            "accel_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            "max_attempts": _pos_int,
        }),
    },
    required=["schema_version"],
)


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    kind: str = "linear"
    K: int = 100
    beta_range: list[float] | None = None


@dataclass
class ScoringSection:
    counting: str = "timesteps"
    keep: int | None = None
    oversample: float = 1.0


@dataclass
class MetricsSection:
    alpha: float = 1.0


def _strip(d: dict, *names) -> dict:
    return {k: v for k, v in d.items() if k not in names}


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    data: GenSpec = field(default_factory=GenSpec)

    def __post_init__(self):
        if self.data.t_fut != self.denoiser.T:
            raise ConfigError(f"data t_fut={self.data.t_fut} differs from denoiser T={self.denoiser.T}")
        if self.data.t_hist != self.denoiser.t_hist:
            raise ConfigError(f"data t_hist={self.data.t_hist} differs from denoiser t_hist={self.denoiser.t_hist}")
        if self.data.n_agents_range[1] > self.denoiser.n_max:
            raise ConfigError(f"data may place {self.data.n_agents_range[1]} agents but n_max={self.denoiser.n_max}")
        self.train.seed = self.seed
        self.sampler.seed = self.seed
        self.sampler.K = self.schedule.K
        self.denoiser.K = self.schedule.K
        self.data.seed = self.seed

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "schedule": asdict(self.schedule),
            "denoiser": _strip(asdict(self.denoiser), "K"),
            "train": _strip(asdict(self.train), "seed"),
            "sampler": _strip(asdict(self.sampler), "seed", "K"),
            "scoring": asdict(self.scoring),
            "metrics": asdict(self.metrics),
            "data": _strip(asdict(self.data), "seed"),
        }
        return json.loads(json.dumps(d))  # tuples become lists

    def with_seed(self, seed: int) -> "RunConfig":
        return from_dict({**self.to_dict(), "seed": seed})

    def config_hash(self) -> str:
        """Digest of everything except the seed, which rollout files record separately."""
        d = _strip(self.to_dict(), "seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def validate(d: dict) -> None:
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None


def _section(cls, d: dict | None):
    return cls(**(d or {}))


def from_dict(d: dict) -> RunConfig:
    validate(d)
    try:
        return RunConfig(
            seed=d.get("seed", 0),
            schedule=_section(ScheduleSection, d.get("schedule")),
            denoiser=_section(DenoiserConfig, d.get("denoiser")),
            train=_section(TrainConfig, d.get("train")),
            sampler=_section(SamplerConfig, d.get("sampler")),
            scoring=_section(ScoringSection, d.get("scoring")),
            metrics=_section(MetricsSection, d.get("metrics")),
            data=_section(GenSpec, d.get("data")),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    return from_dict(d)


def save(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
