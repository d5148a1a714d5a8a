"""Experiment configuration: JSON file + flag overrides, validated with pydantic."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import LongTailSpec
from .errors import ConfigurationError
from .memorization import EstimatorConfig
from .nn import TrainConfig
from .replay import ReplayConfig

KINDS = ("incremental", "memscore", "sweep_classes", "sweep_fractions", "proxy_correlate", "probe")

POLICY_ALIASES = {
    "reservoir": "reservoir",
    "balanced": "balanced",
    "bottomk": "bottom_k",
    "bottom_k": "bottom_k",
    "midk": "middle_k",
    "middle_k": "middle_k",
    "topk": "top_k",
    "top_k": "top_k",
    "mixed": "mixed",
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSection(_Strict):
    path: str | None = None
    class_count: int = Field(10, ge=1)
    head_samples_per_class: int = Field(114, ge=1)
    tail_clusters_per_class: int = Field(6, ge=0)
    tail_samples_per_cluster: int = Field(1, ge=0)
    feature_dim: int = Field(16, ge=1)
    head_spread: float = Field(1.0, gt=0)
    tail_offset: float = Field(4.0, ge=0)
    noise: float = Field(0.5, gt=0)
    center_scale: float = Field(1.0, ge=0)
    seed: int = 0

    def spec(self) -> LongTailSpec:
        return LongTailSpec(**self.model_dump(exclude={"path"}))


class StreamSection(_Strict):
    tasks: int = Field(5, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    split_seed: int = 0


class TrainerSection(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    learning_rate: float = Field(0.1, gt=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    epochs_per_task: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    # None: the 50-epoch schedule (drops at 35 and 45) scaled to epochs_per_task
    lr_drop_epochs: list[int] | None = None
    lr_drop_factor: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _fill_schedule(self):
        if self.lr_drop_epochs is None:
            scaled = TrainConfig(epochs_per_task=50).with_epochs(self.epochs_per_task)
            object.__setattr__(self, "lr_drop_epochs", list(scaled.lr_drop_epochs))
        return self

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay,
            epochs_per_task=self.epochs_per_task, batch_size=self.batch_size,
            lr_drop_epochs=tuple(self.lr_drop_epochs), lr_drop_factor=self.lr_drop_factor, seed=seed,
        )


class StationaryTrainerSection(TrainerSection):
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-6, ge=0)


class BufferSection(_Strict):
    capacity: Union[int, Literal["inf"]] = 500
    policy: str = "reservoir"
    top_fraction: float = Field(0.10, ge=0, le=1)
    mixed_base: str = "bottom_k"
    replace_every_epoch: bool = False

    @field_validator("policy", "mixed_base")
    @classmethod
    def _known_policy(cls, v: str) -> str:
        if v not in POLICY_ALIASES:
            raise ValueError(f"unknown policy {v!r}; expected one of {sorted(POLICY_ALIASES)}")
        return POLICY_ALIASES[v]

    @field_validator("capacity")
    @classmethod
    def _positive(cls, v):
        if v != "inf" and v < 1:
            raise ValueError("capacity must be a positive integer or 'inf'")
        return v

    def replay_config(self) -> ReplayConfig:
        return ReplayConfig(
            capacity=None if self.capacity == "inf" else self.capacity,
            policy=self.policy, top_fraction=self.top_fraction, mixed_base=self.mixed_base,
            replace_every_epoch=self.replace_every_epoch,
        )


class EstimatorSection(_Strict):
    k_fraction: float = Field(0.5, gt=0, lt=1)
    u: int = Field(250, ge=1)
    mode: Literal["argmax", "softmax"] = "argmax"
    threshold: float = Field(0.25, ge=-1, le=1)
    bins: int = Field(20, ge=1)
    seed: int = 0

    def estimator(self, seed: int | None = None) -> EstimatorConfig:
        return EstimatorConfig(self.k_fraction, self.u, self.mode, self.seed if seed is None else seed, self.bins)


class SweepSection(_Strict):
    class_counts: list[int] = Field(default_factory=lambda: [2, 4, 8])
    fractions: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])


class CurvesSection(_Strict):
    enabled: bool = False
    thresholds: list[float] = Field(default_factory=lambda: [0.25])


class CompareSection(_Strict):
    policies: list[str] = Field(default_factory=lambda: ["reservoir", "bottom_k", "middle_k", "top_k"])
    buffer_sizes: list[int] = Field(default_factory=lambda: [500])
    include_infinite: bool = False

    @field_validator("policies")
    @classmethod
    def _known(cls, v):
        bad = [p for p in v if p not in POLICY_ALIASES]
        if bad:
            raise ValueError(f"unknown policies {bad}")
        return [POLICY_ALIASES[p] for p in v]


class ProbeSection(_Strict):
    task: int = -1
    thresholds: list[float] = Field(default_factory=lambda: [0.25])
    learning_rate: float = Field(0.5, gt=0)
    max_epochs: int = Field(500, ge=1)


class ExperimentConfig(_Strict):
    kind: Literal[KINDS] = "incremental"
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    stream: StreamSection = Field(default_factory=StreamSection)
    trainer: TrainerSection = Field(default_factory=TrainerSection)
    stationary_trainer: StationaryTrainerSection = Field(default_factory=StationaryTrainerSection)
    buffer: BufferSection = Field(default_factory=BufferSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    curves: CurvesSection = Field(default_factory=CurvesSection)
    compare: CompareSection = Field(default_factory=CompareSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    seeds: list[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _cross_checks(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        # surfaces conflicts such as a selector policy with an infinite buffer
        self.buffer.replay_config()
        self.trainer.train_config(0)
        self.stationary_trainer.train_config(0)
        return self

    def effective(self) -> dict:
        return self.model_dump(mode="json")


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{dotted}: '{key}' is not a section")
    node[keys[-1]] = value


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load a JSON config (if given), apply dotted-path overrides, fill defaults, validate.

    Overrides win over file values. Unknown keys are rejected with their path.
    """
    tree: dict = {}
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigurationError("config root must be a JSON object")
    for dotted, value in (overrides or {}).items():
        set_dotted(tree, dotted, _coerce(value) if isinstance(value, str) else value)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigurationError(_format_error(exc)) from None
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc)) from None


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
