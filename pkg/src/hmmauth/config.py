"""Run configuration: validated, versioned, and hashed into every artifact."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

CONFIG_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PreprocessConfig(_Section):
    rate_hz: float = Field(50.0, gt=0)
    pad_ms: float = Field(50.0, ge=0)
    reorder_ms: float = Field(10.0, ge=0)
    tap_max_ms: float = Field(300.0, ge=0)
    tap_max_px: float = Field(20.0, ge=0)
    scale_normalize: bool = True


class HmmConfig(_Section):
    slide_states: tuple[int, ...] = (3, 4, 5, 6, 7, 8)
    tap_states: tuple[int, ...] = (2, 3, 4)
    mixtures: tuple[int, ...] = (1, 2, 3)
    folds: int = Field(5, ge=2)
    tol: float = Field(1e-4, gt=0)
    max_iter: int = Field(100, ge=1)
    var_floor: float = Field(1e-4, gt=0)

    @field_validator("slide_states", "tap_states", "mixtures")
    @classmethod
    def _positive_grid(cls, v):
        if not v or any(x < 1 for x in v):
            raise ValueError("grid must be non-empty with entries >= 1")
        return tuple(sorted(set(v)))

    def states_for(self, kind: str) -> tuple[int, ...]:
        return self.slide_states if kind == "slide" else self.tap_states


class ScoringConfig(_Section):
    ll_weight: float = Field(0.5, ge=0, le=1)
    slope: float = Field(1.0, gt=0)
    ll_std_floor: float = Field(1e-3, gt=0)
    min_enroll: int = Field(20, ge=1)


class EngineConfig(_Section):
    k: int = Field(10, ge=1)
    threshold_mode: Literal["balanced", "zero_frr_quantile", "zero_far_guard"] = "balanced"
    calibration_fraction: float = Field(0.2, ge=0, lt=1)


class EvaluationConfig(_Section):
    k_grid: tuple[int, ...] = tuple(range(1, 26))
    train_sessions: tuple[int, ...] = (1, 2)
    modes: tuple[Literal["slide", "tap", "mixed"], ...] = ("slide", "tap", "mixed")
    channels: tuple[Literal["touch", "vibration", "rotation"], ...] = ("touch", "vibration", "rotation")

    @field_validator("k_grid")
    @classmethod
    def _k_positive(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError("k_grid entries must be >= 1")
        return tuple(sorted(set(v)))


class RunConfig(_Section):
    version: Literal[1] = CONFIG_VERSION
    seed: int = 0
    preprocess: PreprocessConfig = PreprocessConfig()
    hmm: HmmConfig = HmmConfig()
    scoring: ScoringConfig = ScoringConfig()
    engine: EngineConfig = EngineConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @model_validator(mode="after")
    def _touch_required(self):
        if "touch" not in self.evaluation.channels:
            raise ValueError("evaluation.channels must include 'touch'")
        return self

    def hash(self) -> str:
        return stable_hash(self.model_dump(mode="json"))

    def preprocess_hash(self) -> str:
        return stable_hash(self.preprocess.model_dump(mode="json"))

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return self.model_copy(update={"seed": int(seed)})


def stable_hash(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a JSON or YAML config file; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
