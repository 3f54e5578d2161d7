"""Run configuration files.

A configuration file is a JSON object; every key is optional and unknown
keys are rejected. ``guided_fraction`` and ``guided_steps`` are mutually
exclusive ways of choosing the guided timesteps.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from b2b_guidance.errors import B2BError, ConfigError
from b2b_guidance.guidance import GuidanceConfig, default_guided_steps
from b2b_guidance.rewards import RewardWeights


class ConfigDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = 8000.0
    lambda_a: float = 0.001
    lambda_iou: float = 0.01
    mainbox_weight: float = 1.0
    outbox_weight: float = 1.0
    n_sliding: int = 4
    total_steps: int = 50
    guided_fraction: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    guided_steps: Optional[List[int]] = None
    grid: Tuple[int, int] = (16, 16)
    channels: int = Field(default=4, ge=1)
    seed: int = 0
    max_backtracks: int = 8
    backtrack: bool = True
    beta_start: float = 1e-3
    beta_end: float = 4e-2
    target_scale: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """Guidance settings plus the shape of the toy model they run on."""

    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    grid: Tuple[int, int] = (16, 16)
    channels: int = 4

    def __post_init__(self):
        h, w = self.grid
        if h < 1 or w < 1:
            raise ConfigError(f"grid must be at least 1x1, got {h}x{w}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        object.__setattr__(self, "grid", (int(h), int(w)))

    def with_overrides(
        self,
        seed: Optional[int] = None,
        backtrack: Optional[bool] = None,
        weights: Optional[RewardWeights] = None,
    ) -> "RunConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if backtrack is not None:
            changes["backtrack"] = backtrack
        if weights is not None:
            changes["weights"] = weights
        return replace(self, guidance=replace(self.guidance, **changes)) if changes else self

    def to_document(self) -> dict:
        g = self.guidance
        return {
            "gamma": g.gamma,
            "lambda_a": g.weights.lambda_a,
            "lambda_iou": g.weights.lambda_iou,
            "mainbox_weight": g.weights.mainbox,
            "outbox_weight": g.weights.outbox,
            "n_sliding": g.n_sliding,
            "total_steps": g.total_steps,
            "guided_steps": sorted(g.guided_steps),
            "grid": list(self.grid),
            "channels": self.channels,
            "seed": g.seed,
            "max_backtracks": g.max_backtracks,
            "backtrack": g.backtrack,
            "beta_start": g.beta_start,
            "beta_end": g.beta_end,
            "target_scale": g.target_scale,
        }


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"{location}: {first['msg']}"


def config_from_document(data: dict) -> RunConfig:
    try:
        document = ConfigDocument.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_first_error(e)}") from e
    return _build(document)


def parse_run_config(text: str) -> RunConfig:
    try:
        document = ConfigDocument.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_first_error(e)}") from e
    return _build(document)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"invalid configuration: not valid UTF-8 ({e.reason} at byte {e.start})") from e
    return parse_run_config(text)


def _build(document: ConfigDocument) -> RunConfig:
    if document.guided_fraction is not None and document.guided_steps is not None:
        raise ConfigError("give either guided_fraction or guided_steps, not both")
    # an explicit list, or the noisiest fraction (half by default)
    if document.guided_steps is not None:
        steps = frozenset(document.guided_steps)
    else:
        fraction = 0.5 if document.guided_fraction is None else document.guided_fraction
        steps = default_guided_steps(document.total_steps, fraction)
    try:
        weights = RewardWeights(
            lambda_iou=document.lambda_iou,
            lambda_a=document.lambda_a,
            mainbox=document.mainbox_weight,
            outbox=document.outbox_weight,
        )
        guidance = GuidanceConfig(
            gamma=document.gamma,
            weights=weights,
            n_sliding=document.n_sliding,
            total_steps=document.total_steps,
            guided_steps=steps,
            seed=document.seed,
            max_backtracks=document.max_backtracks,
            backtrack=document.backtrack,
            beta_start=document.beta_start,
            beta_end=document.beta_end,
            target_scale=document.target_scale,
        )
    except ConfigError:
        raise
    except B2BError as e:
        raise ConfigError(str(e)) from e
    return RunConfig(guidance=guidance, grid=document.grid, channels=document.channels)
