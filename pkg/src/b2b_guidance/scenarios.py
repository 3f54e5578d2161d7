"""Standard toy scenarios, single runs and the reward ablation grids."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from b2b_guidance.config import RunConfig
from b2b_guidance.guidance import GuidanceConfig, GuidanceResult, make_run_inputs, run_guided_sampling
from b2b_guidance.layout import BoundingBox, LayoutAttribute, LayoutObject, LayoutSpec
from b2b_guidance.logging_config import get_logger
from b2b_guidance.metrics import RunMetrics, compute_run_metrics
from b2b_guidance.rewards import RewardWeights

logger = get_logger()


def single_object() -> LayoutSpec:
    """One object whose box covers the central quarter of the grid."""
    return LayoutSpec(
        prompt="a ball",
        prompt_tokens=("a", "ball"),
        objects=(LayoutObject(1, BoundingBox(0.25, 0.25, 0.75, 0.75)),),
    )


def two_pairs() -> LayoutSpec:
    """Two side-by-side objects, each with a colour attribute."""
    return LayoutSpec(
        prompt="a red ball and a blue cube",
        prompt_tokens=("a", "red", "ball", "and", "a", "blue", "cube"),
        objects=(
            LayoutObject(2, BoundingBox(0.05, 0.25, 0.45, 0.75)),
            LayoutObject(6, BoundingBox(0.55, 0.25, 0.95, 0.75)),
        ),
        attributes=(LayoutAttribute(1, 0), LayoutAttribute(5, 1)),
    )


def two_pairs_config() -> RunConfig:
    # eight channels keep all seven token embeddings orthonormal
    return RunConfig(channels=8)


def binding_config() -> RunConfig:
    """Binding-weighted settings: a gentler step with the attribute reward at full weight."""
    return RunConfig(
        guidance=GuidanceConfig(gamma=40.0, weights=RewardWeights(lambda_a=1.0)),
        channels=8,
    )


SCENARIOS = {
    "single_object": (single_object, RunConfig),
    "two_pairs": (two_pairs, two_pairs_config),
}


def get_scenario(name: str) -> Tuple[LayoutSpec, RunConfig]:
    try:
        layout_factory, config_factory = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return layout_factory(), config_factory()


@dataclass(frozen=True)
class RunOutcome:
    result: GuidanceResult
    metrics: RunMetrics


def execute_run(layout: LayoutSpec, config: RunConfig, scenario: str, guided: bool = True) -> RunOutcome:
    """Seed the toy model from ``config`` and sample, with or without guidance."""
    guidance = config.guidance if guided else config.guidance.unguided()
    inputs = make_run_inputs(layout, guidance, config.channels, config.grid)
    result = run_guided_sampling(guidance, layout, inputs.embedding, inputs.initial, target=inputs.target)
    metrics = compute_run_metrics(result.attention, layout, scenario=scenario, guided=guided)
    return RunOutcome(result=result, metrics=metrics)


@dataclass(frozen=True)
class AblationVariant:
    table: str
    name: str
    mainbox: bool
    outbox: bool
    iou: bool
    attribute: bool

    def weights(self, base: RewardWeights) -> RewardWeights:
        return RewardWeights(
            lambda_iou=base.lambda_iou if self.iou else 0.0,
            lambda_a=base.lambda_a if self.attribute else 0.0,
            mainbox=base.mainbox if self.mainbox else 0.0,
            outbox=base.outbox if self.outbox else 0.0,
        )


GENERATION_ABLATION = (
    AblationVariant("generation", "none", False, False, False, False),
    AblationVariant("generation", "mainbox", True, False, False, False),
    AblationVariant("generation", "outbox", False, True, False, False),
    AblationVariant("generation", "iou", False, False, True, False),
    AblationVariant("generation", "all", True, True, True, False),
)

BINDING_ABLATION = (
    AblationVariant("binding", "none", False, False, False, False),
    AblationVariant("binding", "outbox+iou", False, True, True, False),
    AblationVariant("binding", "mainbox+outbox+iou", True, True, True, False),
    AblationVariant("binding", "outbox+iou+attribute", False, True, True, True),
    AblationVariant("binding", "all", True, True, True, True),
)

ABLATION_VARIANTS = GENERATION_ABLATION + BINDING_ABLATION

ABLATION_COLUMNS = (
    "table", "variant", "mainbox", "outbox", "iou", "attribute", "seeds",
    "inbox_mass_fraction", "centroid_offset", "attribute_kl", "monotone",
)


@dataclass(frozen=True)
class AblationRow:
    variant: AblationVariant
    seeds: Tuple[int, ...]
    inbox_mass_fraction: float
    centroid_offset: float
    attribute_kl: Optional[float]
    monotone: bool

    def to_row(self) -> dict:
        v = self.variant
        return {
            "table": v.table,
            "variant": v.name,
            "mainbox": int(v.mainbox),
            "outbox": int(v.outbox),
            "iou": int(v.iou),
            "attribute": int(v.attribute),
            "seeds": len(self.seeds),
            "inbox_mass_fraction": repr(self.inbox_mass_fraction),
            "centroid_offset": repr(self.centroid_offset),
            "attribute_kl": "" if self.attribute_kl is None else repr(self.attribute_kl),
            "monotone": int(self.monotone),
        }


def run_ablation(
    layout: LayoutSpec,
    config: RunConfig,
    n_seeds: int = 5,
    variants: Sequence[AblationVariant] = ABLATION_VARIANTS,
    scenario: str = "ablation",
) -> List[AblationRow]:
    """Run every variant on seeds ``config.seed .. config.seed + n_seeds - 1`` and average the metrics."""
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    seeds = tuple(config.guidance.seed + k for k in range(n_seeds))
    base = config.guidance.weights
    rows = []
    for variant in variants:
        fractions, offsets, kls = [], [], []
        monotone = True
        for seed in seeds:
            outcome = execute_run(
                layout, config.with_overrides(seed=seed, weights=variant.weights(base)), scenario
            )
            fractions.append(outcome.metrics.mean_inbox_mass_fraction)
            offsets.append(outcome.metrics.mean_centroid_offset)
            if outcome.metrics.attributes:
                kls.append(outcome.metrics.mean_attribute_kl)
            monotone = monotone and outcome.result.trace.monotone
        row = AblationRow(
            variant=variant,
            seeds=seeds,
            inbox_mass_fraction=float(np.mean(fractions)),
            centroid_offset=float(np.mean(offsets)),
            attribute_kl=float(np.mean(kls)) if kls else None,
            monotone=monotone,
        )
        logger.info(
            "Ablation variant finished",
            table=variant.table,
            variant=variant.name,
            inbox_mass_fraction=row.inbox_mass_fraction,
            attribute_kl=row.attribute_kl,
        )
        rows.append(row)
    return rows


def ablation_lookup(rows: Sequence[AblationRow]) -> Dict[Tuple[str, str], AblationRow]:
    return {(row.variant.table, row.variant.name): row for row in rows}
