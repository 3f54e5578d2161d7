#!/usr/bin/env python

import json
from typing import Any, Dict, Optional, Union

from fastmcp import FastMCP

from b2b_guidance.config import RunConfig, config_from_document
from b2b_guidance.guidance import gradient_check as check_gradient, make_run_inputs, run_guided_sampling
from b2b_guidance.layout import parse_layout
from b2b_guidance.logging_config import get_logger
from b2b_guidance.rewards import total_reward
from b2b_guidance.scenarios import execute_run

mcp = FastMCP("B2B Guidance")

logger = get_logger()


def _layout_text(layout: Union[str, Dict[str, Any]]) -> str:
    return layout if isinstance(layout, str) else json.dumps(layout)


def _run_config(config: Optional[Dict[str, Any]]) -> RunConfig:
    return config_from_document(config) if config else RunConfig()


@mcp.tool(
    description="Score a layout's reward terms on the toy denoiser's unguided attention",
    annotations={
        "title": "Score Layout",
        "icon": "📐",
        "readOnlyHint": True,
        "destructiveHint": False,
        "idempotentHint": True,
        "openWorldHint": False
    }
)
async def score_layout(
    layout: Union[str, Dict[str, Any]],
    config: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Evaluate every reward term of a layout without steering.

    Args:
        layout: Layout document (JSON text or object) with tokens, objects and attributes.
        config: Optional run configuration; defaults are used for missing keys.

    Returns:
        Per-object and per-attribute reward terms and the grand total
    """
    parsed = parse_layout(_layout_text(layout))
    run_config = _run_config(config)
    guidance = run_config.guidance.unguided()
    inputs = make_run_inputs(parsed, guidance, run_config.channels, run_config.grid)
    result = run_guided_sampling(guidance, parsed, inputs.embedding, inputs.initial, target=inputs.target)
    report = total_reward(result.attention, parsed, result.masks, guidance.weights)
    logger.info("Layout scored", objects=parsed.n_objects, attributes=parsed.n_attributes, grand_total=report.grand_total)
    return report.to_dict()


@mcp.tool(
    description="Run reward-guided sampling for a layout and report attention metrics",
    annotations={
        "title": "Run Guidance",
        "icon": "🧭",
        "readOnlyHint": True,
        "destructiveHint": False,
        "idempotentHint": True,
        "openWorldHint": False
    }
)
async def run_guidance(
    layout: Union[str, Dict[str, Any]],
    config: Optional[Dict[str, Any]] = None,
    guided: bool = True,
) -> Dict[str, Any]:
    """Sample once, guided or not, and summarise the outcome.

    Args:
        layout: Layout document (JSON text or object).
        config: Optional run configuration; defaults are used for missing keys.
        guided: Set to false for the unguided baseline.

    Returns:
        Metrics (schema 1) plus a summary of the guidance trace
    """
    parsed = parse_layout(_layout_text(layout))
    outcome = execute_run(parsed, _run_config(config), scenario="tool", guided=guided)
    trace = outcome.result.trace
    result = outcome.metrics.to_dict()
    result["trace"] = {
        "guided_steps": len(trace),
        "monotone": trace.monotone,
        "backtracks": sum(entry.backtracks for entry in trace),
        "reward_before": trace.entries[0].before.grand_total if len(trace) else None,
        "reward_after": trace.entries[-1].after.grand_total if len(trace) else None,
    }
    logger.info("Guidance run completed", guided=guided, guided_steps=len(trace))
    return result


@mcp.tool(
    description="Check the analytic reward gradient against finite differences",
    annotations={
        "title": "Gradient Check",
        "icon": "🧮",
        "readOnlyHint": True,
        "destructiveHint": False,
        "idempotentHint": True,
        "openWorldHint": False
    }
)
async def gradient_check(seeds: int = 1) -> Dict[str, Any]:
    """Run the finite-difference gradient check on ``seeds`` random instances.

    Args:
        seeds: Number of seeded instances, starting at seed 0.

    Returns:
        Worst relative error, pass flag and per-seed results
    """
    if seeds < 1:
        raise ValueError(f"seeds must be >= 1, got {seeds}")
    results = [check_gradient(seed) for seed in range(seeds)]
    return {
        "max_relative_error": max(r.max_relative_error for r in results),
        "passed": all(r.passed for r in results),
        "seeds": [
            {"seed": r.seed, "max_relative_error": r.max_relative_error, "worst_coordinate": list(r.worst_coordinate)}
            for r in results
        ],
    }
