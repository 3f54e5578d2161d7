"""Reward-guided latent updates during denoising.

At every scheduled timestep the denoiser's cross-attention is read from its
clean-latent estimate, the layout rewards are evaluated, and the latent takes
one gradient-ascent step on their sum (with optional step halving so the
reward never decreases). Masks and sliding boxes are drawn once per run.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from b2b_guidance.attention import (
    AttentionStack,
    NoiseSchedule,
    TokenEmbedding,
    check_latent,
    compute_attention,
    attention_jacobian_vector,
    denoise_step,
    make_token_embedding,
    spawn_generators,
    start_sampler,
)
from b2b_guidance.errors import ConfigError, ContractViolation, NumericalError, SamplingAborted
from b2b_guidance.layout import (
    BoundingBox,
    LayoutAttribute,
    LayoutObject,
    LayoutSpec,
    rasterize_mask,
    sample_sliding_boxes,
)
from b2b_guidance.logging_config import get_logger
from b2b_guidance.rewards import ObjectMasks, RewardReport, RewardWeights, reward_cotangent, total_reward

logger = get_logger()

RUN_STREAMS = ("embedding", "target", "initial", "sliding")


def default_guided_steps(total_steps: int, fraction: float = 0.5) -> FrozenSet[int]:
    """The noisiest ``fraction`` of the chain: t >= T * (1 - fraction)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"guided_fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return frozenset()
    first = max(1, int(np.ceil(round(total_steps * (1.0 - fraction), 9))))
    return frozenset(range(first, total_steps + 1))


@dataclass(frozen=True)
class GuidanceConfig:
    """Everything that determines a guided run besides the layout."""

    gamma: float = 8000.0
    weights: RewardWeights = field(default_factory=RewardWeights)
    n_sliding: int = 4
    total_steps: int = 50
    guided_steps: Optional[FrozenSet[int]] = None
    seed: int = 0
    max_backtracks: int = 8
    backtrack: bool = True
    beta_start: float = 1e-3
    beta_end: float = 4e-2
    target_scale: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.n_sliding < 1:
            raise ConfigError(f"n_sliding must be >= 1, got {self.n_sliding}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.max_backtracks < 0:
            raise ConfigError(f"max_backtracks must be >= 0, got {self.max_backtracks}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.target_scale < 0:
            raise ConfigError(f"target_scale must be >= 0, got {self.target_scale}")
        steps = default_guided_steps(self.total_steps) if self.guided_steps is None else self.guided_steps
        steps = frozenset(int(t) for t in steps)
        outside = sorted(t for t in steps if t < 1 or t > self.total_steps)
        if outside:
            raise ConfigError(f"guided steps {outside} are outside [1, {self.total_steps}]")
        object.__setattr__(self, "guided_steps", steps)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.total_steps, self.beta_start, self.beta_end)

    def unguided(self) -> "GuidanceConfig":
        return replace(self, guided_steps=frozenset())


@dataclass(frozen=True)
class TraceEntry:
    timestep: int
    before: RewardReport
    after: RewardReport
    grad_norm: float
    backtracks: int

    def to_row(self) -> dict:
        return {
            "timestep": self.timestep,
            "r_mainbox_pre": self.before.mainbox,
            "r_outbox_pre": self.before.outbox,
            "r_iou_pre": self.before.iou,
            "r_kl_pre": self.before.kl,
            "r_mainbox_post": self.after.mainbox,
            "r_outbox_post": self.after.outbox,
            "r_iou_post": self.after.iou,
            "r_kl_post": self.after.kl,
            "grad_norm": self.grad_norm,
            "backtracks": self.backtracks,
        }


TRACE_COLUMNS = (
    "timestep",
    "r_mainbox_pre", "r_outbox_pre", "r_iou_pre", "r_kl_pre",
    "r_mainbox_post", "r_outbox_post", "r_iou_post", "r_kl_post",
    "grad_norm", "backtracks",
)


@dataclass(frozen=True)
class GuidanceTrace:
    entries: Tuple[TraceEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def rows(self) -> List[dict]:
        return [entry.to_row() for entry in self.entries]

    @property
    def monotone(self) -> bool:
        return all(e.after.grand_total >= e.before.grand_total for e in self.entries)


@dataclass(frozen=True)
class GuidanceResult:
    final: np.ndarray
    attention: AttentionStack
    trace: GuidanceTrace
    masks: Dict[int, ObjectMasks]
    trajectory: Tuple[np.ndarray, ...] = ()


@dataclass(frozen=True)
class RunInputs:
    """Seeded ingredients of a run: token embedding, target pattern and initial latent."""

    embedding: TokenEmbedding
    target: np.ndarray
    initial: np.ndarray


def make_run_inputs(
    layout: LayoutSpec, config: GuidanceConfig, channels: int, grid: Tuple[int, int]
) -> RunInputs:
    streams = spawn_generators(config.seed, RUN_STREAMS)
    h, w = grid
    embedding = make_token_embedding(layout.n_tokens, channels, streams["embedding"])
    target = config.target_scale * streams["target"].standard_normal((channels, h, w))
    initial = streams["initial"].standard_normal((channels, h, w))
    return RunInputs(embedding=embedding, target=target, initial=initial)


def build_masks(layout: LayoutSpec, h: int, w: int, n_sliding: int, seed: int) -> Dict[int, ObjectMasks]:
    """Main-box and sliding masks for every object, drawn from the run's sliding stream."""
    rng = spawn_generators(seed, RUN_STREAMS)["sliding"]
    masks = {}
    for i, obj in enumerate(layout.objects):
        sliding = sample_sliding_boxes(obj.box, n_sliding, h, w, rng)
        masks[i] = ObjectMasks(inbox=rasterize_mask(obj.box, h, w), sliding=sliding.masks)
    return masks


def reward_gradient(
    z: np.ndarray,
    emb: TokenEmbedding,
    layout: LayoutSpec,
    masks: Dict[int, ObjectMasks],
    weights: RewardWeights,
) -> np.ndarray:
    """Exact gradient of the grand total reward with respect to ``z``."""
    z = check_latent(z)
    attn = compute_attention(z, emb)
    if not np.all(np.isfinite(attn.maps)):
        raise NumericalError("attention")
    grad = np.zeros_like(z)
    for term, cotangent in reward_cotangent(attn, layout, masks, weights).items():
        if not np.all(np.isfinite(cotangent)):
            raise NumericalError(term)
        grad += attention_jacobian_vector(z, emb, cotangent, attention=attn)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("gradient")
    return grad


def guided_update(
    z: np.ndarray,
    gradient: np.ndarray,
    gamma: float,
    max_backtracks: int,
    reward_fn: Callable[[np.ndarray], float],
) -> Tuple[np.ndarray, int]:
    """Ascent step ``z + gamma * 2**-b * gradient`` for the smallest b that does not lower the reward.

    Returns ``(z, max_backtracks + 1)`` unchanged when no step qualifies.
    """
    if not gamma > 0:
        raise ContractViolation(f"gamma must be > 0, got {gamma}")
    baseline = reward_fn(z)
    step = gamma
    # halve until the reward does not drop
    for b in range(max_backtracks + 1):
        candidate = z + step * gradient
        if np.all(np.isfinite(candidate)) and reward_fn(candidate) >= baseline:
            return candidate, b
        step *= 0.5
    return z, max_backtracks + 1


def run_guided_sampling(
    config: GuidanceConfig,
    layout: LayoutSpec,
    emb: TokenEmbedding,
    initial: np.ndarray,
    target: Optional[np.ndarray] = None,
) -> GuidanceResult:
    """Denoise from ``initial`` for t = T..1, steering the latent at the guided timesteps.

    ``target`` is the end point of the unguided chain; by default it is drawn
    from the run's seeded target stream.
    """
    initial = check_latent(initial)
    channels, h, w = initial.shape
    for i, obj in enumerate(layout.objects):
        if obj.token_index >= emb.n_tokens:
            raise ContractViolation(f"object {i} token index {obj.token_index} >= {emb.n_tokens} embeddings")
    for j, attribute in enumerate(layout.attributes):
        if attribute.token_index >= emb.n_tokens:
            raise ContractViolation(f"attribute {j} token index {attribute.token_index} >= {emb.n_tokens} embeddings")
    if target is None:
        target = make_run_inputs(layout, config, channels, (h, w)).target

    masks = build_masks(layout, h, w, config.n_sliding, config.seed)
    state = start_sampler(initial, target, config.schedule(), seed=config.seed)
    weights = config.weights
    log = logger.bind(seed=state.seed, total_steps=config.total_steps, guided_steps=len(config.guided_steps))
    log.info("Guided sampling started", objects=layout.n_objects, attributes=layout.n_attributes, grid=[h, w])

    entries = []
    trajectory = [state.latent]
    while not state.finished:
        t = state.timestep
        delta = None
        if t in config.guided_steps:
            # the denoiser reads attention from its clean estimate; d(clean)/dz = 1 / signal(t)
            signal = state.schedule.signal(t)

            def report_at(z, state=state):
                return total_reward(compute_attention(state.predict_clean(z), emb), layout, masks, weights)

            before = report_at(state.latent)
            gradient = reward_gradient(state.predict_clean(), emb, layout, masks, weights) / signal
            if config.backtrack:
                updated, backtracks = guided_update(
                    state.latent, gradient, config.gamma, config.max_backtracks,
                    lambda z: report_at(z).grand_total,
                )
            else:
                # plain ascent step, no halving
                updated, backtracks = state.latent + config.gamma * gradient, 0
            if not np.all(np.isfinite(updated)):
                log.error("Sampling aborted", timestep=t)
                raise SamplingAborted(t)
            after = report_at(updated)
            grad_norm = float(np.linalg.norm(gradient))
            if backtracks > config.max_backtracks:
                log.warning("Backtracking exhausted", timestep=t, grad_norm=grad_norm)
            log.debug(
                "Guided step",
                timestep=t,
                reward_before=before.grand_total,
                reward_after=after.grand_total,
                grad_norm=grad_norm,
                backtracks=backtracks,
            )
            entries.append(TraceEntry(t, before, after, grad_norm, backtracks))
            delta = updated - state.latent

        state = denoise_step(state, delta)
        if not np.all(np.isfinite(state.latent)):
            log.error("Sampling aborted", timestep=t)
            raise SamplingAborted(t)
        trajectory.append(state.latent)

    attention = compute_attention(state.latent, emb)
    final_report = total_reward(attention, layout, masks, weights)
    log.info("Guided sampling finished", final_reward=final_report.grand_total, guided=len(entries))
    return GuidanceResult(
        final=state.latent,
        attention=attention,
        trace=GuidanceTrace(tuple(entries)),
        masks=masks,
        trajectory=tuple(trajectory),
    )


@dataclass(frozen=True)
class GradientCheckResult:
    seed: int
    max_relative_error: float
    worst_coordinate: Tuple[int, int, int]
    probes: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < GRADCHECK_TOLERANCE


GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5


def random_instance(seed: int):
    """Small random (z, embedding, layout, masks, weights) for gradient checks."""
    rng = np.random.default_rng(seed)
    channels = int(rng.integers(2, 5))
    h = int(rng.integers(4, 9))
    w = int(rng.integers(4, 9))
    n_tokens = int(rng.integers(2, 5))
    z = rng.standard_normal((channels, h, w))
    emb = make_token_embedding(n_tokens, channels, rng)

    x0, y0 = rng.uniform(0.0, 0.4, size=2)
    x1, y1 = rng.uniform(0.6, 1.0, size=2)
    objects = (LayoutObject(0, BoundingBox(float(x0), float(y0), float(x1), float(y1))),)
    attributes = (LayoutAttribute(1, 0),)
    layout = LayoutSpec(prompt_tokens=tuple(f"t{k}" for k in range(n_tokens)), objects=objects, attributes=attributes)
    masks = build_masks(layout, h, w, n_sliding=2, seed=seed)
    weights = RewardWeights(
        lambda_iou=float(rng.integers(0, 2)),
        lambda_a=float(rng.integers(0, 2)),
    )
    return z, emb, layout, masks, weights


def gradient_check(seed: int, max_probes: int = 96) -> GradientCheckResult:
    """Compare reward_gradient with central finite differences on a random instance.

    At most ``max_probes`` coordinates are sampled. The reported error is
    norm-scaled: max_k |a_k - n_k| / max(||a||, ||n||) over the sampled
    analytic (a) and numeric (n) entries. It bounds the error relative to the
    whole gradient, which is looser than a per-coordinate relative error on
    coordinates much smaller than the norm.
    """
    z, emb, layout, masks, weights = random_instance(seed)
    analytic = reward_gradient(z, emb, layout, masks, weights)

    def reward(latent):
        return total_reward(compute_attention(latent, emb), layout, masks, weights).grand_total

    rng = np.random.default_rng(seed + 1_000_003)
    coordinates = list(np.ndindex(*z.shape))
    if len(coordinates) > max_probes:
        picks = rng.choice(len(coordinates), size=max_probes, replace=False)
        coordinates = [coordinates[k] for k in sorted(picks)]

    numeric = np.empty(len(coordinates))
    for k, coordinate in enumerate(coordinates):
        plus = z.copy()
        minus = z.copy()
        plus[coordinate] += GRADCHECK_STEP
        minus[coordinate] -= GRADCHECK_STEP
        numeric[k] = (reward(plus) - reward(minus)) / (2 * GRADCHECK_STEP)
    probed = np.array([analytic[c] for c in coordinates])

    scale = max(np.linalg.norm(probed), np.linalg.norm(numeric), 1e-12)
    errors = np.abs(probed - numeric) / scale
    worst = int(np.argmax(errors))
    result = GradientCheckResult(
        seed=seed,
        max_relative_error=float(errors.max()),
        worst_coordinate=tuple(int(v) for v in coordinates[worst]),
        probes=len(coordinates),
    )
    logger.debug("Gradient check", seed=seed, max_relative_error=result.max_relative_error, probes=result.probes)
    return result
