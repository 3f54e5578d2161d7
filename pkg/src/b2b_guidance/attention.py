"""Toy cross-attention layer and deterministic denoiser.

The attention map of token l is a softmax over spatial cells of
<emb_l, z[:, r, c]> / sqrt(C), i.e. a single-head dot-product
cross-attention whose grid is the latent grid. The denoiser is a DDIM
sampler whose noise prediction is the run's own noise, so an unguided chain
lands exactly on the run's target pattern and any guidance applied to the
latent carries through to the end of sampling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from b2b_guidance.errors import ContractViolation

Latent = np.ndarray


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def check_latent(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ContractViolation(f"latent must have shape (C, h, w), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ContractViolation("latent contains non-finite values")
    return z


@dataclass(frozen=True)
class TokenEmbedding:
    """One fixed C-dimensional vector per prompt token."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ContractViolation(f"token embedding must have shape (L, C), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ContractViolation("token embedding contains non-finite values")
        object.__setattr__(self, "vectors", _readonly(vectors))

    @property
    def n_tokens(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


def make_token_embedding(n_tokens: int, channels: int, rng: np.random.Generator) -> TokenEmbedding:
    """Random unit vectors, orthonormal whenever n_tokens <= channels."""
    gaussian = rng.standard_normal((n_tokens, channels))
    if n_tokens <= channels:
        q, r = np.linalg.qr(gaussian.T)
        # fix the sign ambiguity of QR so the result is a function of the draw
        vectors = (q * np.sign(np.diag(r))).T
    else:
        vectors = gaussian / np.linalg.norm(gaussian, axis=1, keepdims=True)
    return TokenEmbedding(vectors)


@dataclass(frozen=True)
class AttentionStack:
    """L spatial attention distributions, each summing to one."""

    maps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "maps", _readonly(self.maps))

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]

    def __getitem__(self, token_index: int) -> np.ndarray:
        return self.maps[token_index]


def _scores(z: np.ndarray, emb: TokenEmbedding) -> np.ndarray:
    if emb.channels != z.shape[0]:
        raise ContractViolation(
            f"embedding dimension {emb.channels} does not match latent channels {z.shape[0]}"
        )
    return np.einsum("lc,chw->lhw", emb.vectors, z) / np.sqrt(z.shape[0])


def _spatial_softmax(scores: np.ndarray) -> np.ndarray:
    flat = scores.reshape(scores.shape[0], -1)
    flat = flat - flat.max(axis=1, keepdims=True)
    weights = np.exp(flat)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights.reshape(scores.shape)


def compute_attention(z: Latent, emb: TokenEmbedding) -> AttentionStack:
    """Cross-attention maps of every token over the latent grid."""
    z = check_latent(z)
    return AttentionStack(_spatial_softmax(_scores(z, emb)))


def attention_jacobian_vector(
    z: Latent,
    emb: TokenEmbedding,
    cotangent: np.ndarray,
    attention: Optional[AttentionStack] = None,
) -> np.ndarray:
    """Reverse-mode product (dA/dz)^T . cotangent through the spatial softmax."""
    z = check_latent(z)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    expected = (emb.n_tokens,) + z.shape[1:]
    if cotangent.shape != expected:
        raise ContractViolation(f"cotangent shape {cotangent.shape} does not match attention shape {expected}")
    maps = attention.maps if attention is not None else compute_attention(z, emb).maps

    inner = np.sum(maps * cotangent, axis=(1, 2), keepdims=True)
    d_scores = maps * (cotangent - inner)
    return np.einsum("lc,lhw->chw", emb.vectors, d_scores) / np.sqrt(z.shape[0])


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal rates; index 0 is the clean end (1.0), index T the noisiest."""

    alphas_cumprod: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if values.ndim != 1 or values.size < 2:
            raise ContractViolation("schedule needs at least one step")
        if values[0] != 1.0 or np.any(values <= 0.0) or np.any(values > 1.0):
            raise ContractViolation("schedule coefficients must lie in (0, 1] with 1 at t=0")
        if np.any(np.diff(values) > 0.0):
            raise ContractViolation("schedule coefficients must not increase with the timestep")
        object.__setattr__(self, "alphas_cumprod", _readonly(values))

    @classmethod
    def linear(cls, total_steps: int, beta_start: float = 1e-3, beta_end: float = 4e-2) -> "NoiseSchedule":
        if total_steps < 1:
            raise ContractViolation(f"total_steps must be >= 1, got {total_steps}")
        betas = np.linspace(beta_start, beta_end, total_steps)
        return cls(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    @property
    def total_steps(self) -> int:
        return self.alphas_cumprod.size - 1

    def signal(self, t: int) -> float:
        return float(np.sqrt(self.alphas_cumprod[t]))

    def noise_level(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alphas_cumprod[t]))


@dataclass(frozen=True)
class SamplerState:
    """Position of a deterministic denoising chain.

    ``timestep`` runs T..1 while sampling and is 0 once the chain has finished.
    ``seed`` names the run the chain belongs to and is carried through every step.
    """

    timestep: int
    latent: np.ndarray
    schedule: NoiseSchedule
    target: np.ndarray
    noise: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.timestep <= self.schedule.total_steps:
            raise ContractViolation(
                f"timestep {self.timestep} outside [0, {self.schedule.total_steps}]"
            )
        for name in ("latent", "target", "noise"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @property
    def finished(self) -> bool:
        return self.timestep == 0

    def predict_clean(self, z: Optional[np.ndarray] = None) -> np.ndarray:
        """Denoiser estimate of the clean latent from ``z`` (default: the current latent)."""
        t = self.timestep
        z = self.latent if z is None else z
        return (z - self.schedule.noise_level(t) * self.noise) / self.schedule.signal(t)


def start_sampler(
    initial: Latent,
    target: np.ndarray,
    schedule: NoiseSchedule,
    seed: int = 0,
) -> SamplerState:
    """Chain starting at ``initial`` whose unguided end point is ``target``."""
    initial = check_latent(initial)
    target = check_latent(target)
    if initial.shape != target.shape:
        raise ContractViolation(f"initial latent {initial.shape} and target {target.shape} differ in shape")
    T = schedule.total_steps
    noise_level = schedule.noise_level(T)
    if noise_level == 0.0:
        raise ContractViolation("noisiest timestep carries no noise")
    noise = (initial - schedule.signal(T) * target) / noise_level
    return SamplerState(timestep=T, latent=initial, schedule=schedule, target=target, noise=noise, seed=seed)


def denoise_step(state: SamplerState, guidance_delta: Optional[np.ndarray] = None) -> SamplerState:
    """Apply ``guidance_delta`` (if any), then take one DDIM step t -> t-1."""
    if state.finished:
        raise ContractViolation("sampling already finished (t=0)")
    z = state.latent
    if guidance_delta is not None:
        guidance_delta = np.asarray(guidance_delta, dtype=np.float64)
        if guidance_delta.shape != z.shape:
            raise ContractViolation(f"guidance delta shape {guidance_delta.shape} does not match latent {z.shape}")
        z = z + guidance_delta
    t = state.timestep
    clean = state.predict_clean(z)
    schedule = state.schedule
    next_latent = schedule.signal(t - 1) * clean + schedule.noise_level(t - 1) * state.noise
    return SamplerState(
        timestep=t - 1,
        latent=next_latent,
        schedule=schedule,
        target=state.target,
        noise=state.noise,
        seed=state.seed,
    )


def spawn_generators(seed: int, names: Sequence[str]) -> dict:
    """Independent, named random streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}
