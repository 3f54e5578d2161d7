"""Tests for the toy attention layer and the denoiser."""

import numpy as np
import pytest

from b2b_guidance.attention import (
    NoiseSchedule,
    TokenEmbedding,
    attention_jacobian_vector,
    compute_attention,
    denoise_step,
    make_token_embedding,
    spawn_generators,
    start_sampler,
)
from b2b_guidance.errors import ContractViolation


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestEmbedding:

    def test_orthonormal_when_tokens_fit(self, rng):
        emb = make_token_embedding(4, 8, rng)
        np.testing.assert_allclose(emb.vectors @ emb.vectors.T, np.eye(4), atol=1e-12)

    def test_unit_norm_when_tokens_exceed_channels(self, rng):
        emb = make_token_embedding(6, 3, rng)
        np.testing.assert_allclose(np.linalg.norm(emb.vectors, axis=1), 1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ContractViolation):
            TokenEmbedding(np.array([[np.nan, 0.0]]))


class TestComputeAttention:

    def test_maps_are_distributions(self, rng):
        z = rng.standard_normal((4, 8, 8))
        attn = compute_attention(z, make_token_embedding(3, 4, rng))
        assert attn.maps.shape == (3, 8, 8)
        assert np.all(attn.maps >= 0)
        np.testing.assert_allclose(attn.maps.sum(axis=(1, 2)), 1.0, atol=1e-12)

    def test_zero_latent_is_uniform(self, rng):
        attn = compute_attention(np.zeros((2, 4, 4)), make_token_embedding(2, 2, rng))
        np.testing.assert_allclose(attn.maps, 1.0 / 16)

    def test_two_by_two_single_channel(self):
        z = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        attn = compute_attention(z, TokenEmbedding(np.array([[1.0]])))
        expected = np.array([np.e, 1.0, 1.0, 1.0]) / (np.e + 3.0)
        np.testing.assert_allclose(attn[0].ravel(), expected, rtol=1e-12)
        assert attn[0][0, 0] == pytest.approx(0.4754, abs=1e-4)
        assert attn[0][1, 1] == pytest.approx(0.1749, abs=1e-4)

    def test_positive_scaling_keeps_argmax(self, rng):
        z = rng.standard_normal((3, 6, 6))
        emb = TokenEmbedding(np.eye(3))
        before = compute_attention(z, emb).maps.reshape(3, -1).argmax(axis=1)
        after = compute_attention(4.5 * z, emb).maps.reshape(3, -1).argmax(axis=1)
        assert before.tolist() == after.tolist()

    def test_perturbing_one_token_changes_only_its_map(self, rng):
        z = rng.standard_normal((4, 6, 6))
        emb = make_token_embedding(3, 4, rng)
        vectors = emb.vectors.copy()
        vectors[1] += 0.3 * rng.standard_normal(4)
        before = compute_attention(z, emb).maps
        after = compute_attention(z, TokenEmbedding(vectors)).maps
        np.testing.assert_allclose(after[0], before[0], rtol=1e-13, atol=0)
        np.testing.assert_allclose(after[2], before[2], rtol=1e-13, atol=0)
        assert not np.allclose(after[1], before[1])

    def test_identical_inputs_are_bit_identical(self, rng):
        z = rng.standard_normal((2, 5, 5))
        emb = make_token_embedding(2, 2, rng)
        np.testing.assert_array_equal(compute_attention(z, emb).maps, compute_attention(z, emb).maps)

    def test_large_scores_stay_finite(self, rng):
        z = 1e4 * rng.standard_normal((2, 4, 4))
        attn = compute_attention(z, make_token_embedding(2, 2, rng))
        assert np.all(np.isfinite(attn.maps))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            compute_attention(np.zeros((3, 4, 4)), make_token_embedding(2, 2, rng))

    def test_non_finite_latent(self, rng):
        z = np.zeros((2, 4, 4))
        z[0, 0, 0] = np.inf
        with pytest.raises(ContractViolation):
            compute_attention(z, make_token_embedding(2, 2, rng))


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_vector_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, 5, 6))
    emb = make_token_embedding(3, 3, rng)
    cotangent = rng.standard_normal((3, 5, 6))
    analytic = attention_jacobian_vector(z, emb, cotangent)

    step = 1e-6
    numeric = np.zeros_like(z)
    for index in np.ndindex(*z.shape):
        plus, minus = z.copy(), z.copy()
        plus[index] += step
        minus[index] -= step
        numeric[index] = np.sum(
            (compute_attention(plus, emb).maps - compute_attention(minus, emb).maps) * cotangent
        ) / (2 * step)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_zero_cotangent_gives_zero_gradient(rng):
    z = rng.standard_normal((3, 4, 4))
    emb = make_token_embedding(2, 3, rng)
    assert not attention_jacobian_vector(z, emb, np.zeros((2, 4, 4))).any()


def test_constant_cotangent_per_token_gives_zero_gradient(rng):
    z = rng.standard_normal((3, 4, 4))
    emb = make_token_embedding(2, 3, rng)
    # each map sums to one, so a per-token constant cannot move the reward
    cotangent = np.stack([np.full((4, 4), 2.5), np.full((4, 4), -7.0)])
    np.testing.assert_allclose(attention_jacobian_vector(z, emb, cotangent), 0.0, atol=1e-12)


def test_jacobian_vector_rejects_wrong_cotangent(rng):
    with pytest.raises(ContractViolation):
        attention_jacobian_vector(np.zeros((2, 4, 4)), make_token_embedding(2, 2, rng), np.zeros((3, 4, 4)))


class TestSchedule:

    def test_linear_schedule_decreases(self):
        schedule = NoiseSchedule.linear(50)
        values = schedule.alphas_cumprod
        assert schedule.total_steps == 50
        assert values[0] == 1.0
        assert np.all(np.diff(values) < 0)
        assert 0.3 < values[-1] < 0.4

    def test_rejects_increasing(self):
        with pytest.raises(ContractViolation):
            NoiseSchedule(np.array([1.0, 0.5, 0.7]))


class TestSampler:

    def _state(self, seed=0, steps=20):
        streams = spawn_generators(seed, ("target", "initial"))
        target = streams["target"].standard_normal((2, 4, 4))
        initial = streams["initial"].standard_normal((2, 4, 4))
        return start_sampler(initial, target, NoiseSchedule.linear(steps), seed=seed), target

    def test_unguided_chain_ends_on_target(self):
        state, target = self._state(seed=4)
        steps = 0
        while not state.finished:
            np.testing.assert_allclose(state.predict_clean(), target, atol=1e-10)
            state = denoise_step(state)
            steps += 1
        np.testing.assert_allclose(state.latent, target, atol=1e-10)
        assert steps == 20
        assert state.seed == 4

    def test_delta_persists_to_the_end(self):
        state, target = self._state()
        delta = np.full(state.latent.shape, 0.1)
        signal = state.schedule.signal(state.timestep)
        state = denoise_step(state, delta)
        while not state.finished:
            state = denoise_step(state)
        np.testing.assert_allclose(state.latent, target + delta / signal, atol=1e-10)

    def test_step_after_finish_raises(self):
        state, _ = self._state(steps=1)
        state = denoise_step(state)
        with pytest.raises(ContractViolation):
            denoise_step(state)

    def test_wrong_delta_shape(self):
        state, _ = self._state()
        with pytest.raises(ContractViolation):
            denoise_step(state, np.zeros((3, 4, 4)))


def test_spawned_streams_are_reproducible_and_distinct():
    a = spawn_generators(5, ("embedding", "target"))
    b = spawn_generators(5, ("embedding", "target"))
    assert a["embedding"].random() == b["embedding"].random()
    assert a["target"].random() != spawn_generators(5, ("embedding", "target"))["embedding"].random()
