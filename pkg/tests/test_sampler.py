import numpy as np
import pytest

from blockdiff.model import forward
from blockdiff.sampler import (
    DecodeSession,
    GenerationPlan,
    adjust_probs,
    generate_sequential,
    generate_strided,
    sample_token,
)
from blockdiff.schedule import strided_permutation

from conftest import rng_for, tiny_model


# -- categorical sampling ---------------------------------------------------------

def test_one_hot_is_deterministic():
    probs = np.array([0.0, 0.0, 1.0, 0.0])
    for seed in range(20):
        assert sample_token(probs, 1.0, rng_for(seed)) == 2


def test_zero_temperature_limit_is_argmax():
    probs = np.array([0.2, 0.5, 0.3])
    for seed in range(20):
        assert sample_token(probs, 1e-9, rng_for(seed)) == 1


def test_empirical_frequencies():
    probs = np.array([0.2, 0.3, 0.5])
    rng = rng_for(5)
    counts = np.zeros(3)
    draws = 100_000
    for _ in range(draws):
        counts[sample_token(probs, 1.0, rng)] += 1
    assert np.abs(counts / draws - probs).max() < 0.005


def test_temperature_reshapes_distribution():
    probs = np.array([0.25, 0.75])
    hot = adjust_probs(probs, 2.0)
    cold = adjust_probs(probs, 0.5)
    assert hot[1] < 0.75 < cold[1]
    assert abs(hot.sum() - 1.0) < 1e-12 and abs(cold.sum() - 1.0) < 1e-12
    assert hot.dtype == np.float64


def test_non_finite_probabilities_rejected():
    with pytest.raises(ValueError):
        sample_token(np.array([0.5, np.nan]), 1.0, rng_for(0))
    with pytest.raises(ValueError):
        sample_token(np.array([0.5, np.inf]), 1.0, rng_for(0))
    with pytest.raises(ValueError):
        adjust_probs(np.array([0.5, 0.5]), 0.0)


# -- generation plans --------------------------------------------------------------

def test_generation_plan_groups():
    plan = strided_permutation(8, 2)
    gen = GenerationPlan.from_block_plan(plan)
    gen.validate()
    assert [g.tolist() for g in gen.groups] == [[0], [4], [1, 5], [2, 6], [3, 7]]


# -- sequential decoding ------------------------------------------------------------

def test_single_token_decode_is_one_call():
    params, config = tiny_model(40)
    result = generate_sequential(params, config, 1, seed=0)
    assert result.model_calls == 1
    assert result.tokens.shape == (1,)


def test_sequential_decode_deterministic_under_seed():
    params, config = tiny_model(41)
    a = generate_sequential(params, config, 16, temperature=0.8, seed=5)
    b = generate_sequential(params, config, 16, temperature=0.8, seed=5)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.logprobs, b.logprobs)


def test_cached_decode_matches_full_recompute():
    params, config = tiny_model(42, layers=3, two_stream_layers=2)
    result = generate_sequential(params, config, 32, seed=9)
    full = forward(result.tokens[result.plan.to_original], result.plan, params, config).data
    start = 0
    for step_logits in result.step_logits:
        size = step_logits.shape[0]
        assert np.abs(step_logits - full[start:start + size]).max() < 1e-8
        start += size


def test_cached_decode_matches_recompute_shift_mode():
    params, config = tiny_model(43, layers=2, two_stream_layers=1, query_mode="shift")
    result = generate_sequential(params, config, 12, seed=3)
    full = forward(result.tokens, result.plan, params, config).data
    got = np.concatenate(result.step_logits, axis=0)
    assert np.abs(got - full).max() < 1e-8


# -- strided decoding ----------------------------------------------------------------

def test_strided_one_stream_equals_sequential():
    params, config = tiny_model(44)
    for seed in (0, 3, 11):
        seq = generate_sequential(params, config, 12, temperature=0.9, seed=seed)
        par = generate_strided(params, config, 12, 1, temperature=0.9, seed=seed)
        assert np.array_equal(seq.tokens, par.tokens)
        assert np.array_equal(seq.logprobs, par.logprobs)


def test_strided_generation_order():
    params, config = tiny_model(45)
    result = generate_strided(params, config, 8, 2, seed=1)
    assert [g.tolist() for g in result.groups] == [[0], [4], [1, 5], [2, 6], [3, 7]]
    assert result.model_calls == 5


def test_strided_call_count_formula():
    params, config = tiny_model(46)
    result = generate_strided(params, config, 16, 4, seed=0)
    assert result.model_calls == 4 + (16 // 4 - 1)
    with pytest.raises(ValueError):
        generate_strided(params, config, 10, 4, seed=0)


def test_strided_cached_decode_matches_recompute():
    params, config = tiny_model(47, layers=3, two_stream_layers=1)
    for s in (2, 4):
        result = generate_strided(params, config, 16, s, seed=4)
        full = forward(result.tokens[result.plan.to_original], result.plan,
                       params, config).data
        start = 0
        for step_logits in result.step_logits:
            size = step_logits.shape[0]
            assert np.abs(step_logits - full[start:start + size]).max() < 1e-8
            start += size


def test_group_members_sample_their_own_conditionals():
    # in a parallel group, each member's draws follow its own conditional
    params, config = tiny_model(48, vocab=5, dim=8, layers=1, two_stream_layers=1)
    n, s = 4, 2
    counts = np.zeros((s, 5))
    draws = 3000
    reference = None
    for seed in range(draws):
        plan = strided_permutation(n, s)
        session = DecodeSession(params, config, plan, temperature=1.0, seed=seed)
        gen = GenerationPlan.from_block_plan(plan)
        # force both heads to fixed tokens so the group conditional is fixed
        session.absorb_group(gen.groups[0], np.array([1]))
        session.absorb_group(gen.groups[1], np.array([3]))
        logits = session.group_logits(gen.groups[2])
        if reference is None:
            e = np.exp(logits.astype(np.float64) - logits.max(axis=1, keepdims=True))
            reference = e / e.sum(axis=1, keepdims=True)
        rng = np.random.Generator(np.random.PCG64(seed + 10_000))
        for j in range(s):
            e = np.exp(logits[j].astype(np.float64) - logits[j].max())
            counts[j, sample_token(e / e.sum(), 1.0, rng)] += 1
    freq = counts / draws
    assert np.abs(freq - reference).max() < 0.04


def test_sampling_precision_is_64_bit_even_for_32_bit_models():
    from blockdiff.kernel import FLOAT32

    params, config = tiny_model(49, precision=FLOAT32)
    result = generate_sequential(params, config, 8, seed=0)
    assert result.step_logits[0].dtype == np.float32  # model runs at its precision
    assert result.logprobs.dtype == np.float64        # sampling arithmetic does not
