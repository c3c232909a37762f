import math

import numpy as np
import pytest

from blockdiff.kernel import Tensor
from blockdiff.model import PlanView, forward
from blockdiff.objective import (
    LossWeights,
    diffusion_loss,
    diffusion_loss_batch,
    elbo_sequential_oracle,
    oa_arm_enumeration,
    oa_arm_monte_carlo,
    order_nll,
)
from blockdiff.schedule import identity_plan, make_plan_from_tau, sample_masking_order

from conftest import rng_for, tiny_model


def _forward_fn(params, config):
    return lambda tokens, plan: forward(tokens, plan, params, config)


# -- diffusion loss -----------------------------------------------------------------

def test_uniform_logits_give_log_vocab():
    plan = sample_masking_order(5, rng_for(0))
    logits = Tensor(np.zeros((5, 11)))
    loss = diffusion_loss(logits, np.zeros(5, dtype=int), plan)
    assert abs(float(loss.data) - math.log(11)) < 1e-12


def test_single_token_loss():
    plan = identity_plan(1)
    logits = np.array([[0.3, -0.2, 1.5]])
    loss = diffusion_loss(Tensor(logits), [2], plan)
    lse = math.log(sum(math.exp(v) for v in logits[0]))
    assert abs(float(loss.data) - (lse - 1.5)) < 1e-12


def test_matches_per_position_loop(rng):
    params, config = tiny_model(1)
    plan = make_plan_from_tau(rng_for(2).integers(1, 4, size=7), 3)
    tokens = rng_for(3).integers(0, config.vocab, size=7)
    logits = forward(tokens, plan, params, config)
    gamma = rng_for(4).random(plan.num_blocks)
    got = float(diffusion_loss(logits, tokens, plan, LossWeights(gamma)).data)

    want = 0.0
    arr = logits.data
    for pos in range(7):
        row = arr[pos]
        lse = math.log(np.exp(row - row.max()).sum()) + row.max()
        want += gamma[plan.block_of[pos] - 1] * (lse - row[tokens[pos]])
    assert abs(got - want) < 1e-10


def test_weight_length_validation():
    plan = identity_plan(3)
    with pytest.raises(ValueError):
        diffusion_loss(Tensor(np.zeros((3, 5))), [0, 1, 2], plan, LossWeights(np.ones(2)))


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(np.array([0.5, -0.1]))


def test_loss_is_differentiable(rng):
    plan = identity_plan(4)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    loss = diffusion_loss(logits, [1, 2, 3, 4], plan)
    loss.backward()
    assert logits.grad is not None and np.isfinite(logits.grad).all()


def test_batch_loss_is_mean_of_sequences(rng):
    params, config = tiny_model(2)
    plans = [sample_masking_order(6, rng_for(5)), sample_masking_order(6, rng_for(6))]
    tokens = rng_for(7).integers(0, config.vocab, size=(2, 6))
    from blockdiff.model import forward_batch

    logits = forward_batch(tokens, plans, params, config)
    batched = float(diffusion_loss_batch(logits, tokens, plans).data)
    singles = [
        float(diffusion_loss(forward(tokens[i], plans[i], params, config),
                             tokens[i], plans[i]).data)
        for i in range(2)
    ]
    assert abs(batched - np.mean(singles)) < 1e-10


# -- sequential oracle -----------------------------------------------------------------

def test_single_pass_equals_sequential_oracle(rng):
    for seed in range(6):
        params, config = tiny_model(seed + 30)
        n = int(rng_for(seed).integers(2, 13))
        plan = sample_masking_order(n, rng_for(seed + 50))
        tokens = rng_for(seed + 90).integers(0, config.vocab, size=n)
        logits = forward(tokens, plan, params, config)
        fast = float(diffusion_loss(logits, tokens, plan).data)
        slow = elbo_sequential_oracle(_forward_fn(params, config), tokens, plan)
        assert abs(fast - slow) < 1e-8


def test_single_block_plan_equals_context_free_scoring(rng):
    params, config = tiny_model(31)
    plan = make_plan_from_tau([1, 1, 1, 1], 1)
    tokens = rng_for(11).integers(0, config.vocab, size=4)
    logits = forward(tokens, plan, params, config)
    fast = float(diffusion_loss(logits, tokens, plan).data)
    slow = elbo_sequential_oracle(_forward_fn(params, config), tokens, plan)
    assert abs(fast - slow) < 1e-10
    # with one block every conditional is context-free
    assert plan.num_blocks == 1


def test_identity_plan_is_mean_next_token_nll(rng):
    params, config = tiny_model(32)
    n = 6
    plan = identity_plan(n)
    tokens = rng_for(12).integers(0, config.vocab, size=n)
    logits = forward(tokens, plan, params, config)
    loss = float(diffusion_loss(logits, tokens, plan).data)
    arr = logits.data
    per_token = []
    for pos in range(n):
        row = arr[pos]
        lse = math.log(np.exp(row - row.max()).sum()) + row.max()
        per_token.append(lse - row[tokens[pos]])
    assert abs(loss - np.mean(per_token)) < 1e-10


def test_within_block_order_invariance(rng):
    params, config = tiny_model(33)
    plan = make_plan_from_tau([2, 2, 2, 1, 1, 1], 2)
    tokens = rng_for(13).integers(0, config.vocab, size=6)
    base = float(diffusion_loss(forward(tokens, plan, params, config), tokens, plan).data)
    perm = np.array([1, 2, 0, 3, 4, 5])  # rotate the first block
    view = PlanView(n=6, num_blocks=2, block_of=np.asarray(plan.block_of),
                    to_original=np.asarray(plan.to_original)[perm])
    moved = float(diffusion_loss(forward(tokens[perm], view, params, config),
                                 tokens[perm], view).data)
    assert abs(moved - base) < 1e-8


def test_loss_gradient_rows_are_isolated(rng):
    # each position's target appears in exactly one loss term: the gradient
    # at logits row n never depends on the other rows' targets
    plan = make_plan_from_tau([2, 1, 2, 1], 2)
    logits_data = rng.normal(size=(4, 6))
    targets = np.array([1, 2, 3, 4])

    def grad_rows(tgts):
        logits = Tensor(logits_data, requires_grad=True)
        diffusion_loss(logits, tgts, plan).backward()
        return logits.grad

    base = grad_rows(targets)
    changed = targets.copy()
    changed[0] = 5
    moved = grad_rows(changed)
    assert np.array_equal(base[1:], moved[1:])
    assert not np.array_equal(base[0], moved[0])


# -- order-averaged oracle ----------------------------------------------------------------

def test_enumeration_single_token(rng):
    params, config = tiny_model(34)
    tokens = np.array([3])
    got = oa_arm_enumeration(_forward_fn(params, config), tokens)
    want = order_nll(_forward_fn(params, config), tokens, [0])
    assert got == want


def test_enumeration_refuses_long_sequences(rng):
    params, config = tiny_model(35)
    with pytest.raises(ValueError):
        oa_arm_enumeration(_forward_fn(params, config), np.zeros(5, dtype=int))


def test_order_independent_model_gives_equal_order_nll():
    # a fresh (unscrambled) model has a zero head: uniform conditionals always,
    # so every generation order scores identically
    params, config = tiny_model(36, scrambled=False)
    fn = _forward_fn(params, config)
    tokens = np.array([1, 2, 3])
    import itertools

    values = [order_nll(fn, tokens, list(p)) for p in itertools.permutations(range(3))]
    assert max(values) - min(values) < 1e-12
    assert abs(values[0] - 3 * math.log(config.vocab)) < 1e-12


def test_monte_carlo_converges_to_enumeration():
    params, config = tiny_model(37)
    fn = _forward_fn(params, config)
    tokens = np.array([4, 0, 9])
    exact = oa_arm_enumeration(fn, tokens)
    mean, se = oa_arm_monte_carlo(fn, tokens, 4000, rng_for(14))
    assert se > 0
    assert abs(mean - exact) < 3 * se + 1e-12
