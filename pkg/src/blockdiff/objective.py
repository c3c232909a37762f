"""Training objective and the oracles that certify it.

The loss is the order-conditional negative log-likelihood summed block by
block with per-block weights: one forward pass scores every block of a plan
at once. ``elbo_sequential_oracle`` recomputes the same quantity the slow way,
with one truncated forward pass per block, and ``oa_arm_enumeration``
averages full-sequence likelihoods over every generation order for tiny
sequences. Agreement between the fast path and these oracles is what the
acceptance suite checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .kernel import Tensor, cross_entropy
from .model import PlanView
from .schedule import make_plan_from_tau

__all__ = [
    "LossWeights",
    "diffusion_loss",
    "diffusion_loss_batch",
    "elbo_sequential_oracle",
    "oa_arm_enumeration",
    "oa_arm_monte_carlo",
    "order_nll",
]


@dataclass(frozen=True)
class LossWeights:
    """Non-negative per-block loss weights; default is 1/num_blocks for all."""

    per_block: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.per_block, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("per_block weights must be a flat array")
        if np.any(arr < 0):
            raise ValueError("loss weights must be non-negative")
        object.__setattr__(self, "per_block", arr)

    @classmethod
    def uniform(cls, num_blocks: int) -> "LossWeights":
        return cls(np.full(num_blocks, 1.0 / num_blocks))


def _position_weights(plan, weights: LossWeights, dtype) -> np.ndarray:
    block_of = np.asarray(plan.block_of)
    if weights.per_block.shape[0] != plan.num_blocks:
        raise ValueError(
            f"expected {plan.num_blocks} block weights, got {weights.per_block.shape[0]}"
        )
    return weights.per_block[block_of - 1].astype(dtype)


def diffusion_loss(logits: Tensor, tokens, plan, weights: LossWeights | None = None) -> Tensor:
    """Block-weighted negative log-likelihood of processed-order targets.

    Every position contributes exactly one term, weighted by its block's
    weight; with uniform weights and one-token blocks this is the mean
    next-token loss of the sampled order. Differentiable.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if logits.ndim != 2 or tokens.shape != (logits.shape[0],):
        raise ValueError("diffusion_loss expects [n, vocab] logits and n targets")
    if tokens.shape[0] != plan.n:
        raise ValueError(f"plan length {plan.n} does not match {tokens.shape[0]} targets")
    if weights is None:
        weights = LossWeights.uniform(plan.num_blocks)
    w = _position_weights(plan, weights, logits.dtype)
    return cross_entropy(logits, tokens, w)


def diffusion_loss_batch(logits: Tensor, tokens: np.ndarray, plans,
                         weights: list[LossWeights] | None = None) -> Tensor:
    """Mean of per-sequence losses over a batch (one plan per sequence)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    batch = tokens.shape[0]
    if weights is None:
        weights = [LossWeights.uniform(p.num_blocks) for p in plans]
    w = np.stack([
        _position_weights(p, lw, logits.dtype) for p, lw in zip(plans, weights)
    ]) * np.asarray(1.0 / batch, dtype=logits.dtype)
    return cross_entropy(logits, tokens, w)


def _logsumexp_rows(arr: np.ndarray) -> np.ndarray:
    m = arr.max(axis=-1, keepdims=True)
    return np.log(np.exp(arr - m).sum(axis=-1)) + m[..., 0]


def elbo_sequential_oracle(forward_fn, tokens, plan, weights: LossWeights | None = None) -> float:
    """The same objective evaluated with one truncated forward pass per block.

    For each block, the model runs on only the tokens of that block and the
    blocks before it; the block's positions are then scored teacher-forced.
    This is the reference the single-pass loss must match.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if weights is None:
        weights = LossWeights.uniform(plan.num_blocks)
    if weights.per_block.shape[0] != plan.num_blocks:
        raise ValueError("one weight per block is required")
    block_of = np.asarray(plan.block_of)
    to_original = np.asarray(plan.to_original)

    total = 0.0
    for t, sl in enumerate(plan.block_slices(), start=1):
        m = sl.stop
        view = PlanView(
            n=m, num_blocks=t,
            block_of=block_of[:m],
            to_original=to_original[:m],
        )
        logits = forward_fn(tokens[:m], view)
        rows = np.asarray(logits.data, dtype=np.float64)[sl]
        lse = _logsumexp_rows(rows)
        picked = rows[np.arange(rows.shape[0]), tokens[sl]]
        total += float(weights.per_block[t - 1]) * float((lse - picked).sum())
    return total


def order_nll(forward_fn, tokens, order) -> float:
    """Total negative log-likelihood of a sequence under one generation order."""
    tokens = np.asarray(tokens, dtype=np.int64)
    order = np.asarray(order, dtype=np.int64)
    n = tokens.shape[0]
    steps = np.empty(n, dtype=np.int64)
    steps[order] = np.arange(n, 0, -1)
    plan = make_plan_from_tau(steps, n)
    processed = tokens[plan.to_original]
    logits = forward_fn(processed, plan)
    rows = np.asarray(logits.data, dtype=np.float64)
    lse = _logsumexp_rows(rows)
    picked = rows[np.arange(n), processed]
    return float((lse - picked).sum())


def oa_arm_enumeration(forward_fn, tokens, max_length: int = 4) -> float:
    """Exact order-averaged negative log-likelihood over all generation orders.

    Only feasible for very short sequences; longer inputs are refused.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    if n < 1:
        raise ValueError("need at least one token")
    if n > max_length:
        raise ValueError(f"refusing to enumerate {n}! orders (limit {max_length})")
    totals = [order_nll(forward_fn, tokens, order)
              for order in itertools.permutations(range(n))]
    return float(np.mean(totals))


def oa_arm_monte_carlo(forward_fn, tokens, num_orders: int, rng: np.random.Generator,
                       batch_forward=None, batch_size: int = 512) -> tuple[float, float]:
    """Sampled-order estimate of the order-averaged loss: (mean, std error).

    With ``batch_forward(tokens_batch, plans) -> logits`` supplied, sampled
    orders are evaluated in batches instead of one call per order.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    vals = np.empty(num_orders, dtype=np.float64)
    if batch_forward is None:
        for i in range(num_orders):
            vals[i] = order_nll(forward_fn, tokens, rng.permutation(n))
    else:
        done = 0
        while done < num_orders:
            count = min(batch_size, num_orders - done)
            plans = []
            processed = np.empty((count, n), dtype=np.int64)
            for j in range(count):
                order = rng.permutation(n)
                steps = np.empty(n, dtype=np.int64)
                steps[order] = np.arange(n, 0, -1)
                plan = make_plan_from_tau(steps, n)
                plans.append(plan)
                processed[j] = tokens[plan.to_original]
            logits = np.asarray(batch_forward(processed, plans).data, dtype=np.float64)
            lse = _logsumexp_rows(logits)
            picked = np.take_along_axis(logits, processed[..., None], axis=-1)[..., 0]
            vals[done:done + count] = (lse - picked).sum(axis=-1)
            done += count
    se = float(vals.std(ddof=1) / np.sqrt(num_orders)) if num_orders > 1 else 0.0
    return float(vals.mean()), se
