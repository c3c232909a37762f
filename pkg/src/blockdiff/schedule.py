"""Masking orders, induced permutations, and block partitions.

A masking process hides tokens one step at a time until the whole sequence is
hidden; replaying it backwards gives a generation order. Sorting positions by
the step at which they were hidden, descending, groups the sequence into
blocks that share an unmasking step. ``BlockPlan`` captures that structure and
is the single source of truth for every attention mask and loss weight
downstream.

Conventions: ``masked_at`` and ``block_of`` hold 1-based step/block labels
(values in ``[1, num_blocks]``), while ``to_original`` / ``to_processed`` are
0-based index maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BlockPlan",
    "CurriculumState",
    "make_plan_from_tau",
    "sample_masking_order",
    "identity_plan",
    "strided_permutation",
    "progressive_perm_count",
    "apply_partial_shuffle",
    "sample_sbp_stream_count",
]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BlockPlan:
    """A masking order, its induced permutation, and the block partition.

    Fields:
      n             sequence length
      num_blocks    number of unmasking steps (blocks), all non-empty
      masked_at     per ORIGINAL position: step at which it was masked, 1-based
      to_original   processed index -> original index
      to_processed  original index -> processed index (inverse of the above)
      block_of      per PROCESSED position: its block label, 1-based,
                    non-decreasing along the processed order
      block_sizes   tokens per block, sums to n
    """

    n: int
    num_blocks: int
    masked_at: np.ndarray
    to_original: np.ndarray
    to_processed: np.ndarray
    block_of: np.ndarray
    block_sizes: np.ndarray

    def block_slices(self) -> list[slice]:
        """Processed-order extent of each block, in block order."""
        out = []
        start = 0
        for size in self.block_sizes:
            out.append(slice(start, start + int(size)))
            start += int(size)
        return out

    def is_identity(self) -> bool:
        return bool(
            self.num_blocks == self.n
            and np.array_equal(self.to_original, np.arange(self.n))
        )

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("empty plan")
        if self.block_sizes.sum() != self.n:
            raise ValueError("block sizes do not cover the sequence")
        if np.any(self.block_sizes < 1):
            raise ValueError("empty block in plan")
        if sorted(self.to_original.tolist()) != list(range(self.n)):
            raise ValueError("processed->original map is not a permutation")
        if not np.array_equal(self.to_processed[self.to_original], np.arange(self.n)):
            raise ValueError("index maps are not inverses")
        tau_processed = self.masked_at[self.to_original]
        if np.any(np.diff(tau_processed) > 0):
            raise ValueError("masking steps are not descending along the processed order")
        if not np.array_equal(self.block_of, self.num_blocks - tau_processed + 1):
            raise ValueError("block labels disagree with masking steps")

    def to_text(self) -> str:
        """Line format used by the dump-plan command: `n T` then the steps."""
        header = f"{self.n} {self.num_blocks}"
        body = " ".join(str(int(v)) for v in self.masked_at)
        return f"{header}\n{body}\n"

    @classmethod
    def from_text(cls, text: str) -> "BlockPlan":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if len(lines) != 2:
            raise ValueError("plan text needs a header line and a steps line")
        n, num_blocks = (int(v) for v in lines[0].split())
        steps = np.array([int(v) for v in lines[1].split()], dtype=np.int64)
        if len(steps) != n:
            raise ValueError(f"expected {n} steps, got {len(steps)}")
        return make_plan_from_tau(steps, num_blocks)


def make_plan_from_tau(masked_at, num_blocks: int) -> BlockPlan:
    """Build the deterministic plan induced by per-position masking steps.

    Positions are sorted by masking step descending; ties break by ascending
    original index, which is irrelevant to the objective but reproducible.
    Steps with no positions are squeezed out (labels are compacted and the
    block count reduced), so every block in the result is non-empty.
    """
    steps = np.asarray(masked_at, dtype=np.int64)
    n = steps.size
    if n == 0:
        raise ValueError("empty plan")
    if steps.min() < 1 or steps.max() > num_blocks:
        raise ValueError(f"masking steps must lie in [1, {num_blocks}]")

    present = np.unique(steps)  # ascending
    if present.size != num_blocks:
        # squeeze empty steps: remap each present step to its rank
        rank = {int(v): i + 1 for i, v in enumerate(present)}
        steps = np.array([rank[int(v)] for v in steps], dtype=np.int64)
        num_blocks = present.size

    order = np.argsort(-steps, kind="stable")
    to_processed = np.empty(n, dtype=np.int64)
    to_processed[order] = np.arange(n)
    block_of = num_blocks - steps[order] + 1
    sizes = np.bincount(block_of, minlength=num_blocks + 1)[1:]
    return BlockPlan(
        n=n,
        num_blocks=int(num_blocks),
        masked_at=_frozen(steps),
        to_original=_frozen(order),
        to_processed=_frozen(to_processed),
        block_of=_frozen(block_of),
        block_sizes=_frozen(sizes),
    )


def sample_masking_order(n: int, rng: np.random.Generator) -> BlockPlan:
    """Uniformly random masking order with one token per step."""
    if n < 1:
        raise ValueError("empty plan")
    steps = rng.permutation(n) + 1
    return make_plan_from_tau(steps, n)


def identity_plan(n: int) -> BlockPlan:
    """Left-to-right order: position j is unmasked at step j."""
    if n < 1:
        raise ValueError("empty plan")
    return make_plan_from_tau(np.arange(n, 0, -1), n)


def strided_permutation(n: int, s: int) -> BlockPlan:
    """Interleave ``s`` equal streams; heads first, then distance-``n/s`` groups.

    Stream k covers original positions ``[k*n/s, (k+1)*n/s)``. The processed
    order visits each relative position across all streams: the ``s`` stream
    heads come first as singleton blocks (decoded sequentially), then each
    later relative position forms one block of ``s`` far-apart tokens.
    """
    if s < 1:
        raise ValueError("stream count must be >= 1")
    if n % s != 0:
        raise ValueError(f"stream count {s} does not divide length {n}")
    span = n // s
    heads = [np.array([k * span]) for k in range(s)]
    groups = [np.arange(s) * span + j for j in range(1, span)]
    blocks = heads + groups

    to_original = np.concatenate(blocks)
    num_blocks = len(blocks)
    block_of = np.concatenate(
        [np.full(len(b), i + 1, dtype=np.int64) for i, b in enumerate(blocks)]
    )
    to_processed = np.empty(n, dtype=np.int64)
    to_processed[to_original] = np.arange(n)
    masked_at = np.empty(n, dtype=np.int64)
    masked_at[to_original] = num_blocks - block_of + 1
    sizes = np.array([len(b) for b in blocks], dtype=np.int64)
    return BlockPlan(
        n=n,
        num_blocks=num_blocks,
        masked_at=_frozen(masked_at),
        to_original=_frozen(to_original),
        to_processed=_frozen(to_processed),
        block_of=_frozen(block_of),
        block_sizes=_frozen(sizes),
    )


@dataclass
class CurriculumState:
    """Progress through the progressive-permutation curriculum.

    Training is purely left-to-right for the first ``ar_steps`` iterations,
    then the number of shuffled positions ramps linearly to ``max_shuffled``
    at ``ramp_end_step`` and stays there.
    """

    ar_steps: int
    ramp_end_step: int
    max_shuffled: int
    iteration: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.ar_steps <= self.ramp_end_step):
            raise ValueError("need 0 <= ar_steps <= ramp_end_step")
        if self.max_shuffled < 0:
            raise ValueError("max_shuffled must be non-negative")


def progressive_perm_count(state: CurriculumState) -> int:
    """Shuffled-token budget at the state's iteration (0 during the pure phase)."""
    it = state.iteration
    if it <= state.ar_steps or state.max_shuffled == 0:
        return 0
    if it >= state.ramp_end_step:
        return state.max_shuffled
    span = state.ramp_end_step - state.ar_steps
    return 1 + (state.max_shuffled - 1) * (it - state.ar_steps) // span


def apply_partial_shuffle(plan: BlockPlan, k: int, rng: np.random.Generator) -> BlockPlan:
    """Permute the masking steps of ``k`` uniformly chosen positions.

    With ``k == 0`` the plan is returned unchanged; with ``k == n`` the result
    is distributed exactly like a fresh uniform masking order.
    """
    if k < 0 or k > plan.n:
        raise ValueError(f"shuffle count {k} outside [0, {plan.n}]")
    if k == 0:
        return plan
    chosen = rng.choice(plan.n, size=k, replace=False)
    perm = rng.permutation(k)
    steps = plan.masked_at.copy()
    steps[chosen] = steps[chosen][perm]
    return make_plan_from_tau(steps, plan.num_blocks)


def sample_sbp_stream_count(rng: np.random.Generator) -> int:
    """Stream count for a strided fine-tuning step, uniform over {1, 2, 4}."""
    return (1, 2, 4)[int(rng.integers(0, 3))]
