"""Attention masks derived from a block plan.

Two grids per plan: the causal mask lets a query see its own block and every
earlier one; the strict mask drops the diagonal blocks, so a query sees only
strictly earlier blocks. Both are materialized as boolean matrices; the
corresponding additive negative-infinity trick lives inside
``kernel.masked_softmax``, which keeps the empty-row convention explicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import BlockPlan, strided_permutation

__all__ = ["MaskMatrix", "MaskPair", "build_masks", "strided_mask_figure_check", "render_mask"]


@dataclass(frozen=True)
class MaskMatrix:
    """Boolean allowance grid; entry (query row, key column)."""

    n: int
    allowed: np.ndarray

    def __post_init__(self) -> None:
        if self.allowed.shape != (self.n, self.n):
            raise ValueError("mask grid must be square of side n")


@dataclass(frozen=True)
class MaskPair:
    causal: MaskMatrix
    strict: MaskMatrix


def build_masks(plan: BlockPlan) -> MaskPair:
    """Causal and strict masks over processed positions, O(n^2)."""
    labels = plan.block_of
    causal = labels[None, :] <= labels[:, None]
    strict = labels[None, :] < labels[:, None]
    causal.setflags(write=False)
    strict.setflags(write=False)
    return MaskPair(
        causal=MaskMatrix(plan.n, causal),
        strict=MaskMatrix(plan.n, strict),
    )


def strided_mask_figure_check(n: int = 8, s: int = 2) -> MaskPair:
    """Named regression fixture: masks of the 8-token, 2-stream plan."""
    return build_masks(strided_permutation(n, s))


def render_mask(mask: MaskMatrix) -> str:
    """Rows of 0/1 characters for visual comparison."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask.allowed) + "\n"
