"""Byte-level text ingestion, batching, and synthetic chains for experiments.

The vocabulary is the 256 byte values plus one reserved begin-of-sequence
marker (id 0); byte value b maps to id b+1, so round trips are exact and no
external tokenizer is involved. The marker id is reserved for generation-side
conventions and is never produced by ``tokenize``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = [
    "ByteVocab",
    "VOCAB",
    "tokenize",
    "detokenize",
    "CorpusSplit",
    "make_split",
    "windows",
    "make_batches",
    "synthetic_markov_corpus",
    "markov_stationary",
    "markov_entropy_rate",
    "markov_bigram_distribution",
]


@dataclass(frozen=True)
class ByteVocab:
    size: int = 257
    bos_id: int = 0


VOCAB = ByteVocab()


def tokenize(data: bytes) -> np.ndarray:
    """Bytes to ids, offset past the reserved marker id."""
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64) + 1


def detokenize(ids) -> bytes:
    """Ids back to bytes; marker ids contribute nothing."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB.size):
        raise ValueError(f"token id outside [0, {VOCAB.size})")
    kept = arr[arr != VOCAB.bos_id] - 1
    return kept.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class CorpusSplit:
    """Train/validation token arrays; windows never cross the boundary."""

    train: np.ndarray
    val: np.ndarray
    seq_len: int
    stride: int


def make_split(tokens: np.ndarray, seq_len: int, val_fraction: float = 0.1,
               stride: int | None = None) -> CorpusSplit:
    tokens = np.asarray(tokens, dtype=np.int64)
    if stride is None:
        stride = seq_len
    cut = int(round(len(tokens) * (1.0 - val_fraction)))
    split = CorpusSplit(train=tokens[:cut], val=tokens[cut:], seq_len=seq_len, stride=stride)
    if windows(split.train, seq_len, stride).shape[0] == 0:
        raise ValueError("corpus too short for the requested sequence length")
    return split


def windows(tokens: np.ndarray, seq_len: int, stride: int) -> np.ndarray:
    """All fixed-length windows at the given stride, as a [count, seq_len] array."""
    count = (len(tokens) - seq_len) // stride + 1 if len(tokens) >= seq_len else 0
    if count <= 0:
        return np.zeros((0, seq_len), dtype=np.int64)
    starts = np.arange(count) * stride
    return tokens[starts[:, None] + np.arange(seq_len)[None, :]]


def make_batches(split: CorpusSplit, batch_size: int, seq_len: int,
                 rng: np.random.Generator, part: str = "train") -> Iterator[np.ndarray]:
    """One epoch of windows, shuffled by ``rng``, in batches.

    The final batch may be smaller; an epoch always covers every window
    exactly once.
    """
    tokens = split.train if part == "train" else split.val
    table = windows(tokens, seq_len, split.stride)
    if table.shape[0] == 0:
        raise ValueError("corpus too short for the requested sequence length")
    order = rng.permutation(table.shape[0])
    for start in range(0, len(order), batch_size):
        yield table[order[start:start + batch_size]]


# -- synthetic first-order chains ------------------------------------------------

def _validate_transitions(transitions: np.ndarray) -> np.ndarray:
    table = np.asarray(transitions, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != table.shape[1]:
        raise ValueError("transition table must be square")
    if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("transition rows must be probability distributions")
    return table


def markov_stationary(transitions) -> np.ndarray:
    """Stationary distribution of an ergodic chain (left eigenvector)."""
    table = _validate_transitions(transitions)
    k = table.shape[0]
    a = np.vstack([table.T - np.eye(k), np.ones((1, k))])
    b = np.concatenate([np.zeros(k), [1.0]])
    mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def markov_entropy_rate(transitions) -> float:
    """Per-token entropy of the stationary chain, in nats."""
    table = _validate_transitions(transitions)
    mu = markov_stationary(table)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(table > 0, np.log(table), 0.0)
    return float(-(mu[:, None] * table * logs).sum())


def markov_bigram_distribution(transitions) -> np.ndarray:
    """Joint distribution of adjacent symbol pairs at stationarity."""
    table = _validate_transitions(transitions)
    mu = markov_stationary(table)
    return mu[:, None] * table


def synthetic_markov_corpus(transitions, length: int, seed: int,
                            symbols: bytes | None = None) -> bytes:
    """Sample a byte string from a first-order chain started at stationarity.

    ``symbols[i]`` is the byte emitted for state i; defaults to lowercase
    letters. The per-token entropy rate of the output is
    ``markov_entropy_rate(transitions)``.
    """
    table = _validate_transitions(transitions)
    k = table.shape[0]
    if symbols is None:
        if k > 26:
            raise ValueError("provide explicit symbols for more than 26 states")
        symbols = bytes(range(ord("a"), ord("a") + k))
    if len(symbols) != k:
        raise ValueError("one symbol byte per state is required")
    rng = np.random.Generator(np.random.PCG64(seed))
    cdf = np.cumsum(table, axis=1)
    start_cdf = np.cumsum(markov_stationary(table))
    draws = rng.random(length)
    out = np.empty(length, dtype=np.uint8)
    state = int(np.searchsorted(start_cdf, draws[0], side="right").clip(0, k - 1))
    out[0] = symbols[state]
    for i in range(1, length):
        state = int(np.searchsorted(cdf[state], draws[i], side="right").clip(0, k - 1))
        out[i] = symbols[state]
    return out.tobytes()
