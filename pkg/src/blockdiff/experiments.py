"""Desk-scale learning experiments on synthetic first-order chains.

The pipeline trains a small model under the progressive permutation
curriculum on a corpus with a known entropy rate, trains an identically sized
pure left-to-right baseline for reference, optionally fine-tunes with strided
plans, and measures generation quality against the source chain. The
acceptance suite and ``scripts/markov_experiment.py`` both drive these
helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    CorpusSplit,
    make_split,
    markov_bigram_distribution,
    markov_entropy_rate,
    synthetic_markov_corpus,
    tokenize,
)
from .evalcli import eval_perplexity, unigram_entropy
from .model import ModelConfig, ModelParams, init_params
from .sampler import DecodeResult, generate_sequential, generate_strided
from .trainer import TrainConfig, load_checkpoint, run_training

__all__ = [
    "DEFAULT_TRANSITIONS",
    "DEFAULT_SYMBOLS",
    "ToyRunResult",
    "toy_model_config",
    "toy_train_config",
    "build_toy_split",
    "run_toy_training",
    "run_sbp_finetune",
    "sample_sequences",
    "empirical_bigram_tv",
    "mean_unigram_entropy",
]

# Circulant 4-state chain: strong pull to the next symbol, mild noise elsewhere.
DEFAULT_TRANSITIONS = np.array([
    [0.1, 0.7, 0.1, 0.1],
    [0.1, 0.1, 0.7, 0.1],
    [0.1, 0.1, 0.1, 0.7],
    [0.7, 0.1, 0.1, 0.1],
])
DEFAULT_SYMBOLS = b"abcd"


@dataclass
class ToyRunResult:
    params: ModelParams
    model_config: ModelConfig
    nll: float
    perplexity: float
    entropy_rate: float
    metrics_csv: Path
    checkpoint: Path


def toy_model_config(vocab: int = 257, dropout: float = 0.02) -> ModelConfig:
    return ModelConfig(
        vocab=vocab, dim=64, heads=4, layers=4, two_stream_layers=2,
        dropout=dropout,
    )


def toy_train_config(curriculum: bool, steps: int = 3000, batch_size: int = 8,
                     seq_len: int = 64, sbp_steps: int = 0,
                     warmup_steps: int | None = None) -> TrainConfig:
    """Curriculum run ramps shuffles 200 -> 1000 up to 8; baseline stays left-to-right."""
    if warmup_steps is None:
        warmup_steps = min(300, max(1, steps // 10))
    if curriculum:
        ar_steps, ramp_end, max_shuffled = 200, 1000, 8
    else:
        ar_steps, ramp_end, max_shuffled = steps + sbp_steps + 1, steps + sbp_steps + 2, 0
    return TrainConfig(
        batch_size=batch_size, seq_len=seq_len, total_steps=steps,
        warmup_steps=warmup_steps, ar_steps=ar_steps, ramp_end_step=ramp_end,
        max_shuffled=max_shuffled, sbp_steps=sbp_steps,
    )


def build_toy_split(length: int = 220_000, seed: int = 11, seq_len: int = 64,
                    transitions: np.ndarray = DEFAULT_TRANSITIONS,
                    symbols: bytes = DEFAULT_SYMBOLS) -> tuple[CorpusSplit, float]:
    text = synthetic_markov_corpus(transitions, length, seed, symbols)
    split = make_split(tokenize(text), seq_len, val_fraction=0.1)
    return split, markov_entropy_rate(transitions)


def run_toy_training(out_dir, split: CorpusSplit, curriculum: bool, seed: int,
                     steps: int = 3000, batch_size: int = 8,
                     log_every: int = 0) -> ToyRunResult:
    model_cfg = toy_model_config()
    train_cfg = toy_train_config(curriculum, steps=steps, batch_size=batch_size,
                                 seq_len=split.seq_len)
    params = init_params(model_cfg, np.random.Generator(np.random.PCG64(seed)))
    run_training(params, model_cfg, train_cfg, split, out_dir, seed=seed,
                 log_every=log_every)
    nll, ppl = eval_perplexity(params, model_cfg, split)
    return ToyRunResult(
        params=params, model_config=model_cfg, nll=nll, perplexity=ppl,
        entropy_rate=markov_entropy_rate(DEFAULT_TRANSITIONS),
        metrics_csv=Path(out_dir) / "metrics.csv",
        checkpoint=Path(out_dir) / "checkpoint.bin",
    )


def run_sbp_finetune(out_dir, base_checkpoint, split: CorpusSplit, seed: int,
                     steps: int = 500, batch_size: int = 8,
                     start_step: int = 3000, log_every: int = 0) -> ToyRunResult:
    """Continue a base run with strided plans only, at the post-warmup rate."""
    params, model_cfg, _ = load_checkpoint(base_checkpoint)
    train_cfg = TrainConfig(
        batch_size=batch_size, seq_len=split.seq_len, total_steps=0,
        warmup_steps=0, ar_steps=0, ramp_end_step=1, max_shuffled=0,
        sbp_steps=steps,
    )
    run_training(params, model_cfg, train_cfg, split, out_dir, seed=seed,
                 start_step=start_step, log_every=log_every)
    nll, ppl = eval_perplexity(params, model_cfg, split)
    return ToyRunResult(
        params=params, model_config=model_cfg, nll=nll, perplexity=ppl,
        entropy_rate=markov_entropy_rate(DEFAULT_TRANSITIONS),
        metrics_csv=Path(out_dir) / "metrics.csv",
        checkpoint=Path(out_dir) / "checkpoint.bin",
    )


def sample_sequences(params: ModelParams, config: ModelConfig, count: int, length: int,
                     streams: int, temperature: float = 1.0, seed: int = 0) -> list[DecodeResult]:
    out = []
    for i in range(count):
        if streams == 1:
            out.append(generate_sequential(params, config, length,
                                           temperature=temperature, seed=seed + i))
        else:
            out.append(generate_strided(params, config, length, streams,
                                        temperature=temperature, seed=seed + i))
    return out


def empirical_bigram_tv(results: list[DecodeResult], transitions: np.ndarray,
                        symbols: bytes = DEFAULT_SYMBOLS) -> float:
    """Total-variation distance of generated adjacent pairs from the chain's.

    Tokens outside the chain's symbol set land in a residual bucket whose true
    probability is zero, so emitting them costs distance.
    """
    truth = markov_bigram_distribution(transitions)
    k = truth.shape[0]
    ids = np.full(257, k, dtype=np.int64)
    for state, byte in enumerate(symbols):
        ids[byte + 1] = state
    counts = np.zeros((k + 1, k + 1), dtype=np.float64)
    for res in results:
        states = ids[res.tokens]
        np.add.at(counts, (states[:-1], states[1:]), 1.0)
    emp = counts / counts.sum()
    padded = np.zeros((k + 1, k + 1))
    padded[:k, :k] = truth
    return float(0.5 * np.abs(emp - padded).sum())


def mean_unigram_entropy(results: list[DecodeResult]) -> float:
    return float(np.mean([unigram_entropy(r.tokens) for r in results]))
