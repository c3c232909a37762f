"""Training loop: curriculum-driven plan sampling, AdamW, and checkpoints.

Each step draws one masking order per sequence. During the main phase that
order is left-to-right with a progressively growing number of shuffled
positions; during the strided fine-tuning phase the whole batch shares one
strided plan whose stream count is drawn fresh each step from {1, 2, 4}. Weight
decay is decoupled (applied to the weights directly, never through the moment
estimates) and the learning rate ramps linearly over the warmup then stays
constant. With fixed seeds a run is bit-reproducible on one platform.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusSplit, make_batches
from .kernel import FLOAT32
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .objective import diffusion_loss_batch
from .schedule import (
    CurriculumState,
    apply_partial_shuffle,
    identity_plan,
    progressive_perm_count,
    sample_sbp_stream_count,
    strided_permutation,
)

__all__ = [
    "TrainConfig",
    "TrainMetrics",
    "TrainState",
    "lr_at",
    "train_step",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_FORMAT = "blockdiff-checkpoint-v1"
METRICS_HEADER = "step,loss,grad_norm,perm_count,lr"


@dataclass
class TrainConfig:
    """Optimizer, schedule, and curriculum settings (defaults suit full-scale runs)."""

    batch_size: int
    seq_len: int
    total_steps: int
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 2000
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.03
    dropout: float = 0.02
    ar_steps: int = 9000
    ramp_end_step: int = 48000
    max_shuffled: int = 32
    sbp_steps: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("rates must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.warmup_steps > self.total_steps + self.sbp_steps:
            raise ValueError("warmup cannot exceed the step budget")


@dataclass
class TrainMetrics:
    step: int
    loss: float
    grad_norm: float
    tokens_per_second: float
    perm_count: int
    lr: float


@dataclass
class TrainState:
    curriculum: CurriculumState
    phase: str = "main"
    adam_step: int = 0
    moments: dict = field(default_factory=dict)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp from zero over the warmup, constant afterwards."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    return config.learning_rate


def _global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params.tensors():
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return float(np.sqrt(total))


def _adamw_update(params: ModelParams, state: TrainState, config: TrainConfig,
                  lr: float, clip_scale: float) -> None:
    state.adam_step += 1
    t = state.adam_step
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, tensor in params.named():
        if tensor.grad is None:
            continue
        g = tensor.grad * np.asarray(clip_scale, dtype=tensor.dtype)
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        m, v = state.moments[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.moments[name] = (m, v)
        update = (m / bias1) / (np.sqrt(v / bias2) + config.eps)
        decay = config.weight_decay if tensor.data.ndim >= 2 else 0.0
        new = tensor.data - lr * (update + decay * tensor.data)
        tensor.data = new.astype(tensor.dtype, copy=False)


def _draw_plans(config: TrainConfig, state: TrainState, batch: int, seq_len: int,
                rng: np.random.Generator) -> tuple[list, int]:
    if state.phase == "sbp":
        streams = sample_sbp_stream_count(rng)
        plan = strided_permutation(seq_len, streams)
        return [plan] * batch, streams
    count = progressive_perm_count(state.curriculum)
    base = identity_plan(seq_len)
    if count == 0:
        return [base] * batch, 0
    return [apply_partial_shuffle(base, count, rng) for _ in range(batch)], count


def train_step(params: ModelParams, batch: np.ndarray, config: TrainConfig,
               model_config: ModelConfig, state: TrainState,
               rng: np.random.Generator) -> tuple[ModelParams, TrainMetrics]:
    """One optimization step over a batch of raw (original-order) sequences."""
    started = time.perf_counter()
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[1] != config.seq_len:
        raise ValueError(f"expected [batch, {config.seq_len}] sequences")
    step = state.curriculum.iteration
    plans, perm_count = _draw_plans(config, state, batch.shape[0], config.seq_len, rng)
    processed = np.stack([seq[plan.to_original] for seq, plan in zip(batch, plans)])

    params.set_requires_grad(True)
    params.zero_grad()
    logits = forward_batch(processed, plans, params, model_config, rng=rng, train=True)
    loss = diffusion_loss_batch(logits, processed, plans)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise RuntimeError(f"non-finite loss {loss_value} at step {step}; aborting")
    loss.backward()
    params.set_requires_grad(False)

    grad_norm = _global_grad_norm(params)
    clip_scale = 1.0
    if config.grad_clip_norm > 0 and grad_norm > config.grad_clip_norm:
        clip_scale = config.grad_clip_norm / grad_norm
    lr = lr_at(step, config)
    _adamw_update(params, state, config, lr, clip_scale)
    params.zero_grad()

    state.curriculum.iteration += 1
    elapsed = max(time.perf_counter() - started, 1e-9)
    metrics = TrainMetrics(
        step=step,
        loss=loss_value,
        grad_norm=grad_norm,
        tokens_per_second=batch.size / elapsed,
        perm_count=perm_count,
        lr=lr,
    )
    return params, metrics


def _metrics_line(m: TrainMetrics) -> str:
    return f"{m.step},{m.loss!r},{m.grad_norm!r},{m.perm_count},{m.lr!r}"


def run_training(params: ModelParams, model_config: ModelConfig, config: TrainConfig,
                 split: CorpusSplit, out_dir, seed: int = 0,
                 start_step: int = 0, log_every: int = 0) -> list[TrainMetrics]:
    """Main phase then strided fine-tuning phase, with per-step CSV metrics.

    ``start_step`` offsets the schedule so a fine-tuning run continues at the
    base run's learning rate. Writes ``metrics.csv`` (columns
    step,loss,grad_norm,perm_count,lr; the perm_count column carries the
    shuffled-token count in the main phase and the stream count in the strided
    phase) and ``checkpoint.bin`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(2)
    data_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    step_rng = np.random.Generator(np.random.PCG64(seeds[1]))

    state = TrainState(
        curriculum=CurriculumState(
            ar_steps=config.ar_steps,
            ramp_end_step=config.ramp_end_step,
            max_shuffled=config.max_shuffled,
            iteration=start_step,
        ),
    )
    history: list[TrainMetrics] = []
    csv_path = out / "metrics.csv"
    batches = iter(())
    with open(csv_path, "w") as csv:
        csv.write(METRICS_HEADER + "\n")
        for local in range(config.total_steps + config.sbp_steps):
            state.phase = "main" if local < config.total_steps else "sbp"
            try:
                batch = next(batches)
            except StopIteration:
                batches = make_batches(split, config.batch_size, config.seq_len, data_rng)
                batch = next(batches)
            _, metrics = train_step(params, batch, config, model_config, state, step_rng)
            history.append(metrics)
            csv.write(_metrics_line(metrics) + "\n")
            if log_every and (local % log_every == 0 or local + 1 == config.total_steps + config.sbp_steps):
                print(
                    f"step {metrics.step} loss {metrics.loss:.4f} "
                    f"grad {metrics.grad_norm:.3f} perm {metrics.perm_count} lr {metrics.lr:.2e}",
                    flush=True,
                )
    save_checkpoint(params, model_config, state.curriculum.iteration, out / "checkpoint.bin")
    return history


# -- checkpoint container -----------------------------------------------------------

class CheckpointError(Exception):
    """Raised when a checkpoint file fails an integrity check."""


def save_checkpoint(params: ModelParams, config: ModelConfig, step: int, path) -> None:
    """Self-describing container: JSON header then little-endian float32 payload."""
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in params.named():
        if tensor.dtype != np.float32:
            raise ValueError("checkpoint payload is 32-bit; cast parameters to float32 first")
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "step": int(step),
        "payload_bytes": offset,
        "params": manifest,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, int]:
    """Byte-exact inverse of ``save_checkpoint``; corrupt files raise CheckpointError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise CheckpointError("file too short for a header length")
    (header_len,) = struct.unpack("<I", blob[:4])
    if len(blob) < 4 + header_len:
        raise CheckpointError(f"truncated header: need {header_len} bytes at offset 4")
    try:
        header = json.loads(blob[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown format {header.get('format')!r}")
    config = ModelConfig.from_dict(header["config"])
    payload = blob[4 + header_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, manifest declares {header['payload_bytes']}"
        )

    params = init_params(config, np.random.Generator(np.random.PCG64(0)), precision=FLOAT32)
    manifest = {entry["name"]: entry for entry in header["params"]}
    for name, tensor in params.named():
        entry = manifest.pop(name, None)
        if entry is None:
            raise CheckpointError(f"manifest is missing parameter {name!r}")
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r} at offset {entry['offset']}: "
                f"file has {shape}, model needs {tensor.shape}"
            )
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"payload truncated at offset {start} for {name!r}")
        tensor.data = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(shape).copy()
    if manifest:
        raise CheckpointError(f"manifest has unknown parameters: {sorted(manifest)}")
    return params, config, int(header["step"])
