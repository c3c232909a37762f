"""Decoding: sequential and strided block-parallel generation.

A decode session walks a block plan group by group. For each group it runs
one network call on the strict pathway (reading only cached context from
earlier groups), samples every group member independently from its own
conditional, then folds the finished tokens into the caches: per-layer
key/value projections plus the running prefix-aggregation accumulator, which
realizes the linear-attention seed as a recurrence with constant work per
generated token.

Cached values never go stale: a token's strict-stream states depend only on
blocks before it and its causal-stream states only on its own block and
earlier ones, all of which are final by the time they are computed. The test
suite holds cached decoding to the full-recompute forward pass within 1e-8.

All sampling arithmetic (softmax over logits, temperature reshaping, CDF
inversion) runs at 64-bit regardless of the model's precision. The RNG
contract is one uniform draw per generated token, consumed in processed
order, which makes one-stream strided decoding reproduce sequential decoding
draw for draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .kernel import _rope_angles
from .model import ModelConfig, ModelParams
from .schedule import BlockPlan, identity_plan, strided_permutation

__all__ = [
    "GenerationPlan",
    "KVCache",
    "DecodeResult",
    "DecodeSession",
    "adjust_probs",
    "sample_token",
    "generate_sequential",
    "generate_strided",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class GenerationPlan:
    """Ordered token-index groups (original positions), one network call each."""

    groups: list[np.ndarray]
    plan: BlockPlan

    @classmethod
    def from_block_plan(cls, plan: BlockPlan) -> "GenerationPlan":
        groups = [np.asarray(plan.to_original[sl]) for sl in plan.block_slices()]
        return cls(groups=groups, plan=plan)

    def validate(self) -> None:
        flat = np.concatenate(self.groups)
        if sorted(flat.tolist()) != list(range(self.plan.n)):
            raise ValueError("groups do not partition the sequence")
        if not np.array_equal(flat, self.plan.to_original):
            raise ValueError("group order does not follow the plan's block order")


@dataclass
class KVCache:
    """Per-layer context memory for one decode session.

    ``two_stream_*`` hold projections of the causal stream (consumed by both
    streams of the next layer); ``causal_*`` hold projections of the strict
    stream inside the plain causal stack. ``prefix_state`` is the running sum
    of (position embedding outer token embedding) over finished groups.
    ``last_causal_query`` is only kept in shift query mode.
    """

    two_stream_keys: list[np.ndarray] = field(default_factory=list)
    two_stream_values: list[np.ndarray] = field(default_factory=list)
    causal_keys: list[np.ndarray] = field(default_factory=list)
    causal_values: list[np.ndarray] = field(default_factory=list)
    prefix_state: np.ndarray | None = None
    last_causal_query: list[np.ndarray | None] = field(default_factory=list)
    generated: int = 0


@dataclass
class DecodeResult:
    tokens: np.ndarray            # original order
    logprobs: np.ndarray          # original order, 64-bit, at the applied temperature
    groups: list[np.ndarray]      # original positions per network call
    model_calls: int
    step_logits: list[np.ndarray]  # per call, [group, vocab], model precision
    plan: BlockPlan


def adjust_probs(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Reshape a 64-bit distribution by temperature and renormalize.

    Computed as a stable softmax of log-probabilities over temperature, so the
    zero-temperature limit selects the argmax.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be finite and non-negative")
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("probabilities must have positive mass")
    if temperature == 1.0:
        return p / total
    with np.errstate(divide="ignore"):
        logs = np.log(p / total) / temperature
    logs -= logs.max()
    q = np.exp(logs)
    return q / q.sum()


def sample_token(probs: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Inverse-CDF categorical draw at 64-bit precision.

    One uniform variate is consumed per call. Temperature reshaping happens
    here, on the 64-bit distribution, never on lower-precision intermediates.
    """
    q = adjust_probs(probs, temperature)
    if abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("distribution does not normalize within 1e-9")
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(q), u, side="right"))
    if idx >= q.shape[0] or q[idx] == 0.0:
        idx = int(np.flatnonzero(q > 0)[-1])
    return idx


# -- raw-array layer math (inference only) -------------------------------------

def _ln(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    s, d = x.shape
    return x.reshape(s, heads, d // heads).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, s, hd = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * hd)


def _rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    cos, sin = _rope_angles(np.asarray(positions), x.shape[-1], x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    if scores.shape[-1] == 0:
        return np.zeros(scores.shape, dtype=scores.dtype)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _attend_cached(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
                   wo: np.ndarray) -> np.ndarray:
    if keys.shape[1] == 0:
        return np.zeros((q.shape[1], wo.shape[1]), dtype=q.dtype)
    scale = 1.0 / math.sqrt(q.shape[-1])
    probs = _softmax_rows(q @ keys.transpose(0, 2, 1) * scale)
    return _merge(probs @ values) @ wo


def _ffn(x: np.ndarray, p) -> np.ndarray:
    h = _ln(x, p.norm_gain.data, p.norm_bias.data)
    return x + (_gelu(h @ p.w_in.data + p.b_in.data) @ p.w_out.data + p.b_out.data)


class DecodeSession:
    """Owns one generation: plan, caches, RNG, and the step loop."""

    def __init__(self, params: ModelParams, config: ModelConfig, plan: BlockPlan,
                 temperature: float = 1.0, seed: int = 0):
        self.params = params
        self.config = config
        self.plan = plan
        self.temperature = temperature
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = params.embed.dtype
        if config.query_mode == "shift" and not plan.is_identity():
            raise ValueError("shift query mode decodes left-to-right only")

        self.cache = KVCache(
            two_stream_keys=[self._empty_kv() for _ in params.two_stream],
            two_stream_values=[self._empty_kv() for _ in params.two_stream],
            causal_keys=[self._empty_kv() for _ in params.causal],
            causal_values=[self._empty_kv() for _ in params.causal],
            prefix_state=None,
            last_causal_query=[None for _ in params.two_stream],
        )
        self.prefix_rows = None
        if config.query_mode == "two_stream":
            from .model import _prefix_rows  # shares the projection definition

            self.prefix_rows = np.asarray(
                _prefix_rows(params.prefix, plan.n, self.dtype).data
            )
            self.cache.prefix_state = np.zeros(
                (config.prefix_width, config.dim), dtype=self.dtype
            )

    def _empty_kv(self) -> np.ndarray:
        return np.zeros((self.config.heads, 0, self.config.head_dim), dtype=self.dtype)

    # -- strict pathway: logits for a group of unwritten positions -------------

    def group_logits(self, original_positions: np.ndarray) -> np.ndarray:
        cfg = self.config
        pos = np.asarray(original_positions, dtype=np.int64)
        size = pos.shape[0]
        if cfg.query_mode == "two_stream":
            g = self.prefix_rows[pos] @ self.cache.prefix_state
        else:
            g = np.zeros((size, cfg.dim), dtype=self.dtype)

        for i, layer in enumerate(self.params.two_stream):
            if cfg.query_mode == "shift":
                prev = self.cache.last_causal_query[i]
                if prev is None:
                    q = np.repeat(
                        layer.start_query.data.reshape(cfg.heads, 1, cfg.head_dim),
                        size, axis=1,
                    )
                else:
                    q = np.repeat(prev, size, axis=1)
            else:
                h = _ln(g, layer.norm_strict_gain.data, layer.norm_strict_bias.data)
                q = _rope(_split(h @ layer.wq.data, cfg.heads), pos[None, :])
            attn = _attend_cached(
                q, self.cache.two_stream_keys[i], self.cache.two_stream_values[i],
                layer.wo.data,
            )
            g = g + attn
            g = _ffn(g, layer.ffn_strict)

        for i, layer in enumerate(self.params.causal):
            h = _ln(g, layer.norm_gain.data, layer.norm_bias.data)
            q = _rope(_split(h @ layer.wq.data, cfg.heads), pos[None, :])
            k_new = _rope(_split(h @ layer.wk.data, cfg.heads), pos[None, :])
            v_new = _split(h @ layer.wv.data, cfg.heads)
            keys = np.concatenate([self.cache.causal_keys[i], k_new], axis=1)
            values = np.concatenate([self.cache.causal_values[i], v_new], axis=1)
            g = g + _attend_cached(q, keys, values, layer.wo.data)
            g = _ffn(g, layer.ffn)
            # strict-stream states are final once computed, so cache immediately
            self.cache.causal_keys[i] = keys
            self.cache.causal_values[i] = values

        final = _ln(g, self.params.final_gain.data, self.params.final_bias.data)
        return final @ self.params.head.data

    # -- causal pathway: fold finished tokens into the caches ------------------

    def absorb_group(self, original_positions: np.ndarray, tokens: np.ndarray) -> None:
        cfg = self.config
        pos = np.asarray(original_positions, dtype=np.int64)
        x = self.params.embed.data[np.asarray(tokens, dtype=np.int64)]
        if self.cache.prefix_state is not None:
            self.cache.prefix_state += self.prefix_rows[pos].T @ x

        n_two = len(self.params.two_stream)
        for i, layer in enumerate(self.params.two_stream):
            h = _ln(x, layer.norm_causal_gain.data, layer.norm_causal_bias.data)
            k_new = _rope(_split(h @ layer.wk.data, cfg.heads), pos[None, :])
            v_new = _split(h @ layer.wv.data, cfg.heads)
            keys = np.concatenate([self.cache.two_stream_keys[i], k_new], axis=1)
            values = np.concatenate([self.cache.two_stream_values[i], v_new], axis=1)
            need_q = (i + 1 < n_two) or cfg.query_mode == "shift"
            if need_q:
                q = _rope(_split(h @ layer.wq.data, cfg.heads), pos[None, :])
                if cfg.query_mode == "shift":
                    self.cache.last_causal_query[i] = q[:, -1:, :].copy()
            self.cache.two_stream_keys[i] = keys
            self.cache.two_stream_values[i] = values
            if i + 1 < n_two:
                x = x + _attend_cached(q, keys, values, layer.wo.data)
                x = _ffn(x, layer.ffn_causal)
        self.cache.generated += pos.shape[0]

    def step(self, original_positions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One network call: logits, independent draws, cache update."""
        logits = self.group_logits(original_positions)
        size = logits.shape[0]
        tokens = np.empty(size, dtype=np.int64)
        logprobs = np.empty(size, dtype=np.float64)
        for j in range(size):
            base = _softmax_rows(logits[j].astype(np.float64))
            shaped = adjust_probs(base, self.temperature)
            tokens[j] = sample_token(base, self.temperature, self.rng)
            logprobs[j] = math.log(shaped[tokens[j]])
        self.absorb_group(original_positions, tokens)
        return tokens, logits, logprobs


def _run_session(params: ModelParams, config: ModelConfig, plan: BlockPlan,
                 temperature: float, seed: int) -> DecodeResult:
    gen_plan = GenerationPlan.from_block_plan(plan)
    session = DecodeSession(params, config, plan, temperature=temperature, seed=seed)
    tokens = np.zeros(plan.n, dtype=np.int64)
    logprobs = np.zeros(plan.n, dtype=np.float64)
    step_logits: list[np.ndarray] = []
    calls = 0
    for group in gen_plan.groups:
        drawn, logits, lp = session.step(group)
        tokens[group] = drawn
        logprobs[group] = lp
        step_logits.append(logits)
        calls += 1
    return DecodeResult(
        tokens=tokens, logprobs=logprobs, groups=gen_plan.groups,
        model_calls=calls, step_logits=step_logits, plan=plan,
    )


def generate_sequential(params: ModelParams, config: ModelConfig, n: int,
                        temperature: float = 1.0, seed: int = 0) -> DecodeResult:
    """One token at a time, left to right, with cached context."""
    if n < 1:
        raise ValueError("need a positive length")
    return _run_session(params, config, identity_plan(n), temperature, seed)


def generate_strided(params: ModelParams, config: ModelConfig, n: int, s: int,
                     temperature: float = 1.0, seed: int = 0) -> DecodeResult:
    """Stream heads sequentially, then groups of ``s`` far-apart tokens at once.

    Network calls total ``s + n/s - 1``. Within a group the joint draw
    factorizes: each member is sampled from its own conditional given all
    previously generated groups.
    """
    if n < 1:
        raise ValueError("need a positive length")
    if s < 1 or n % s != 0:
        raise ValueError(f"stream count {s} does not divide length {n}")
    return _run_session(params, config, strided_permutation(n, s), temperature, seed)
