"""The block-causal two-stream network.

The network reads tokens in processed (unmasking) order and emits, at every
position, logits for that token conditioned on strictly earlier blocks only.
It keeps two residual streams:

* the causal stream may see its own block and every earlier one; it supplies
  the shared key/value context,
* the strict stream may see strictly earlier blocks only; it supplies the
  queries for its own update and is what the output head reads.

The strict stream is seeded by prefix aggregation, a linear-attention layer
whose coupling weights are dot products of position embeddings carried by the
tokens. A stack of two-stream layers deepens both streams, then a stack of
plain causal layers runs on the strict stream alone; composing causal layers
after one strictly causal stage preserves strict causality end to end, so the
whole network stays strictly causal.

Attention projections are shared between the streams of a layer; each stream
has its own feed-forward block. All blocks are pre-norm residual. Rotary
position rotations use each token's original position, so a prediction
depends on the set of (token, position) pairs in its context and not on their
processed arrangement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import FLOAT32, Precision, Tensor
from .masks import MaskPair

__all__ = [
    "ModelConfig",
    "ModelParams",
    "StreamState",
    "PlanView",
    "init_params",
    "prefix_aggregate",
    "two_stream_layer",
    "causal_layer",
    "forward",
    "forward_batch",
    "forward_states",
    "flops_estimate",
    "layer_flop_components",
    "sinusoidal_table",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``two_stream_layers`` of the ``layers`` total run both streams; the rest
    are plain causal layers over the strict stream. ``query_mode`` selects how
    the strict query is formed: ``two_stream`` derives it from the strict
    stream, ``shift`` reuses the previous position's causal query, which is
    only valid for the left-to-right order and collapses the network into a
    conventional next-token model.
    """

    vocab: int
    dim: int
    heads: int
    layers: int
    two_stream_layers: int
    pe_dim: int = 0
    ffn_expansion: float = 4.0
    dropout: float = 0.0
    query_mode: str = "two_stream"

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if (self.dim // self.heads) % 2 != 0:
            raise ValueError("head width must be even for rotary rotations")
        if not (0 <= self.two_stream_layers <= self.layers):
            raise ValueError("two_stream_layers must lie in [0, layers]")
        if self.query_mode not in ("two_stream", "shift"):
            raise ValueError(f"unknown query_mode {self.query_mode!r}")
        if self.query_mode == "shift" and self.two_stream_layers < 1:
            raise ValueError("shift mode needs at least one two-stream layer")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def prefix_width(self) -> int:
        return self.pe_dim if self.pe_dim > 0 else self.dim

    @property
    def ffn_hidden(self) -> int:
        return max(1, int(round(self.dim * self.ffn_expansion)))

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "dim": self.dim,
            "heads": self.heads,
            "layers": self.layers,
            "two_stream_layers": self.two_stream_layers,
            "pe_dim": self.pe_dim,
            "ffn_expansion": self.ffn_expansion,
            "dropout": self.dropout,
            "query_mode": self.query_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FfnParams:
    norm_gain: Tensor
    norm_bias: Tensor
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass
class TwoStreamLayerParams:
    """One two-stream layer: shared attention weights, per-stream norms/FFNs."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_causal_gain: Tensor
    norm_causal_bias: Tensor
    norm_strict_gain: Tensor
    norm_strict_bias: Tensor
    ffn_causal: FfnParams
    ffn_strict: FfnParams
    start_query: Tensor | None = None


@dataclass
class CausalLayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    ffn: FfnParams


@dataclass
class PrefixParams:
    """Two-layer perceptron from the sinusoidal table to prefix embeddings."""

    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass
class StreamState:
    """Paired residual streams of one layer boundary (shapes equal)."""

    causal: Tensor
    strict: Tensor


@dataclass(frozen=True)
class PlanView:
    """The slice of plan information the network consumes.

    ``to_original`` carries each processed token's position tag; unlike a full
    plan it need not be a permutation of ``range(n)``, which lets oracle code
    evaluate the model on block prefixes of a longer sequence.
    """

    n: int
    num_blocks: int
    block_of: np.ndarray
    to_original: np.ndarray


def _as_view(plan) -> PlanView:
    if isinstance(plan, PlanView):
        return plan
    return PlanView(
        n=plan.n,
        num_blocks=plan.num_blocks,
        block_of=np.asarray(plan.block_of),
        to_original=np.asarray(plan.to_original),
    )


class ModelParams:
    """All learnable weights, with a stable flat naming for IO and optimizers."""

    def __init__(self, embed: Tensor, prefix: PrefixParams | None,
                 two_stream: list[TwoStreamLayerParams],
                 causal: list[CausalLayerParams],
                 final_gain: Tensor, final_bias: Tensor, head: Tensor):
        self.embed = embed
        self.prefix = prefix
        self.two_stream = two_stream
        self.causal = causal
        self.final_gain = final_gain
        self.final_bias = final_bias
        self.head = head

    def _ffn_named(self, base: str, ffn: FfnParams):
        yield f"{base}.norm_gain", ffn.norm_gain
        yield f"{base}.norm_bias", ffn.norm_bias
        yield f"{base}.w_in", ffn.w_in
        yield f"{base}.b_in", ffn.b_in
        yield f"{base}.w_out", ffn.w_out
        yield f"{base}.b_out", ffn.b_out

    def named(self):
        """(name, tensor) pairs in a stable order."""
        yield "embed", self.embed
        if self.prefix is not None:
            yield "prefix.w_in", self.prefix.w_in
            yield "prefix.b_in", self.prefix.b_in
            yield "prefix.w_out", self.prefix.w_out
            yield "prefix.b_out", self.prefix.b_out
        for i, layer in enumerate(self.two_stream):
            base = f"two_stream.{i}"
            yield f"{base}.wq", layer.wq
            yield f"{base}.wk", layer.wk
            yield f"{base}.wv", layer.wv
            yield f"{base}.wo", layer.wo
            yield f"{base}.norm_causal_gain", layer.norm_causal_gain
            yield f"{base}.norm_causal_bias", layer.norm_causal_bias
            yield f"{base}.norm_strict_gain", layer.norm_strict_gain
            yield f"{base}.norm_strict_bias", layer.norm_strict_bias
            yield from self._ffn_named(f"{base}.ffn_causal", layer.ffn_causal)
            yield from self._ffn_named(f"{base}.ffn_strict", layer.ffn_strict)
            if layer.start_query is not None:
                yield f"{base}.start_query", layer.start_query
        for i, layer in enumerate(self.causal):
            base = f"causal.{i}"
            yield f"{base}.wq", layer.wq
            yield f"{base}.wk", layer.wk
            yield f"{base}.wv", layer.wv
            yield f"{base}.wo", layer.wo
            yield f"{base}.norm_gain", layer.norm_gain
            yield f"{base}.norm_bias", layer.norm_bias
            yield from self._ffn_named(f"{base}.ffn", layer.ffn)
        yield "final_norm.gain", self.final_gain
        yield "final_norm.bias", self.final_bias
        yield "head", self.head

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


def _normal(rng, shape, dtype, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def _init_ffn(rng, dim: int, hidden: int, dtype) -> FfnParams:
    return FfnParams(
        norm_gain=_ones((dim,), dtype),
        norm_bias=_zeros((dim,), dtype),
        w_in=_normal(rng, (dim, hidden), dtype),
        b_in=_zeros((hidden,), dtype),
        w_out=_normal(rng, (hidden, dim), dtype),
        b_out=_zeros((dim,), dtype),
    )


def init_params(config: ModelConfig, rng: np.random.Generator,
                precision: Precision = FLOAT32) -> ModelParams:
    """Fresh parameters; the output head starts at zero, so an untrained model
    predicts the uniform distribution."""
    dtype = precision.dtype
    d = config.dim
    hidden = config.ffn_hidden
    pe = config.prefix_width
    latent = max(1, d // 4)

    prefix = None
    if config.query_mode == "two_stream":
        prefix = PrefixParams(
            w_in=_normal(rng, (pe, latent), dtype),
            b_in=_zeros((latent,), dtype),
            w_out=_normal(rng, (latent, pe), dtype),
            b_out=_zeros((pe,), dtype),
        )

    two_stream = []
    for _ in range(config.two_stream_layers):
        two_stream.append(TwoStreamLayerParams(
            wq=_normal(rng, (d, d), dtype),
            wk=_normal(rng, (d, d), dtype),
            wv=_normal(rng, (d, d), dtype),
            wo=_normal(rng, (d, d), dtype),
            norm_causal_gain=_ones((d,), dtype),
            norm_causal_bias=_zeros((d,), dtype),
            norm_strict_gain=_ones((d,), dtype),
            norm_strict_bias=_zeros((d,), dtype),
            ffn_causal=_init_ffn(rng, d, hidden, dtype),
            ffn_strict=_init_ffn(rng, d, hidden, dtype),
            start_query=_normal(rng, (d,), dtype) if config.query_mode == "shift" else None,
        ))

    causal = []
    for _ in range(config.layers - config.two_stream_layers):
        causal.append(CausalLayerParams(
            wq=_normal(rng, (d, d), dtype),
            wk=_normal(rng, (d, d), dtype),
            wv=_normal(rng, (d, d), dtype),
            wo=_normal(rng, (d, d), dtype),
            norm_gain=_ones((d,), dtype),
            norm_bias=_zeros((d,), dtype),
            ffn=_init_ffn(rng, d, hidden, dtype),
        ))

    return ModelParams(
        embed=_normal(rng, (config.vocab, d), dtype),
        prefix=prefix,
        two_stream=two_stream,
        causal=causal,
        final_gain=_ones((d,), dtype),
        final_bias=_zeros((d,), dtype),
        head=_zeros((d, config.vocab), dtype),
    )


# -- position tables ---------------------------------------------------------

def sinusoidal_table(n_positions: int, width: int, dtype=np.float64) -> np.ndarray:
    """Classical fixed sinusoidal embeddings, one row per position."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    half = (width + 1) // 2
    angles = pos / (10000.0 ** (2.0 * np.arange(half, dtype=np.float64) / width))
    table = np.zeros((n_positions, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angles[:, : (width + 1) // 2])
    table[:, 1::2] = np.cos(angles[:, : width // 2])
    return table.astype(dtype)


def _prefix_rows(prefix: PrefixParams, n_positions: int, dtype) -> Tensor:
    """Project the sinusoidal table through the two-layer perceptron."""
    table = Tensor(sinusoidal_table(n_positions, prefix.w_in.shape[0], dtype))
    hidden = kernel.gelu(table @ prefix.w_in + prefix.b_in)
    return hidden @ prefix.w_out + prefix.b_out


# -- attention plumbing --------------------------------------------------------

def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, hd = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


def _attend(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray, wo: Tensor,
            drop_rate: float, rng) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    probs = kernel.masked_softmax(scores, allowed)
    probs = kernel.dropout(probs, drop_rate, rng)
    return _merge_heads(probs @ v) @ wo


def _ffn_block(x: Tensor, p: FfnParams, drop_rate: float, rng) -> Tensor:
    h = kernel.layer_norm(x, p.norm_gain, p.norm_bias)
    h = kernel.gelu(h @ p.w_in + p.b_in)
    out = h @ p.w_out + p.b_out
    return x + kernel.dropout(out, drop_rate, rng)


def _shift_queries(q_causal: Tensor, start_query: Tensor, heads: int) -> Tensor:
    """Strict queries for shift mode: position n reuses query n-1.

    The first position gets the learned start query (rotation at position
    zero is the identity, so it is used unrotated).
    """
    b, h, n, hd = q_causal.shape
    start = start_query.reshape(1, heads, 1, hd)
    start = kernel.broadcast_to(start, (b, heads, 1, hd))
    if n == 1:
        return start
    return kernel.concat([start, q_causal[:, :, : n - 1, :]], axis=2)


def _two_stream_block(causal_x: Tensor, strict_g: Tensor, layer: TwoStreamLayerParams,
                      config: ModelConfig, positions: np.ndarray,
                      causal_allowed: np.ndarray, strict_allowed: np.ndarray,
                      drop_rate: float, rng, update_causal: bool) -> tuple[Tensor, Tensor]:
    """One layer update on batched streams [B, n, d].

    ``positions`` is the [B, 1, n] array of original-position tags;
    ``*_allowed`` are [B, 1, n, n] boolean masks. Keys and values are
    projected once from the causal stream and shared by both updates. When
    ``update_causal`` is false the causal stream has no further consumer and
    its update is skipped.
    """
    heads = config.heads
    hc = kernel.layer_norm(causal_x, layer.norm_causal_gain, layer.norm_causal_bias)
    k = kernel.rope_rotate(_split_heads(hc @ layer.wk, heads), positions)
    v = _split_heads(hc @ layer.wv, heads)

    need_causal_q = update_causal or config.query_mode == "shift"
    q_causal = None
    if need_causal_q:
        q_causal = kernel.rope_rotate(_split_heads(hc @ layer.wq, heads), positions)

    if config.query_mode == "shift":
        q_strict = _shift_queries(q_causal, layer.start_query, heads)
    else:
        hs = kernel.layer_norm(strict_g, layer.norm_strict_gain, layer.norm_strict_bias)
        q_strict = kernel.rope_rotate(_split_heads(hs @ layer.wq, heads), positions)

    strict_g = strict_g + _attend(q_strict, k, v, strict_allowed, layer.wo, drop_rate, rng)
    strict_g = _ffn_block(strict_g, layer.ffn_strict, drop_rate, rng)

    if update_causal:
        causal_x = causal_x + _attend(q_causal, k, v, causal_allowed, layer.wo, drop_rate, rng)
        causal_x = _ffn_block(causal_x, layer.ffn_causal, drop_rate, rng)
    return causal_x, strict_g


def _causal_block(g: Tensor, layer: CausalLayerParams, config: ModelConfig,
                  positions: np.ndarray, causal_allowed: np.ndarray,
                  drop_rate: float, rng) -> Tensor:
    heads = config.heads
    h = kernel.layer_norm(g, layer.norm_gain, layer.norm_bias)
    q = kernel.rope_rotate(_split_heads(h @ layer.wq, heads), positions)
    k = kernel.rope_rotate(_split_heads(h @ layer.wk, heads), positions)
    v = _split_heads(h @ layer.wv, heads)
    g = g + _attend(q, k, v, causal_allowed, layer.wo, drop_rate, rng)
    return _ffn_block(g, layer.ffn, drop_rate, rng)


def _prefix_aggregate_batch(x: Tensor, views: list[PlanView],
                            params: ModelParams) -> Tensor:
    """Strict-stream seed: position-weighted sums over strictly earlier blocks.

    Equals ``((R R^T) * S) X`` per sequence, where R gathers each token's
    projected position embedding and S is the 0/1 strict mask. Rows in the
    first block come out all-zero.
    """
    dtype = x.dtype
    max_pos = max(int(v.to_original.max()) for v in views) + 1
    rows_table = _prefix_rows(params.prefix, max_pos, dtype)
    tags = np.stack([v.to_original for v in views])
    rows = kernel.embedding(rows_table, tags)               # [B, n, pe]
    coupling = rows @ rows.transpose(0, 2, 1)               # [B, n, n]
    strict01 = np.stack(
        [(v.block_of[None, :] < v.block_of[:, None]).astype(dtype) for v in views]
    )
    return (coupling * strict01) @ x


def _stacked_masks(views: list[PlanView], dtype=bool) -> tuple[np.ndarray, np.ndarray]:
    causal = np.stack([v.block_of[None, :] <= v.block_of[:, None] for v in views])[:, None]
    strict = np.stack([v.block_of[None, :] < v.block_of[:, None] for v in views])[:, None]
    return causal, strict


def _require_identity_views(views: list[PlanView]) -> None:
    for v in views:
        if not np.array_equal(v.to_original, np.arange(v.n)) or v.num_blocks != v.n:
            raise ValueError("shift query mode requires the left-to-right identity plan")


def forward_batch(tokens: np.ndarray, plans, params: ModelParams, config: ModelConfig,
                  rng: np.random.Generator | None = None, train: bool = False,
                  return_states: bool = False):
    """Logits [B, n, vocab] for a batch of processed-order sequences.

    Each sequence carries its own plan. Dropout only runs when ``train`` is
    true and a generator is supplied.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("forward_batch expects [batch, length] token ids")
    views = [_as_view(p) for p in plans]
    if len(views) != tokens.shape[0]:
        raise ValueError("one plan per sequence is required")
    n = tokens.shape[1]
    for v in views:
        if v.n != n:
            raise ValueError(f"plan length {v.n} does not match token count {n}")
    if config.query_mode == "shift":
        _require_identity_views(views)

    drop_rate = config.dropout if train else 0.0
    if drop_rate > 0.0 and rng is None:
        raise ValueError("training with dropout needs a generator")

    causal_allowed, strict_allowed = _stacked_masks(views)
    positions = np.stack([v.to_original for v in views])[:, None, :]

    x = kernel.embedding(params.embed, tokens)
    if config.query_mode == "two_stream":
        g = _prefix_aggregate_batch(x, views, params)
    else:
        g = Tensor(np.zeros_like(x.data))

    n_two = len(params.two_stream)
    for i, layer in enumerate(params.two_stream):
        update_causal = i + 1 < n_two
        x, g = _two_stream_block(
            x, g, layer, config, positions, causal_allowed, strict_allowed,
            drop_rate, rng, update_causal,
        )
    for layer in params.causal:
        g = _causal_block(g, layer, config, positions, causal_allowed, drop_rate, rng)

    final = kernel.layer_norm(g, params.final_gain, params.final_bias)
    logits = final @ params.head
    if return_states:
        return logits, StreamState(causal=x, strict=g)
    return logits


def forward(tokens, plan, params: ModelParams, config: ModelConfig,
            rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Single-sequence logits [n, vocab]; see ``forward_batch``."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("forward expects a flat token sequence")
    view = _as_view(plan)
    if ids.shape[0] != view.n:
        raise ValueError(f"plan length {view.n} does not match token count {ids.shape[0]}")
    logits = forward_batch(ids[None, :], [view], params, config, rng=rng, train=train)
    return logits.reshape(view.n, config.vocab)


def forward_states(tokens, plan, params: ModelParams, config: ModelConfig) -> tuple[Tensor, StreamState]:
    """Logits plus the final stream tensors, for causality diagnostics."""
    ids = np.asarray(tokens, dtype=np.int64)
    view = _as_view(plan)
    logits, state = forward_batch(ids[None, :], [view], params, config, return_states=True)
    return (
        logits.reshape(view.n, config.vocab),
        StreamState(
            causal=state.causal.reshape(view.n, config.dim),
            strict=state.strict.reshape(view.n, config.dim),
        ),
    )


# -- single-sequence layer operations -----------------------------------------

def prefix_aggregate(x_embedded: Tensor, plan, params: ModelParams) -> Tensor:
    """Seed of the strict stream for one sequence; rows of block one are zero."""
    view = _as_view(plan)
    batched = x_embedded.reshape(1, view.n, x_embedded.shape[-1])
    out = _prefix_aggregate_batch(batched, [view], params)
    return out.reshape(view.n, x_embedded.shape[-1])


def two_stream_layer(state: StreamState, plan, masks: MaskPair,
                     layer_params: TwoStreamLayerParams, config: ModelConfig) -> StreamState:
    """One two-stream update on a single sequence (both streams refreshed)."""
    view = _as_view(plan)
    n, d = state.causal.shape
    positions = view.to_original[None, None, :]
    causal_allowed = masks.causal.allowed[None, None]
    strict_allowed = masks.strict.allowed[None, None]
    cx, sg = _two_stream_block(
        state.causal.reshape(1, n, d), state.strict.reshape(1, n, d),
        layer_params, config, positions, causal_allowed, strict_allowed,
        0.0, None, update_causal=True,
    )
    return StreamState(causal=cx.reshape(n, d), strict=sg.reshape(n, d))


def causal_layer(g: Tensor, plan, masks: MaskPair,
                 layer_params: CausalLayerParams, config: ModelConfig) -> Tensor:
    """One plain causal update over the strict stream, single sequence."""
    view = _as_view(plan)
    n, d = g.shape
    positions = view.to_original[None, None, :]
    causal_allowed = masks.causal.allowed[None, None]
    out = _causal_block(
        g.reshape(1, n, d), layer_params, config, positions, causal_allowed, 0.0, None,
    )
    return out.reshape(n, d)


# -- cost model ------------------------------------------------------------------

def layer_flop_components(n: int, dim: int, ffn_expansion: float = 8.0 / 3.0) -> dict:
    """Per-layer FLOP terms of the cost model, split dense vs attention.

    The standard layer covers query/key/value/output projections plus a gated
    feed-forward at the given expansion; the extra-stream term covers the
    second query and output path, an independent feed-forward, and a second
    attention map over the shared keys and values.
    """
    dense_unit = float(n) * dim * dim
    attn_unit = float(n) * n * dim
    ffn_flops = 6.0 * ffn_expansion * dense_unit
    return {
        "standard_dense": 8.0 * dense_unit + ffn_flops,
        "standard_attention": 4.0 * attn_unit,
        "extra_dense": 4.0 * dense_unit + ffn_flops,
        "extra_attention": 4.0 * attn_unit,
    }


def flops_estimate(n: int, dim: int, layers: int, two_stream_layers: int,
                   ffn_expansion: float = 8.0 / 3.0) -> tuple[float, float]:
    """Total forward FLOPs and the ratio against an all-standard stack."""
    if not (0 <= two_stream_layers <= layers) or layers < 1:
        raise ValueError("need 0 <= two_stream_layers <= layers and layers >= 1")
    parts = layer_flop_components(n, dim, ffn_expansion)
    c_std = parts["standard_dense"] + parts["standard_attention"]
    c_extra = parts["extra_dense"] + parts["extra_attention"]
    total = two_stream_layers * (c_std + c_extra) + (layers - two_stream_layers) * c_std
    return total, total / (layers * c_std)
