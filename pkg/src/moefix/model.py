"""Decoder-only transformer whose feed-forward blocks are MoE layers.

Pre-norm RMS blocks, rotary position encoding, SwiGLU experts, output
projection tied to the token embedding. During training the MoE layers run the
task-forced route; during inference they run plain top-K and never see the
task-to-expert mapping (the mapping is resolved by the caller, so this module
cannot read it by construction).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe import (
    ExpertParams,
    MoeLayerParams,
    RoutingDecision,
    load_balance_aux,
    moe_forward_infer,
    moe_forward_task,
)

INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    n_experts: int = 4
    top_k: int = 2
    max_seq_len: int = 384
    rope_base: float = 10000.0
    rms_eps: float = 1e-5

    def __post_init__(self) -> None:
        sizes = (self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                 self.d_ff, self.n_experts, self.max_seq_len)
        if any(s < 1 for s in sizes):
            raise ValueError("all model sizes must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model // self.n_heads % 2 != 0:
            raise ValueError("head dimension must be even for rotary encoding")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} out of range for {self.n_experts} experts")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "n_experts",
            "top_k", "max_seq_len", "rope_base", "rms_eps")}


@dataclass
class LayerParams:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    moe: MoeLayerParams


@dataclass
class TransformerParams:
    embedding: Tensor  # [vocab, d_model]; also the (tied) output projection
    layers: list[LayerParams]
    final_norm: Tensor


def named_tensors(params: TransformerParams):
    yield "embedding", params.embedding
    for i, layer in enumerate(params.layers):
        for attr in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm"):
            yield f"layers.{i}.{attr}", getattr(layer, attr)
        yield f"layers.{i}.moe.gate", layer.moe.gate
        for e, expert in enumerate(layer.moe.experts):
            yield f"layers.{i}.moe.experts.{e}.up", expert.up
            yield f"layers.{i}.moe.experts.{e}.gate_proj", expert.gate_proj
            yield f"layers.{i}.moe.experts.{e}.down", expert.down
    yield "final_norm", params.final_norm


def parameters(params: TransformerParams) -> list[Tensor]:
    return [t for _, t in named_tensors(params)]


def param_count(params: TransformerParams) -> int:
    return sum(t.data.size for t in parameters(params))


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 3 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 3 * std
    return out.astype(dtype)


def init_params(config: ModelConfig, seed: int, dtype: str = "f32") -> TransformerParams:
    """Fresh parameters: weights ~ N(0, 0.02^2) truncated at 3 sigma, unit norms."""
    np_dtype = ad.DTYPES[dtype]
    rng = np.random.default_rng(seed)
    d, dff, ne = config.d_model, config.d_ff, config.n_experts

    def weight(*shape):
        return Tensor(_trunc_normal(rng, shape, INIT_STD, np_dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=np_dtype), requires_grad=True)

    layers = []
    for _ in range(config.n_layers):
        experts = [ExpertParams(up=weight(d, dff), gate_proj=weight(d, dff), down=weight(dff, d))
                   for _ in range(ne)]
        layers.append(LayerParams(
            attn_norm=ones(d), wq=weight(d, d), wk=weight(d, d), wv=weight(d, d),
            wo=weight(d, d), ffn_norm=ones(d),
            moe=MoeLayerParams(gate=weight(d, ne), experts=experts),
        ))
    return TransformerParams(
        embedding=weight(config.vocab_size, d),
        layers=layers,
        final_norm=ones(d),
    )


def rope_tables(config: ModelConfig, positions: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin shaped [T, 1, head_dim/2]; the middle axis broadcasts over heads."""
    half = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(half, dtype=np.float64) / half)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return (np.cos(angles)[:, None, :].astype(dtype),
            np.sin(angles)[:, None, :].astype(dtype))


def causal_attention(
    x: Tensor,
    layer: LayerParams,
    config: ModelConfig,
    positions: np.ndarray,
) -> Tensor:
    """Multi-head attention with rotary Q/K and a strict causal mask."""
    b, t, d = x.data.shape
    if t > config.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    h, hd = config.n_heads, config.head_dim
    cos, sin = rope_tables(config, positions, x.data.dtype)

    def heads(w, rotate):
        y = ad.reshape(ad.matmul(x, w), (b, t, h, hd))
        if rotate:
            y = ad.rope(y, cos, sin)
        return ad.swapaxes(y, 1, 2)  # [B, H, T, hd]

    q = heads(layer.wq, rotate=True)
    k = heads(layer.wk, rotate=True)
    v = heads(layer.wv, rotate=False)

    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
    causal = positions[None, :] <= positions[:, None]  # key pos <= query pos
    att = ad.softmax(scores, mask=causal)
    mixed = ad.swapaxes(ad.matmul(att, v), 1, 2)
    return ad.matmul(ad.reshape(mixed, (b, t, d)), layer.wo)


def forward(
    params: TransformerParams,
    config: ModelConfig,
    tokens: np.ndarray,
    mode: str = "infer",
    task_experts=None,
    top_k: int | None = None,
    renormalize_pair: bool = True,
    aux_out: list | None = None,
) -> tuple[Tensor, list[RoutingDecision]]:
    """Next-token logits [.., T, vocab] plus one RoutingDecision per layer.

    ``tokens`` is [T] or [B, T] integer ids. In train mode ``task_experts``
    (scalar or one id per sequence) drives the task-forced route; in infer mode
    routing is plain top-K and any task argument is ignored.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and task_experts is None:
        raise ValueError("train mode requires task_experts for the forced route")
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    ids = tokens[None, :] if single else tokens
    b, t = ids.shape
    positions = np.arange(t)

    x = ad.take(params.embedding, ids)
    d = config.d_model
    decisions: list[RoutingDecision] = []
    for layer in params.layers:
        x = ad.add(x, causal_attention(ad.rms_norm(x, layer.attn_norm, config.rms_eps),
                                       layer, config, positions))
        flat = ad.reshape(ad.rms_norm(x, layer.ffn_norm, config.rms_eps), (b * t, d))
        if mode == "train":
            per_seq = np.broadcast_to(np.asarray(task_experts, dtype=np.int64), (b,))
            y, decision = moe_forward_task(flat, layer.moe, np.repeat(per_seq, t),
                                           renormalize_pair=renormalize_pair)
        else:
            y, decision = moe_forward_infer(flat, layer.moe, top_k or config.top_k)
        if aux_out is not None:
            aux_out.append(load_balance_aux(flat, layer.moe.gate, decision))
        decisions.append(decision)
        x = ad.add(x, ad.reshape(y, (b, t, d)))

    x = ad.rms_norm(x, params.final_norm, config.rms_eps)
    logits = ad.matmul(x, ad.transpose(params.embedding))
    if single:
        logits = ad.reshape(logits, (t, config.vocab_size))
    return logits, decisions


class KVCache:
    """Per-layer key/value prefix for incremental greedy decoding."""

    def __init__(self, n_layers: int) -> None:
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers
        self.length = 0


def forward_incremental(
    params: TransformerParams,
    config: ModelConfig,
    new_tokens: np.ndarray,
    cache: KVCache,
    top_k: int | None = None,
) -> tuple[np.ndarray, list[RoutingDecision]]:
    """Inference forward over appended tokens only; returns logits [t, vocab]."""
    ids = np.asarray(new_tokens)[None, :]
    b, t = ids.shape
    start = cache.length
    if start + t > config.max_seq_len:
        raise ValueError(f"sequence length {start + t} exceeds max_seq_len {config.max_seq_len}")
    positions = np.arange(start, start + t)
    cos, sin = rope_tables(config, positions, params.embedding.data.dtype)
    h, hd, d = config.n_heads, config.head_dim, config.d_model

    x = ad.take(params.embedding, ids)
    decisions = []
    for i, layer in enumerate(params.layers):
        hn = ad.rms_norm(x, layer.attn_norm, config.rms_eps)

        def heads(w, rotate):
            y = ad.reshape(ad.matmul(hn, w), (b, t, h, hd))
            if rotate:
                y = ad.rope(y, cos, sin)
            return np.swapaxes(y.data, 1, 2)

        q = heads(layer.wq, rotate=True)
        k_new = heads(layer.wk, rotate=True)
        v_new = heads(layer.wv, rotate=False)
        cache.k[i] = k_new if cache.k[i] is None else np.concatenate([cache.k[i], k_new], axis=2)
        cache.v[i] = v_new if cache.v[i] is None else np.concatenate([cache.v[i], v_new], axis=2)

        scores = Tensor(q @ np.swapaxes(cache.k[i], -1, -2) * (1.0 / np.sqrt(hd)))
        key_pos = np.arange(start + t)
        att = ad.softmax(scores, mask=key_pos[None, :] <= positions[:, None])
        mixed = np.swapaxes(att.data @ cache.v[i], 1, 2).reshape(b, t, d)
        x = ad.add(x, ad.matmul(Tensor(mixed), layer.wo))

        flat = ad.reshape(ad.rms_norm(x, layer.ffn_norm, config.rms_eps), (b * t, d))
        y, decision = moe_forward_infer(flat, layer.moe, top_k or config.top_k)
        decisions.append(decision)
        x = ad.add(x, ad.reshape(y, (b, t, d)))

    x = ad.rms_norm(x, params.final_norm, config.rms_eps)
    logits = ad.matmul(x, ad.transpose(params.embedding))
    cache.length = start + t
    return logits.data[0], decisions


def generate(
    params: TransformerParams,
    config: ModelConfig,
    prompt_ids: np.ndarray,
    max_new_tokens: int,
    eos_id: int,
    top_k: int | None = None,
) -> np.ndarray:
    """Greedy decoding after ``prompt_ids``; stops at EOS or the length caps."""
    cache = KVCache(config.n_layers)
    logits, _ = forward_incremental(params, config, np.asarray(prompt_ids), cache, top_k)
    out: list[int] = []
    next_id = int(np.argmax(logits[-1]))
    for _ in range(max_new_tokens):
        out.append(next_id)
        if next_id == eos_id or cache.length >= config.max_seq_len:
            break
        logits, _ = forward_incremental(params, config, np.array([next_id]), cache, top_k)
        next_id = int(np.argmax(logits[-1]))
    return np.array(out, dtype=np.int64)
