"""Scaled dot-product attention, multi-head attention and feed-forward layers.

All layers act on the last axis and accept any number of leading batch
dimensions, so ``[T, d]`` and ``[B, T, d]`` inputs both work.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Initializer, Module, Tensor


class ConfigurationError(ValueError):
    """Inconsistent layer or model dimensions."""


@dataclass
class AttentionMask:
    """Which keys each query may see.

    ``key_padding`` is a boolean array ``[..., m]`` (True marks padding).
    ``blocked`` optionally forbids arbitrary ``[..., n, m]`` query/key pairs.
    """

    causal: bool = False
    key_padding: np.ndarray | None = None
    blocked: np.ndarray | None = None

    @property
    def kind(self) -> str:
        if self.causal and self.key_padding is not None:
            return "causal+padding"
        if self.causal:
            return "causal"
        if self.key_padding is not None:
            return "padding"
        return "none"

    def disallowed(self, n: int, m: int) -> np.ndarray | None:
        """Boolean ``[..., 1, n, m]`` (head axis kept) or None when nothing is masked."""
        out = None
        if self.causal:
            out = np.triu(np.ones((n, m), dtype=bool), k=1)
        if self.key_padding is not None:
            pad = np.asarray(self.key_padding, dtype=bool)[..., None, :]
            out = pad if out is None else out | pad
        if self.blocked is not None:
            blk = np.asarray(self.blocked, dtype=bool)
            out = blk if out is None else out | blk
        if out is None:
            return None
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, (n, m)))[..., None, :, :]


NO_MASK = AttentionMask()


def _bias(mask: AttentionMask | None, n: int, m: int) -> np.ndarray | None:
    if mask is None:
        return None
    banned = mask.disallowed(n, m)
    if banned is None:
        return None
    if banned.all(axis=-1).any():
        raise ContractError("attention mask hides every key from some query row")
    return np.where(banned, ad.MASK_VALUE, 0.0)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None = None,
                         _bias_cache: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ad.DimensionError(f"query/key feature sizes differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ad.DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    scores = ad.matmul(q, ad.swap_last(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    bias = _bias_cache
    if bias is None and mask is not None:
        bias = _bias(mask, q.shape[-2], k.shape[-2])
        if bias is not None:
            bias = bias[..., 0, :, :]  # no head axis at this level
    if bias is not None:
        scores = scores + bias
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def attention_weights(q: np.ndarray, k: np.ndarray, mask: AttentionMask | None = None) -> np.ndarray:
    """Plain-array attention weights, for inspection and tests."""
    with ad.no_grad():
        scores = ad.matmul(Tensor(q), Tensor(np.swapaxes(k, -1, -2))) * (1.0 / np.sqrt(q.shape[-1]))
        bias = _bias(mask, q.shape[-2], k.shape[-2])
        if bias is not None:
            scores = scores + bias[..., 0, :, :]
        return ad.softmax(scores).data


class MultiHeadAttention(Module):
    """h parallel heads; head i uses column block i of the d x d projections."""

    def __init__(self, d: int, h: int, init: Initializer, name: str):
        if h < 1 or d % h:
            raise ConfigurationError(f"model dimension {d} is not divisible by head count {h}")
        self.d, self.h = d, h
        self.w_q = init.xavier(f"{name}.w_q", (d, d))
        self.w_k = init.xavier(f"{name}.w_k", (d, d))
        self.w_v = init.xavier(f"{name}.w_v", (d, d))
        self.w_o = init.xavier(f"{name}.w_o", (d, d))

    def _split(self, x: Tensor) -> Tensor:
        # [..., n, d] -> [..., h, n, d/h]
        x = ad.reshape(x, x.shape[:-1] + (self.h, self.d // self.h))
        return ad.swap_last(x, -2, -3)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: AttentionMask | None = None) -> Tensor:
        for seq in (query, key, value):
            if seq.shape[-1] != self.d:
                raise ad.DimensionError(f"expected feature size {self.d}, got {seq.shape}")
        n, m = query.shape[-2], key.shape[-2]
        bias = _bias(mask, n, m)
        q = self._split(query @ self.w_q)
        k = self._split(key @ self.w_k)
        v = self._split(value @ self.w_v)
        heads = scaled_dot_attention(q, k, v, _bias_cache=bias)
        merged = ad.swap_last(heads, -2, -3)
        merged = ad.reshape(merged, merged.shape[:-2] + (self.d,))
        return merged @ self.w_o


def multi_head(params: MultiHeadAttention, query_seq: Tensor, key_seq: Tensor, value_seq: Tensor,
               mask: AttentionMask | None = None) -> Tensor:
    return params(query_seq, key_seq, value_seq, mask)


class FeedForward(Module):
    """``max(0, x W1 + b1) W2 + b2``."""

    def __init__(self, d: int, d_ff: int, init: Initializer, name: str):
        self.w_1 = init.xavier(f"{name}.w_1", (d, d_ff))
        self.b_1 = init.zeros(f"{name}.b_1", (d_ff,))
        self.w_2 = init.xavier(f"{name}.w_2", (d_ff, d))
        self.b_2 = init.zeros(f"{name}.b_2", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x @ self.w_1 + self.b_1) @ self.w_2 + self.b_2


class LayerNorm(Module):
    def __init__(self, d: int, init: Initializer, name: str, eps: float = 1e-9):
        self.gain = init.ones(f"{name}.gain", (d,))
        self.bias = init.zeros(f"{name}.bias", (d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout:
    """Dropout shared by every layer of one model; toggled by the owner."""

    def __init__(self, p: float = 0.0, seed: int = 0):
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {p}")
        self.p = p
        self.training = False
        self.rng = ad.keyed_rng(seed, "dropout")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.training, self.rng)


class Sublayer(Module):
    """Post-norm residual wrapper: ``layer_norm(x + dropout(f(x)))``."""

    def __init__(self, d: int, init: Initializer, name: str, drop: Dropout | None = None):
        self.norm = LayerNorm(d, init, f"{name}.norm")
        self._drop = drop

    def __call__(self, x: Tensor, fx: Tensor) -> Tensor:
        if fx.shape != x.shape:
            raise ContractError(f"sublayer function changed shape {x.shape} -> {fx.shape}")
        if self._drop is not None:
            fx = self._drop(fx)
        return self.norm(x + fx)


def sublayer(x: Tensor, f, norm: LayerNorm, drop: Dropout | None = None) -> Tensor:
    """Functional form of :class:`Sublayer` taking the callable ``f``."""
    fx = f(x)
    if fx.shape != x.shape:
        raise ContractError(f"sublayer function changed shape {x.shape} -> {fx.shape}")
    if drop is not None:
        fx = drop(fx)
    return norm(x + fx)


class EncoderLayer(Module):
    """Self-attention then feed-forward, each wrapped in a post-norm residual."""

    def __init__(self, d: int, h: int, d_ff: int, init: Initializer, name: str, drop: Dropout | None = None):
        self.self_attn = MultiHeadAttention(d, h, init, f"{name}.self_attn")
        self.attn_sub = Sublayer(d, init, f"{name}.attn_sub", drop)
        self.ffn = FeedForward(d, d_ff, init, f"{name}.ffn")
        self.ffn_sub = Sublayer(d, init, f"{name}.ffn_sub", drop)

    def __call__(self, x: Tensor, mask: AttentionMask | None = None) -> Tensor:
        x = self.attn_sub(x, self.self_attn(x, x, x, mask))
        return self.ffn_sub(x, self.ffn(x))


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoids: even features ``sin(t / 10000^(2i/d))``, odd features ``cos``."""
    if length < 1:
        raise ContractError(f"positional encoding length must be >= 1, got {length}")
    key = (length, d)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        rates = 1.0 / np.power(10000.0, np.arange(0, d, 2) / d)
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(pos * rates)
        pe[:, 1::2] = np.cos(pos * rates[: d // 2])
        pe.flags.writeable = False
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]
