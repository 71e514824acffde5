"""Causal multi-head softmax attention, the comparison baseline.

Blocks are wired exactly like the retention blocks (pre-LN, residuals,
``gelu`` FFN) with attention in place of MSR.  Position information comes
only from a learned absolute embedding added to the token embedding.
Incremental decoding keeps a key/value cache that grows with every token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelConfig, _check_tokens, ffn, xavier_uniform
from .prng import Prng


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = True) -> np.ndarray:
    """``softmax(q k^T / sqrt(d_k)) v`` over ``[..., n, d]`` inputs.

    With ``causal`` the query at row ``i`` sees keys ``0..i + (m - n)``,
    where ``m`` is the key count, so a suffix of queries can attend over
    a longer key history.
    """
    if q.shape[-1] != k.shape[-1]:
        raise nx.DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise nx.DimensionError("keys and values differ in length")
    scores = nx.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1])
    if causal:
        n, m = q.shape[-2], k.shape[-2]
        if n > m:
            raise nx.DimensionError("more queries than keys in causal attention")
        hidden = np.arange(m)[None, :] > (np.arange(n)[:, None] + (m - n))
        scores = np.where(hidden, -np.inf, scores)
    return nx.matmul(nx.softmax_rows(scores), v)


@dataclass
class AttnParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int


@dataclass
class AttnBlockParams:
    attn: AttnParams
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class AttnModelParams:
    embedding: np.ndarray
    positions: np.ndarray
    blocks: list[AttnBlockParams]
    final_scale: np.ndarray
    final_shift: np.ndarray


def init_attention_params(config: ModelConfig) -> AttnModelParams:
    """Same distributions as :func:`retnet.model.init_params`."""
    rng = Prng(config.seed)
    d, f, dt = config.d_model, config.ffn_dim, config.dtype

    def normal(shape):
        return rng.normal(shape, std=d**-0.5).astype(dt)

    def xavier(a, b):
        return xavier_uniform(rng, a, b).astype(dt)

    embedding = normal((config.vocab_size, d))
    positions = normal((config.max_positions, d))
    blocks = []
    for _ in range(config.layers):
        attn = AttnParams(xavier(d, d), xavier(d, d), xavier(d, d), xavier(d, d), config.heads)
        one, zero = np.ones(d, dtype=dt), np.zeros(d, dtype=dt)
        blocks.append(AttnBlockParams(attn, one, zero, one.copy(), zero.copy(), xavier(d, f), xavier(f, d)))
    return AttnModelParams(embedding, positions, blocks, np.ones(d, dtype=dt), np.zeros(d, dtype=dt))


class KVCache:
    """Per-layer key/value history, ``[heads, length, head_dim]`` each.

    Storage grows by doubling; :attr:`nbytes` counts only the filled part.
    """

    def __init__(self, layers: int, heads: int, head_dim: int, dtype, capacity: int = 64) -> None:
        self.layers, self.heads, self.head_dim = layers, heads, head_dim
        self.dtype = np.dtype(dtype)
        self._k = [np.empty((heads, capacity, head_dim), dtype=dtype) for _ in range(layers)]
        self._v = [np.empty((heads, capacity, head_dim), dtype=dtype) for _ in range(layers)]
        self.lengths = [0] * layers

    @property
    def length(self) -> int:
        return self.lengths[-1]

    @property
    def nbytes(self) -> int:
        return sum(2 * self.heads * n * self.head_dim * self.dtype.itemsize for n in self.lengths)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        """Store new ``[heads, t, head_dim]`` entries; return the full history views."""
        n, t = self.lengths[layer], k.shape[-2]
        cap = self._k[layer].shape[1]
        if n + t > cap:
            new_cap = max(2 * cap, n + t)
            for buf in (self._k, self._v):
                grown = np.empty((self.heads, new_cap, self.head_dim), dtype=self.dtype)
                grown[:, :n] = buf[layer][:, :n]
                buf[layer] = grown
        self._k[layer][:, n : n + t] = k
        self._v[layer][:, n : n + t] = v
        self.lengths[layer] = n + t
        return self._k[layer][:, : n + t], self._v[layer][:, : n + t]


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    d = x.shape[-1]
    return np.swapaxes(x.reshape(x.shape[:-1] + (h, d // h)), -3, -2)


def _merge(x: np.ndarray) -> np.ndarray:
    x = np.swapaxes(x, -3, -2)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def mha_forward(x: np.ndarray, params: AttnParams, cache: KVCache | None = None, layer: int = 0):
    """Multi-head causal attention over ``x`` of shape ``[..., n, d_model]``.

    With a cache, ``x`` holds only the new tokens (unbatched); their keys and
    values are appended and the queries attend over the whole history.
    """
    h = params.heads
    q = _heads(nx.matmul(x, params.wq), h)
    k = _heads(nx.matmul(x, params.wk), h)
    v = _heads(nx.matmul(x, params.wv), h)
    if cache is not None:
        k, v = cache.append(layer, k, v)
    y = attention(q, k, v, causal=True)
    return nx.matmul(_merge(y), params.wo), cache


def attn_block_forward(x, params: AttnBlockParams, cache: KVCache | None = None, layer: int = 0):
    h = nx.layer_norm(x, scale=params.ln1_scale, shift=params.ln1_shift)
    a, cache = mha_forward(h, params.attn, cache, layer)
    y = x + a
    f = ffn(nx.layer_norm(y, scale=params.ln2_scale, shift=params.ln2_shift), params.w1, params.w2)
    return y + f, cache


def _logits(x, params: AttnModelParams):
    x = nx.layer_norm(x, scale=params.final_scale, shift=params.final_shift)
    return nx.matmul(x, params.embedding.T)


def attn_lm_forward(tokens, params: AttnModelParams, config: ModelConfig) -> np.ndarray:
    tokens = _check_tokens(tokens, config)
    n = tokens.shape[-1]
    x = params.embedding[tokens] + params.positions[:n]
    for b in params.blocks:
        x, _ = attn_block_forward(x, b)
    return _logits(x, params)


def new_cache(config: ModelConfig, capacity: int = 64) -> KVCache:
    return KVCache(config.layers, config.heads, config.head_dim, config.dtype, capacity)


def attn_decode_step(cache: KVCache, token: int, params: AttnModelParams, config: ModelConfig):
    """One incremental step; returns ``(cache, logits)``.  The cache is updated in place."""
    pos = cache.length
    _check_tokens([token], config, start=pos)
    x = (params.embedding[int(token)] + params.positions[pos])[None, :]
    for i, b in enumerate(params.blocks):
        x, _ = attn_block_forward(x, b, cache, i)
    return cache, _logits(x, params)[0]
