"""Single-head retention in its parallel, recurrent and chunkwise forms.

All three functions accept ``q, k, v`` shaped ``[..., n, d]``.  ``gamma`` is
either a scalar or a 1-D array with one decay per head, in which case the
head axis is the third-from-last axis of ``q`` (``[..., h, n, d]``).

Queries and keys must already carry their positional rotation
(:func:`xpos_apply`) at absolute positions.

Stabilized mode scales scores by ``1/sqrt(d)`` and divides each output row by
``max(sum of that row of the decay matrix, 1)``.  The row sum depends only on
the absolute position, so every form can apply it without seeing the whole
sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics as nx


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its valid range."""


def _check_gamma(gamma) -> None:
    g = np.asarray(ad.value(gamma))
    if not np.all((g > 0) & (g <= 1)):
        raise ParameterError(f"gamma must lie in (0, 1], got {g}")


@dataclass(frozen=True)
class DecayMask:
    seq_len: int
    gamma: float
    entries: np.ndarray


def decay_mask(seq_len: int, gamma: float, precision: int = 64) -> DecayMask:
    """Lower-triangular ``D[n, m] = gamma**(n - m)``."""
    if seq_len < 1:
        raise ParameterError("seq_len must be at least 1")
    _check_gamma(gamma)
    g = np.array([gamma], dtype=nx.dtype_for(precision))
    entries = ad.decay_matrix_values(g, seq_len, False)[0]
    return DecayMask(seq_len, float(gamma), entries)


@dataclass
class XPos:
    """Per-pair rotation frequencies shared by all heads of a layer."""

    head_dim: int
    theta: np.ndarray
    trainable: bool = False

    @classmethod
    def default(cls, head_dim: int, base: float = 10000.0, trainable: bool = False, precision: int = 64):
        if head_dim % 2:
            raise nx.DimensionError(f"head_dim must be even, got {head_dim}")
        j = np.arange(head_dim // 2, dtype=nx.dtype_for(precision))
        return cls(head_dim, base ** (-2.0 * j / head_dim), trainable)


def xpos_apply(x, xpos: XPos, start_position: int = 0, conjugate: bool = False):
    """Rotate each (even, odd) coordinate pair of row ``p`` by ``(start+p) * theta``.

    ``conjugate`` flips the rotation direction (the inverse rotation).
    """
    d = ad.value(x).shape[-1]
    if d % 2:
        raise nx.DimensionError(f"head_dim must be even, got {d}")
    if d != xpos.head_dim:
        raise nx.DimensionError(f"x has head_dim {d}, xpos expects {xpos.head_dim}")
    if start_position < 0:
        raise ParameterError("start_position must be non-negative")
    return ad.xpos(x, xpos.theta, start_position, conjugate)


@dataclass
class RetentionState:
    """Running ``d x d`` state (leading head/batch axes allowed) and tokens absorbed."""

    s: np.ndarray
    position: int = 0

    @classmethod
    def fresh(cls, head_dim: int, lead: tuple[int, ...] = (), precision: int = 64):
        return cls(np.zeros(lead + (head_dim, head_dim), dtype=nx.dtype_for(precision)), 0)

    @property
    def nbytes(self) -> int:
        return self.s.nbytes

    def head(self, i: int) -> "RetentionState":
        return RetentionState(self.s[..., i, :, :], self.position)


def _gamma_col(gamma, dtype):
    """gamma as an array that broadcasts against ``[..., h, n, d]``."""
    g = np.asarray(gamma, dtype=dtype)
    return g if g.ndim == 0 else g[:, None, None]


def _row_norms(gamma, start: int, count: int, dtype) -> np.ndarray:
    """``max(sum_{j<=p} gamma**j, 1)`` for absolute positions ``start..start+count-1``."""
    g = _gamma_col(gamma, dtype)
    p = np.arange(start, start + count, dtype=dtype)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = np.where(g == 1, p + 1, (1 - g ** (p + 1)) / (1 - np.where(g == 1, 0.5, g)))
    return np.maximum(geo, 1.0)


def retention_parallel(q, k, v, gamma, stabilized: bool = False):
    """``(q k^T * D) v`` over the whole sequence.

    Differentiable: accepts tape nodes for ``q, k, v`` and, when decays are
    trained, for ``gamma``.
    """
    qv, kv, vv = ad.value(q), ad.value(k), ad.value(v)
    if not (qv.shape[-2] == kv.shape[-2] == vv.shape[-2]):
        raise nx.DimensionError(f"sequence lengths differ: {qv.shape}, {kv.shape}, {vv.shape}")
    if qv.shape[-1] != kv.shape[-1]:
        raise nx.DimensionError("q and k head dims differ")
    _check_gamma(gamma)
    n, d = qv.shape[-2], qv.shape[-1]
    scalar = np.ndim(ad.value(gamma)) == 0
    gammas = gamma
    if scalar:
        gammas = np.asarray([gamma], dtype=qv.dtype)
    elif not isinstance(gamma, ad.Node):
        gammas = np.asarray(gamma, dtype=qv.dtype)
    mask = ad.decay_matrix(gammas, n, stabilized)
    if scalar:
        mask = ad.reshape(mask, (n, n))
    if stabilized:
        # scaling the small [h, n, n] mask is cheaper than scaling every score
        mask = ad.scale(mask, 1.0 / math.sqrt(d))
    scores = ad.matmul(q, ad.transpose(k))
    return ad.matmul(ad.hadamard(scores, mask), v)


def retention_recurrent_step(state: RetentionState, q_n, k_n, v_n, gamma, stabilized: bool = False):
    """Absorb one token: ``S = gamma*S + k^T v``, output ``q S``.

    ``q_n, k_n, v_n`` are ``[..., d]`` rows at absolute position ``state.position``.
    """
    _check_gamma(gamma)
    q_n, k_n, v_n = (np.asarray(t) for t in (q_n, k_n, v_n))
    dtype = state.s.dtype
    g = _gamma_col(gamma, dtype)
    s = nx.add(nx.hadamard(state.s, g), nx.matmul(k_n[..., :, None], v_n[..., None, :]))
    o = nx.matmul(q_n[..., None, :], s)[..., 0, :]
    if stabilized:
        norm = _row_norms(gamma, state.position, 1, dtype)[..., 0, :]
        o = o / (math.sqrt(q_n.shape[-1]) * norm)
    return RetentionState(s, state.position + 1), o


def retention_recurrent(q, k, v, gamma, state: RetentionState | None = None, stabilized: bool = False):
    """Token-by-token loop over :func:`retention_recurrent_step`."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if state is None:
        state = RetentionState.fresh(q.shape[-1], q.shape[:-2], 64 if q.dtype == np.float64 else 32)
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    for t in range(q.shape[-2]):
        state, out[..., t, :] = retention_recurrent_step(
            state, q[..., t, :], k[..., t, :], v[..., t, :], gamma, stabilized
        )
    return out, state


def retention_chunkwise(
    q,
    k,
    v,
    gamma,
    chunk_len: int,
    initial_state: RetentionState | None = None,
    stabilized: bool = False,
):
    """Parallel inside chunks of ``chunk_len`` tokens, recurrent across chunks.

    The final chunk may be shorter; its decay exponents use its actual length.
    """
    if chunk_len < 1:
        raise ParameterError("chunk_len must be at least 1")
    _check_gamma(gamma)
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    n, d = q.shape[-2], q.shape[-1]
    dtype = q.dtype
    if initial_state is None:
        initial_state = RetentionState.fresh(d, q.shape[:-2], 64 if dtype == np.float64 else 32)
    g = _gamma_col(gamma, dtype)
    flat_g = np.atleast_1d(np.asarray(gamma, dtype=dtype))
    scalar = np.ndim(gamma) == 0
    r = initial_state.s
    start = initial_state.position
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=dtype)
    qscale = 1.0 / math.sqrt(d) if stabilized else 1.0
    for a in range(0, n, chunk_len):
        b = min(a + chunk_len, n)
        width = b - a
        qc, kc, vc = q[..., a:b, :], k[..., a:b, :], v[..., a:b, :]
        mask = ad.decay_matrix_values(flat_g, width, False)
        if scalar:
            mask = mask[0]
        j = np.arange(width, dtype=dtype)[:, None]
        xi = g ** (j + 1)
        zeta = g ** (width - j - 1)
        scores = nx.hadamard(nx.matmul(qc, np.swapaxes(kc, -1, -2)), mask)
        inner = nx.matmul(scores, vc)
        cross = nx.hadamard(nx.matmul(qc, r), xi)
        o = nx.add(inner, cross) * qscale
        if stabilized:
            o = o / _row_norms(gamma, start + a, width, dtype)
        out[..., a:b, :] = o
        r = nx.add(nx.matmul(np.swapaxes(kc, -1, -2), nx.hadamard(vc, zeta)), nx.hadamard(r, g**width))
    return out, RetentionState(r, start + n)
