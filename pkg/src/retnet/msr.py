"""Gated multi-scale retention: one decay rate per head, per-head GroupNorm,
a swish gate and an output projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .retention import (
    ParameterError,
    RetentionState,
    XPos,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
)

MODES = ("parallel", "recurrent", "chunkwise")


class ContractError(RuntimeError):
    """Caller broke a usage contract (e.g. recurrent mode without a state)."""


def head_gammas(h: int, precision: int = 64) -> np.ndarray:
    """Per-head decays ``1 - 2**(-5 - i)`` for ``i = 0..h-1``."""
    if h < 1:
        raise ParameterError("need at least one head")
    i = np.arange(h, dtype=nx.dtype_for(precision))
    return 1.0 - 2.0 ** (-5.0 - i)


@dataclass
class MsrParams:
    """Weights of one gated MSR layer.

    The projections are full ``d_model x d_model`` matrices; head ``i`` owns
    columns ``i*d:(i+1)*d`` of ``wq``, ``wk`` and ``wv``.  Fields may hold
    arrays or tape nodes.
    """

    wq: object
    wk: object
    wv: object
    wg: object
    wo: object
    gn_scale: object
    gn_shift: object
    gammas: object
    theta: object
    heads: int

    FIELDS = ("wq", "wk", "wv", "wg", "wo", "gn_scale", "gn_shift", "gammas", "theta")

    @property
    def d_model(self) -> int:
        return ad.value(self.wq).shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def xpos(self) -> XPos:
        return XPos(self.head_dim, self.theta)


def _split_heads(x, h):
    shape = ad.value(x).shape
    x = ad.reshape(x, shape[:-1] + (h, shape[-1] // h))
    nd = len(shape) + 1
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ad.permute(x, axes)


def _merge_heads(x):
    shape = ad.value(x).shape
    axes = list(range(len(shape)))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = ad.permute(x, axes)
    return ad.reshape(x, shape[:-3] + (shape[-2], shape[-3] * shape[-1]))


def msr_forward(
    x,
    params: MsrParams,
    mode: str = "parallel",
    state: RetentionState | None = None,
    chunk_len: int | None = None,
    stabilized: bool = False,
):
    """Run the layer on ``x`` of shape ``[..., n, d_model]``.

    ``state`` holds the per-head retention states stacked along a head axis
    (``s`` is ``[..., h, d, d]``).  Recurrent mode requires it; chunkwise
    mode starts from it when given.  Returns ``(output, new_state)``;
    ``new_state`` is ``None`` in parallel mode.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    xv = ad.value(x)
    if xv.shape[-1] != params.d_model:
        raise nx.DimensionError(f"input width {xv.shape[-1]} != d_model {params.d_model}")
    if params.d_model % params.heads:
        raise nx.DimensionError("d_model is not divisible by the number of heads")
    if mode == "recurrent" and state is None:
        raise ContractError("recurrent mode needs a retention state")
    h = params.heads
    start = state.position if (state is not None and mode != "parallel") else 0

    q = _split_heads(ad.matmul(x, params.wq), h)
    k = _split_heads(ad.matmul(x, params.wk), h)
    v = _split_heads(ad.matmul(x, params.wv), h)
    # keys take the same real rotation as queries: the real dot product
    # supplies the conjugation, leaving only the relative offset in q.k
    q = ad.xpos(q, params.theta, start)
    k = ad.xpos(k, params.theta, start)

    new_state = None
    if mode == "parallel":
        y = retention_parallel(q, k, v, params.gammas, stabilized)
    elif mode == "recurrent":
        y, new_state = retention_recurrent(q, k, v, ad.value(params.gammas), state, stabilized)
    else:
        if chunk_len is None:
            raise ContractError("chunkwise mode needs chunk_len")
        y, new_state = retention_chunkwise(q, k, v, ad.value(params.gammas), chunk_len, state, stabilized)

    y = ad.group_norm(_merge_heads(y), h, params.gn_scale, params.gn_shift)
    gate = ad.swish(ad.matmul(x, params.wg))
    return ad.matmul(ad.hadamard(gate, y), params.wo), new_state
