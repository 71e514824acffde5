"""Stacked RetNet language model.

Each block is ``Y = MSR(LN(X)) + X`` followed by ``X' = FFN(LN(Y)) + Y`` with
``FFN(X) = gelu(X W1) W2``.  Token embeddings feed the first block; a final
LayerNorm and the transposed embedding table produce logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .msr import MODES, MsrParams, head_gammas, msr_forward
from .prng import Prng
from .retention import ParameterError, RetentionState, XPos


class InputError(ValueError):
    """Token ids or positions outside the model's range."""


@dataclass
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int | None = None  # None -> 2 * d_model
    vocab_size: int = 16
    chunk_len: int = 16
    max_positions: int = 8192
    stabilized: bool = False
    trainable_theta: bool = False
    trainable_gamma: bool = False
    final_norm: bool = True
    precision: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.d_model < 1:
            raise ParameterError("layers, heads and d_model must be positive")
        if self.d_model % self.heads:
            raise ParameterError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if (self.d_model // self.heads) % 2:
            raise ParameterError("head dim must be even for the pairwise rotation")
        if self.ffn_dim < 1:
            raise ParameterError("ffn_dim must be at least 1")
        if self.vocab_size < 2:
            raise ParameterError("vocab_size must be at least 2")
        if self.chunk_len < 1 or self.max_positions < 1:
            raise ParameterError("chunk_len and max_positions must be positive")
        nx.dtype_for(self.precision)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def dtype(self) -> np.dtype:
        return nx.dtype_for(self.precision)

    def to_pairs(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = str(v).lower() if isinstance(v, bool) else str(v)
        return out


@dataclass
class BlockParams:
    msr: MsrParams
    ln1_scale: object
    ln1_shift: object
    ln2_scale: object
    ln2_shift: object
    w1: object
    w2: object


@dataclass
class ModelParams:
    embedding: object
    blocks: list[BlockParams]
    final_scale: object
    final_shift: object

    def named(self) -> dict[str, object]:
        """Parameters in the fixed order used by checkpoints and the optimizer."""
        out = {"embedding": self.embedding}
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            out[p + "ln1.scale"] = b.ln1_scale
            out[p + "ln1.shift"] = b.ln1_shift
            for name in MsrParams.FIELDS:
                out[p + "msr." + name] = getattr(b.msr, name)
            out[p + "ln2.scale"] = b.ln2_scale
            out[p + "ln2.shift"] = b.ln2_shift
            out[p + "ffn.w1"] = b.w1
            out[p + "ffn.w2"] = b.w2
        out["final_ln.scale"] = self.final_scale
        out["final_ln.shift"] = self.final_shift
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, named: dict) -> "ModelParams":
        blocks = []
        for i in range(config.layers):
            p = f"blocks.{i}."
            msr = MsrParams(**{n: named[p + "msr." + n] for n in MsrParams.FIELDS}, heads=config.heads)
            blocks.append(
                BlockParams(
                    msr,
                    named[p + "ln1.scale"],
                    named[p + "ln1.shift"],
                    named[p + "ln2.scale"],
                    named[p + "ln2.shift"],
                    named[p + "ffn.w1"],
                    named[p + "ffn.w2"],
                )
            )
        return cls(named["embedding"], blocks, named["final_ln.scale"], named["final_ln.shift"])

    def trainable_names(self, config: ModelConfig) -> list[str]:
        names = []
        for name in self.named():
            if name.endswith("msr.gammas") and not config.trainable_gamma:
                continue
            if name.endswith("msr.theta") and not config.trainable_theta:
                continue
            names.append(name)
        return names

    def num_parameters(self, config: ModelConfig) -> int:
        named = self.named()
        return sum(ad.value(named[n]).size for n in self.trainable_names(config))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, h = config.d_model, config.ffn_dim, config.heads
    shapes = {"embedding": (config.vocab_size, d)}
    for i in range(config.layers):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.scale": (d,),
                p + "ln1.shift": (d,),
                p + "msr.wq": (d, d),
                p + "msr.wk": (d, d),
                p + "msr.wv": (d, d),
                p + "msr.wg": (d, d),
                p + "msr.wo": (d, d),
                p + "msr.gn_scale": (d,),
                p + "msr.gn_shift": (d,),
                p + "msr.gammas": (h,),
                p + "msr.theta": (config.head_dim // 2,),
                p + "ln2.scale": (d,),
                p + "ln2.shift": (d,),
                p + "ffn.w1": (d, f),
                p + "ffn.w2": (f, d),
            }
        )
    shapes["final_ln.scale"] = (d,)
    shapes["final_ln.shift"] = (d,)
    return shapes


def xavier_uniform(rng: Prng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * bound


def init_params(config: ModelConfig) -> ModelParams:
    """Embedding ~ N(0, d_model**-0.5), projections Xavier-uniform, norms at identity.

    Draws happen in :meth:`ModelParams.named` order from one SplitMix64 stream.
    """
    config.validate()
    rng = Prng(config.seed)
    dt = config.dtype
    gammas = head_gammas(config.heads, config.precision)
    theta = XPos.default(config.head_dim, precision=config.precision).theta
    named = {}
    for name, shape in param_shapes(config).items():
        if name == "embedding":
            arr = rng.normal(shape, std=config.d_model**-0.5)
        elif name.endswith("scale"):
            arr = np.ones(shape)
        elif name.endswith("shift"):
            arr = np.zeros(shape)
        elif name.endswith("gammas"):
            arr = gammas.copy()
        elif name.endswith("theta"):
            arr = theta.copy()
        else:
            arr = xavier_uniform(rng, *shape)
        named[name] = np.asarray(arr, dtype=dt)
    return ModelParams.from_named(config, named)


def ffn(x, w1, w2):
    return ad.matmul(ad.gelu(ad.matmul(x, w1)), w2)


def block_forward(
    x,
    params: BlockParams,
    config: ModelConfig,
    mode: str = "parallel",
    state: RetentionState | None = None,
    chunk_len: int | None = None,
    residual: bool = True,
):
    """One block.  ``residual=False`` drops both skip connections (ablation only)."""
    h = ad.layer_norm(x, params.ln1_scale, params.ln1_shift)
    m, state = msr_forward(
        h, params.msr, mode, state, chunk_len or config.chunk_len, config.stabilized
    )
    y = ad.add(m, x) if residual else m
    f = ffn(ad.layer_norm(y, params.ln2_scale, params.ln2_shift), params.w1, params.w2)
    return (ad.add(f, y) if residual else f), state


def _check_tokens(tokens, config: ModelConfig, start: int = 0) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (1, 2):
        raise InputError("tokens must be a sequence or a batch of sequences")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    if start + tokens.shape[-1] > config.max_positions:
        raise InputError(f"sequence exceeds max_positions={config.max_positions}")
    return tokens


def head_logits(x, params: ModelParams, config: ModelConfig):
    if config.final_norm:
        x = ad.layer_norm(x, params.final_scale, params.final_shift)
    return ad.matmul(x, ad.transpose(params.embedding))


def lm_forward(
    tokens,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "parallel",
    chunk_len: int | None = None,
):
    """Logits ``[..., n, vocab]`` for ``tokens`` of shape ``[n]`` or ``[batch, n]``.

    Only parallel mode can be differentiated (pass tape nodes as params).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    tokens = _check_tokens(tokens, config)
    x = ad.gather(params.embedding, tokens)
    for b in params.blocks:
        state = None
        if mode == "recurrent":
            state = RetentionState.fresh(
                config.head_dim, tokens.shape[:-1] + (config.heads,), config.precision
            )
        x, _ = block_forward(x, b, config, mode, state, chunk_len)
    return head_logits(x, params, config)


@dataclass
class DecodeState:
    """Per-layer retention states (head axis inside ``s``) and the next position."""

    layers: list[RetentionState]
    position: int = 0

    @classmethod
    def fresh(cls, config: ModelConfig) -> "DecodeState":
        return cls(
            [RetentionState.fresh(config.head_dim, (config.heads,), config.precision) for _ in range(config.layers)]
        )

    @property
    def nbytes(self) -> int:
        # per-layer position counters mirror self.position; count one int64
        return sum(s.nbytes for s in self.layers) + 8


def decode_step(state: DecodeState, token: int, params: ModelParams, config: ModelConfig):
    """Feed one token through every layer in recurrent form.

    Returns ``(new_state, logits)`` with ``logits`` of shape ``[vocab]``.
    """
    if state.position >= config.max_positions:
        raise InputError(f"position {state.position} reaches max_positions={config.max_positions}")
    if not 0 <= int(token) < config.vocab_size:
        raise InputError(f"token id {token} out of range")
    x = params.embedding[int(token)][None, :]
    new_layers = []
    for b, s in zip(params.blocks, state.layers):
        x, s = block_forward(x, b, config, "recurrent", s)
        new_layers.append(s)
    logits = head_logits(x, params, config)[0]
    return DecodeState(new_layers, state.position + 1), logits


def greedy_generate(
    prompt, steps: int, params: ModelParams, config: ModelConfig, mode: str = "recurrent"
) -> list[int]:
    """Greedy continuation of ``prompt``; ties go to the lowest token id.

    ``recurrent`` decodes with constant state; ``parallel`` and ``chunkwise``
    re-run the whole prefix each step.
    """
    out = [int(t) for t in prompt]
    if not out:
        raise InputError("prompt must contain at least one token")
    if mode == "recurrent":
        state = DecodeState.fresh(config)
        for t in out[:-1]:
            state, _ = decode_step(state, t, params, config)
        for _ in range(steps):
            state, logits = decode_step(state, out[-1], params, config)
            out.append(int(np.argmax(logits)))
        return out
    for _ in range(steps):
        logits = lm_forward(out, params, config, mode)
        out.append(int(np.argmax(logits[-1])))
    return out
