"""Retention networks on numpy: parallel, recurrent and chunkwise retention,
a tape autodiff, training on synthetic tasks, and an attention baseline."""

from .model import DecodeState, ModelConfig, decode_step, greedy_generate, init_params, lm_forward
from .msr import msr_forward
from .retention import (
    RetentionState,
    XPos,
    decay_mask,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
    retention_recurrent_step,
)
from .training import TrainConfig, train

__all__ = [
    "DecodeState",
    "ModelConfig",
    "RetentionState",
    "TrainConfig",
    "XPos",
    "decay_mask",
    "decode_step",
    "greedy_generate",
    "init_params",
    "lm_forward",
    "msr_forward",
    "retention_chunkwise",
    "retention_parallel",
    "retention_recurrent",
    "retention_recurrent_step",
    "train",
]
__version__ = "0.1.0"
