"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment, blank lines are ignored.  Keys
are the field names of :class:`~retnet.model.ModelConfig` and
:class:`~retnet.training.TrainConfig`; ``seed`` and ``vocab_size`` are shared
by both.  Unknown keys are errors.  Defaults:

======================  =========  ======================================
key                     default    meaning
======================  =========  ======================================
layers                  2          number of blocks
d_model                 64         model width
heads                   4          retention heads
ffn_dim                 2*d_model  FFN hidden width
vocab_size              16         token ids are ``0..vocab_size-1``
chunk_len               16         chunk length for chunkwise mode
max_positions           8192       longest sequence / decode position
stabilized              false      score scaling + decay row normalization
trainable_theta         false      learn the rotation frequencies
trainable_gamma         false      learn the head decays (experimental)
final_norm              true       LayerNorm before the output head
precision               64         element width in bits (32 or 64)
seed                    0          PRNG seed (init and task sampling)
task                    copy       ``copy`` or ``associative-recall``
steps                   2000       optimizer steps
batch_size              64         sequences per step
lr                      3e-4       Adam learning rate
beta1 / beta2 / eps     0.9 / 0.98 / 1e-8
eval_interval           100        steps between held-out evaluations
eval_batch              256        held-out batch size
seq_len                 64         training sequence length
======================  =========  ======================================
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from ..model import ModelConfig
from ..training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str, "int | None": int}
    return {f.name: hints[f.type] for f in fields(cls)}


MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)


def _parse_value(raw: str, kind: type, line: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}", line) from None


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in MODEL_KEYS and key not in TRAIN_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in MODEL_KEYS:
            model_kw[key] = _parse_value(raw, MODEL_KEYS[key], lineno)
        if key in TRAIN_KEYS:
            train_kw[key] = _parse_value(raw, TRAIN_KEYS[key], lineno)
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text())
