"""Binary checkpoint format.

Layout (all integers little-endian ``u32``)::

    b"RNET" | version | header_len | header (UTF-8) | blob * N

The header is the model config as ``key=value`` lines, keys sorted.  Blobs
follow in :meth:`retnet.model.ModelParams.named` order; each is an element
count followed by that many little-endian float32 values.  Parameters are
stored as float32 whatever the run precision, so only float32 models round
trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..model import ModelConfig, ModelParams, param_shapes
from .config import MODEL_KEYS, ConfigError, _parse_value

MAGIC = b"RNET"
VERSION = 1
_U32 = struct.Struct("<I")


class IntegrityError(ValueError):
    """The checkpoint is truncated, corrupted or inconsistent with its header."""


def encode_header(config: ModelConfig) -> bytes:
    pairs = config.to_pairs()
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs)).encode()


def decode_header(raw: bytes) -> ModelConfig:
    kw = {}
    try:
        text = raw.decode()
    except UnicodeDecodeError as exc:
        raise IntegrityError("header is not valid UTF-8") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or key not in MODEL_KEYS:
            raise IntegrityError(f"bad header line {lineno}: {line!r}")
        try:
            kw[key] = _parse_value(value, MODEL_KEYS[key], lineno)
        except ConfigError as exc:
            raise IntegrityError(f"header: {exc}") from exc
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise IntegrityError(f"header config invalid: {exc}") from exc


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    header = encode_header(config)
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(header)), header]
    for name, arr in params.named().items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_U32.pack(data.size))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise IntegrityError("not a checkpoint (bad magic)")
    (version,) = _U32.unpack_from(raw, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (hlen,) = _U32.unpack_from(raw, 8)
    if 12 + hlen > len(raw):
        raise IntegrityError("truncated header")
    config = decode_header(raw[12 : 12 + hlen])
    off = 12 + hlen
    named = {}
    for name, shape in param_shapes(config).items():
        if off + 4 > len(raw):
            raise IntegrityError(f"truncated before blob {name}")
        (count,) = _U32.unpack_from(raw, off)
        off += 4
        expected = int(np.prod(shape))
        if count != expected:
            raise IntegrityError(f"blob {name} holds {count} values, header implies {expected}")
        end = off + 4 * count
        if end > len(raw):
            raise IntegrityError(f"blob {name} is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        if not np.isfinite(arr).all():
            raise IntegrityError(f"blob {name} contains non-finite values")
        named[name] = arr.astype(config.dtype)
        off = end
    if off != len(raw):
        raise IntegrityError(f"{len(raw) - off} trailing bytes after the last blob")
    return ModelParams.from_named(config, named), config
