"""Decode-throughput benchmark: retention state vs. a growing KV cache."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .. import numerics as nx
from ..attention import attn_decode_step, init_attention_params, new_cache
from ..model import DecodeState, ModelConfig, decode_step, init_params
from ..prng import Prng

CSV_HEADER = ["mechanism", "mode", "seq_len", "d_model", "heads", "layers", "wall_ms", "tokens_per_s", "state_bytes"]
MECHANISMS = ("retention", "attention")
WARMUP = 64


def reference_config(**overrides) -> ModelConfig:
    """L=4, d_model=256, h=8, 32-bit elements."""
    base = dict(layers=4, d_model=256, heads=8, vocab_size=256, precision=32, max_positions=8192, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class BenchRecord:
    mechanism: str
    mode: str
    seq_len: int
    d_model: int
    heads: int
    layers: int
    wall_ms: float
    tokens_per_s: float
    state_bytes: int
    # multiply-accumulates spent on each decoded token, in order
    macs: list[int] = field(default_factory=list, repr=False)

    @property
    def ms_per_token(self) -> float:
        return self.wall_ms / self.seq_len

    def row(self) -> list:
        return [
            self.mechanism,
            self.mode,
            self.seq_len,
            self.d_model,
            self.heads,
            self.layers,
            f"{self.wall_ms:.3f}",
            f"{self.tokens_per_s:.2f}",
            self.state_bytes,
        ]


def _decoder(mechanism: str, config: ModelConfig):
    """Returns (fresh_state, step, state_bytes) callables for one mechanism."""
    if mechanism == "retention":
        params = init_params(config)
        return (
            lambda: DecodeState.fresh(config),
            lambda s, t: decode_step(s, t, params, config)[0],
            lambda s: s.nbytes,
        )
    if mechanism == "attention":
        params = init_attention_params(config)
        return (
            lambda: new_cache(config),
            lambda c, t: attn_decode_step(c, t, params, config)[0],
            lambda c: c.nbytes,
        )
    raise ValueError(f"unknown mechanism {mechanism!r}")


def bench_decode(
    config: ModelConfig,
    lengths,
    mechanisms=MECHANISMS,
    warmup: int = WARMUP,
    count_macs: bool = True,
    threads: int = 1,
) -> list[BenchRecord]:
    """Time decoding ``n`` tokens from an empty state for each length ``n``.

    A separate ``warmup``-token run precedes each timed run and is not timed.
    ``state_bytes`` is the largest auxiliary state seen (retention state or
    filled KV cache).
    """
    lengths = [int(n) for n in lengths]
    need = max(lengths + [warmup])
    if need > config.max_positions:
        config = replace(config, max_positions=need)
    tokens = Prng(config.seed).integers(0, config.vocab_size, (need,))
    records = []
    with threadpool_limits(limits=threads):
        for mech in mechanisms:
            fresh, step, nbytes = _decoder(mech, config)
            mode = "recurrent" if mech == "retention" else "kv-cache"
            for n in lengths:
                state = fresh()
                for t in tokens[:warmup]:
                    state = step(state, t)
                state = fresh()
                macs: list[int] = []
                peak = nbytes(state)
                t0 = time.perf_counter()
                if count_macs:
                    for t in tokens[:n]:
                        with nx.count_macs() as box:
                            state = step(state, t)
                        macs.append(box[0])
                else:
                    for t in tokens[:n]:
                        state = step(state, t)
                wall = time.perf_counter() - t0
                peak = max(peak, nbytes(state))
                records.append(
                    BenchRecord(
                        mech, mode, n, config.d_model, config.heads, config.layers,
                        wall * 1e3, n / wall, peak, macs,
                    )
                )
    return records


def write_bench_csv(path, records: list[BenchRecord], threads: int = 1, note: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# threads={threads}\n")
        fh.write("# attention baseline uses learned absolute position embeddings only\n")
        if note:
            fh.write(f"# {note}\n")
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(rows))


def per_token_ratio(records: list[BenchRecord], mechanism: str, long: int, short: int) -> float:
    by_len = {r.seq_len: r for r in records if r.mechanism == mechanism}
    return by_len[long].ms_per_token / by_len[short].ms_per_token


def mac_slope(macs: list[int]) -> tuple[int, int] | None:
    """``(base, step)`` when ``macs[p] == base + step * p`` exactly, else ``None``."""
    arr = np.asarray(macs, dtype=np.int64)
    if arr.size < 2:
        return (int(arr[0]), 0) if arr.size else None
    step = int(arr[1] - arr[0])
    base = int(arr[0])
    expected = base + step * np.arange(arr.size, dtype=np.int64)
    return (base, step) if np.array_equal(arr, expected) else None
