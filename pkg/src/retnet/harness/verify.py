"""Self-check suite behind ``retnet verify``.

Each check returns ``(passed, detail)``.  The suite covers golden values,
numerics statistics, the three retention forms at head, layer and model
level, incremental decoding, causality, gradients, and checkpoint round
trips.  Everything runs at 64-bit with stabilization off unless a check
says otherwise.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autodiff as ad
from .. import numerics as nx
from ..model import DecodeState, ModelConfig, decode_step, init_params, lm_forward
from ..msr import head_gammas
from ..retention import (
    RetentionState,
    XPos,
    decay_mask,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
    xpos_apply,
)
from ..training import loss_fn, make_copy_task
from .checkpoint import IntegrityError, load_checkpoint, save_checkpoint

EQUIV_TOL = 1e-9
GRAD_TOL = 1e-4
PRIMITIVE_GRAD_TOL = 1e-6

CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn

    return register


def a1_config(**kw) -> ModelConfig:
    base = dict(layers=2, d_model=64, heads=4, vocab_size=16, precision=64, stabilized=False, seed=7)
    base.update(kw)
    return ModelConfig(**base)


def gradcheck_config(**kw) -> ModelConfig:
    """Tiny model under 5,000 parameters."""
    base = dict(layers=2, d_model=16, heads=2, ffn_dim=24, vocab_size=8, precision=64, seed=5)
    base.update(kw)
    return ModelConfig(**base)


@check("golden micro-values")
def golden_values():
    got = {
        "decay_mask(3, 0.5)": decay_mask(3, 0.5).entries,
        "worked retention": retention_parallel(
            np.ones((2, 1)), np.ones((2, 1)), np.array([[2.0], [3.0]]), 0.5
        )[:, 0],
        "head_gammas(3)": head_gammas(3),
        "swish(1)": nx.swish(np.array(1.0)),
        "gelu(1)": nx.gelu(np.array(1.0)),
    }
    want = {
        "decay_mask(3, 0.5)": np.array([[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]]),
        "worked retention": np.array([2.0, 4.0]),
        "head_gammas(3)": np.array([0.96875, 0.984375, 0.9921875]),
        "swish(1)": 1.0 / (1.0 + math.exp(-1.0)),
        "gelu(1)": 0.5 * (1.0 + math.tanh(math.sqrt(2 / math.pi) * 1.044715)),
    }
    worst = max(float(np.max(np.abs(got[k] - want[k]))) for k in want)
    return worst <= 1e-9, f"max |diff| {worst:.2e}"


@check("group/layer norm statistics")
def norm_stats():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(32, 64)) * 3 + 1
    y = nx.group_norm(x, 4, eps=1e-12).reshape(32, 4, 16)
    m = float(np.abs(y.mean(-1)).max())
    v = float(np.abs(y.var(-1) - 1).max())
    return m <= 1e-10 and v <= 1e-6, f"|mean| {m:.1e}, |var-1| {v:.1e}"


@check("matmul vs triple loop")
def matmul_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for m, k, n in [(7, 5, 4), (1, 8, 3), (8, 8, 8)]:
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        ref = np.array([[sum(a[i, t] * b[t, j] for t in range(k)) for j in range(n)] for i in range(m)])
        worst = max(worst, float(np.max(np.abs(nx.matmul(a, b) - ref) / np.maximum(np.abs(ref), 1e-300))))
    return worst <= 1e-12, f"max rel {worst:.1e}"


@check("retention forms agree (head level)")
def retention_forms():
    rng = np.random.default_rng(3)
    worst = 0.0
    for gamma in (0.9, 0.96875, 0.999):
        n, d = 96, 16
        q, k, v = (rng.normal(size=(n, d)) for _ in range(3))
        par = retention_parallel(q, k, v, gamma)
        rec, _ = retention_recurrent(q, k, v, gamma)
        worst = max(worst, float(np.abs(par - rec).max()))
        for b in (1, 7, 16, n):
            chk, _ = retention_chunkwise(q, k, v, gamma, b, RetentionState.fresh(d))
            worst = max(worst, float(np.abs(par - chk).max()))
    return worst <= EQUIV_TOL, f"max |diff| {worst:.2e}"


@check("xpos norm preservation and relative offsets")
def xpos_props():
    rng = np.random.default_rng(4)
    xp = XPos.default(8)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    worst = 0.0
    for n, m in [(5, 2), (17, 17), (40, 3)]:
        lhs = float(xpos_apply(q, xp, n) @ xpos_apply(k, xp, m).T)
        rhs = float(q @ xpos_apply(k, xp, m - n).T) if m >= n else float(xpos_apply(q, xp, n - m) @ k.T)
        worst = max(worst, abs(lhs - rhs))
    x = rng.normal(size=(10, 8))
    r = xpos_apply(x, xp, 3)
    norms = np.abs(np.hypot(r[:, 0::2], r[:, 1::2]) - np.hypot(x[:, 0::2], x[:, 1::2])).max()
    back = np.abs(xpos_apply(r, xp, 3, conjugate=True) - x).max()
    worst = max(worst, float(norms), float(back))
    return worst <= 1e-12, f"max |diff| {worst:.2e}"


def _model_forms(config, tokens, chunks):
    params = init_params(config)
    par = lm_forward(tokens, params, config, "parallel")
    worst = float(np.abs(lm_forward(tokens, params, config, "recurrent") - par).max())
    for b in chunks:
        worst = max(worst, float(np.abs(lm_forward(tokens, params, config, "chunkwise", b) - par).max()))
    return worst


@check("A1 whole-model three-form equivalence")
def a1():
    config = a1_config()
    tokens = np.random.default_rng(5).integers(0, config.vocab_size, 128)
    worst = _model_forms(config, tokens, (1, 16, 48, 128))
    return worst <= EQUIV_TOL, f"max |diff| {worst:.2e}"


@check("stabilized forms agree")
def stabilized_forms():
    config = a1_config(stabilized=True, layers=1)
    tokens = np.random.default_rng(6).integers(0, config.vocab_size, 64)
    worst = _model_forms(config, tokens, (5, 64))
    return worst <= EQUIV_TOL, f"max |diff| {worst:.2e}"


@check("A2 incremental decode matches parallel")
def a2():
    config = a1_config()
    params = init_params(config)
    tokens = np.random.default_rng(8).integers(0, config.vocab_size, 128)
    par = lm_forward(tokens, params, config)
    state = DecodeState.fresh(config)
    rows = []
    for t in tokens:
        state, logits = decode_step(state, t, params, config)
        rows.append(logits)
    worst = float(np.abs(np.array(rows) - par).max())
    return worst <= EQUIV_TOL, f"max |diff| {worst:.2e}"


@check("A6 causality (100 perturbations)")
def a6():
    rng = np.random.default_rng(9)
    bad = 0
    cache = {}
    for trial in range(100):
        seed = trial % 5
        if seed not in cache:
            config = ModelConfig(layers=2, d_model=32, heads=4, vocab_size=16, seed=100 + seed)
            cache[seed] = (config, init_params(config))
        config, params = cache[seed]
        n = int(rng.integers(2, 48))
        tokens = rng.integers(0, config.vocab_size, n)
        p = int(rng.integers(1, n))
        edited = tokens.copy()
        edited[p] = (edited[p] + 1 + rng.integers(0, config.vocab_size - 1)) % config.vocab_size
        a = lm_forward(tokens, params, config)
        b = lm_forward(edited, params, config)
        if not np.array_equal(a[:p], b[:p]):
            bad += 1
    return bad == 0, f"{bad} of 100 perturbations leaked backwards"


@check("A3 whole-model gradient check")
def a3():
    config = gradcheck_config(stabilized=True)
    params = init_params(config)
    named = params.named()
    trainable = {k: named[k] for k in params.trainable_names(config)}
    frozen = {k: v for k, v in named.items() if k not in trainable}
    batch = make_copy_task(3, 2, 8, config.vocab_size)
    err = ad.finite_diff_check(loss_fn(config, batch, frozen), trainable, step=1e-5)
    return err <= GRAD_TOL, f"{params.num_parameters(config)} params, max rel err {err:.2e}"


@check("per-primitive gradient checks")
def primitive_grads():
    worst = max(err for _, err in primitive_gradcheck_errors())
    return worst <= PRIMITIVE_GRAD_TOL, f"max rel err {worst:.2e}"


def primitive_gradcheck_errors(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference error of every differentiable primitive on small random inputs."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    w = r(4, 6, 6)
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    tgt = np.array([[1, 0, 4], [2, 3, 3]])
    mask = np.array([[True, False, True], [True, True, True]])

    def weighted(y):
        return ad.sum_all(ad.hadamard(y, w[tuple(slice(0, s) for s in ad.value(y).shape)]))

    cases = {
        "matmul": (lambda p: weighted(ad.matmul(p["a"], p["b"])), {"a": r(3, 4, 2), "b": r(2, 5)}),
        "add": (lambda p: weighted(ad.add(p["a"], p["b"])), {"a": r(3, 4, 5), "b": r(4, 1)}),
        "sub": (lambda p: weighted(ad.sub(p["a"], p["b"])), {"a": r(3, 4, 5), "b": r(5)}),
        "hadamard": (lambda p: weighted(ad.hadamard(p["a"], p["b"])), {"a": r(3, 4, 5), "b": r(1, 5)}),
        "scale": (lambda p: weighted(ad.scale(p["a"], 0.7)), {"a": r(3, 4, 5)}),
        "swish": (lambda p: weighted(ad.swish(p["a"])), {"a": r(3, 4, 5)}),
        "gelu": (lambda p: weighted(ad.gelu(p["a"])), {"a": r(3, 4, 5)}),
        "group_norm": (
            lambda p: weighted(ad.group_norm(p["x"], 1, p["s"], p["b"])),
            {"x": r(3, 4, 5), "s": r(5), "b": r(5)},
        ),
        "group_norm(2 groups)": (
            lambda p: weighted(ad.group_norm(p["x"], 2, p["s"], p["b"])),
            {"x": r(3, 4, 6), "s": r(6), "b": r(6)},
        ),
        "softmax_rows": (lambda p: weighted(ad.softmax_rows(p["a"])), {"a": r(3, 4, 5)}),
        "transpose": (lambda p: weighted(ad.transpose(p["a"])), {"a": r(3, 5, 4)}),
        "reshape/permute": (
            lambda p: weighted(ad.reshape(ad.permute(p["a"], (2, 0, 1)), (3, 4, 5))),
            {"a": r(4, 5, 3)},
        ),
        "split/concat": (
            lambda p: weighted(ad.concat(ad.split(p["a"], 2, -1)[::-1], -1)),
            {"a": r(3, 4, 4)},
        ),
        "gather": (lambda p: weighted(ad.gather(p["t"], ids)), {"t": r(4, 5)}),
        "xpos": (
            lambda p: weighted(ad.xpos(p["x"], p["th"], 3)),
            {"x": r(3, 4, 4), "th": np.abs(r(2))},
        ),
        "xpos(conjugate)": (
            lambda p: weighted(ad.xpos(p["x"], p["th"], 1, True)),
            {"x": r(3, 4, 4), "th": np.abs(r(2))},
        ),
        "decay_matrix": (
            lambda p: weighted(ad.decay_matrix(p["g"], 5, False)),
            {"g": np.array([0.5, 0.8, 0.95])},
        ),
        "decay_matrix(normalized)": (
            lambda p: weighted(ad.decay_matrix(p["g"], 5, True)),
            {"g": np.array([0.5, 0.8, 0.95])},
        ),
        "cross_entropy": (lambda p: ad.cross_entropy(p["z"], tgt, mask), {"z": r(2, 3, 5)}),
    }
    return [(name, ad.finite_diff_check(f, params, step=1e-5)) for name, (f, params) in cases.items()]


@check("A8 checkpoint round trip and corruption")
def a8():
    config = a1_config(precision=32, seed=12)
    params = init_params(config)
    tokens = np.arange(20) % config.vocab_size
    before = lm_forward(tokens, params, config)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(params, config, path)
        loaded, cfg2 = load_checkpoint(path)
        after = lm_forward(tokens, loaded, cfg2)
        same = np.array_equal(before, after) and cfg2 == config
        raw = path.read_bytes()
        rejected = 0
        for broken in (raw[:-7], b"XNET" + raw[4:], raw[:12] + raw[12:].replace(b"layers=2", b"layers=3")):
            path.write_bytes(broken)
            try:
                load_checkpoint(path)
            except IntegrityError:
                rejected += 1
    return same and rejected == 3, f"bit-identical={same}, corrupted rejected {rejected}/3"


def run_checks(names: list[str] | None = None, echo=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        echo(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok
