"""Synthetic sequence tasks, Adam, and the training loop."""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelParams, init_params, lm_forward
from .numerics import NumericError
from .prng import Prng
from .retention import ParameterError

log = logging.getLogger(__name__)

SEPARATOR = 0
TASKS = ("copy", "associative-recall")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "copy"
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    seed: int = 1
    eval_interval: int = 100
    eval_batch: int = 256
    seq_len: int = 64

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ParameterError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if min(self.steps, self.batch_size, self.eval_interval, self.eval_batch, self.seq_len) < 1:
            raise ParameterError("counts must be positive")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")


@dataclass
class TaskBatch:
    inputs: np.ndarray  # [batch, n] int
    targets: np.ndarray  # [batch, n] int
    mask: np.ndarray  # [batch, n] bool


def _rng(seed) -> Prng:
    return seed if isinstance(seed, Prng) else Prng(seed)


def make_copy_task(seed, batch: int, n: int, vocab: int) -> TaskBatch:
    """Random ids, the separator (id 0), then the same ids again.

    The underlying sequence ``a_1..a_{n/2}, 0, a_1..a_{n/2}`` has ``n + 1``
    tokens; inputs and targets are its two length-``n`` shifts.  The loss
    covers the ``n/2 - 1`` positions after the separator.
    """
    if n < 2 or n % 2:
        raise ParameterError(f"copy task needs an even length >= 2, got {n}")
    if vocab < 4:
        raise ParameterError("copy task needs vocab >= 4")
    half = n // 2
    a = _rng(seed).integers(1, vocab, (batch, half))
    z = np.concatenate([a, np.full((batch, 1), SEPARATOR), a], axis=1)
    mask = np.zeros((batch, n), dtype=bool)
    mask[:, half + 1 :] = True
    return TaskBatch(z[:, :-1], z[:, 1:], mask)


def make_associative_recall(seed, batch: int, n: int, vocab: int) -> TaskBatch:
    """Key/value pairs, the separator, a query key; predict the query's value.

    Keys come from ``[1, vocab/2)`` without repetition, values from
    ``[vocab/2, vocab)``.  ``n = 2 * pairs + 2``.
    """
    if n < 4 or n % 2:
        raise ParameterError("associative recall needs an even length >= 4")
    lo = vocab // 2
    pairs = (n - 2) // 2
    if pairs > lo - 1:
        raise ParameterError(f"{pairs} pairs need more than {lo - 1} distinct keys")
    rng = _rng(seed)
    keys = np.argsort(rng.uniform((batch, lo - 1)), axis=1)[:, :pairs] + 1
    vals = rng.integers(lo, vocab, (batch, pairs))
    pick = rng.integers(0, pairs, (batch,))
    rows = np.arange(batch)
    z = np.empty((batch, n + 1), dtype=np.int64)
    z[:, 0 : 2 * pairs : 2] = keys
    z[:, 1 : 2 * pairs : 2] = vals
    z[:, 2 * pairs] = SEPARATOR
    z[:, 2 * pairs + 1] = keys[rows, pick]
    z[:, 2 * pairs + 2] = vals[rows, pick]
    mask = np.zeros((batch, n), dtype=bool)
    mask[:, -1] = True
    return TaskBatch(z[:, :-1], z[:, 1:], mask)


def make_batch(task: str, seed, batch: int, n: int, vocab: int) -> TaskBatch:
    maker = make_copy_task if task == "copy" else make_associative_recall
    return maker(seed, batch, n, vocab)


def cross_entropy(logits, targets, mask):
    """Mean masked ``-log softmax(logits)[target]``; differentiable on tape nodes."""
    return ad.cross_entropy(logits, targets, mask)


def masked_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    pred = np.argmax(ad.value(logits), axis=-1)
    return float(((pred == targets) & mask).sum() / mask.sum())


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update over the names in ``grads``.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, m_out, v_out = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_params[name] = (params[name] - step).astype(params[name].dtype)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


def loss_fn(config: ModelConfig, batch: TaskBatch, frozen: dict):
    """Closure mapping trainable parameters to the masked loss."""

    def f(trainable):
        params = ModelParams.from_named(config, {**frozen, **trainable})
        logits = lm_forward(batch.inputs, params, config, "parallel")
        return cross_entropy(logits, batch.targets, batch.mask)

    return f


def evaluate(params: ModelParams, config: ModelConfig, batch: TaskBatch, mode: str = "parallel"):
    logits = lm_forward(batch.inputs, params, config, mode)
    loss = float(cross_entropy(logits, batch.targets, batch.mask))
    return loss, masked_accuracy(logits, batch.targets, batch.mask)


def _keep_heap_memory() -> None:
    """Ask glibc to recycle freed step buffers instead of returning them to
    the kernel; otherwise every step pays page faults for fresh pages.
    No-op elsewhere."""
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    mallopt(m_mmap_threshold, 32 << 20)
    mallopt(m_trim_threshold, 1 << 30)
    mallopt(m_top_pad, 64 << 20)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[tuple[int, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    metrics_path=None,
    params: ModelParams | None = None,
    target_accuracy: float | None = None,
) -> TrainResult:
    """Adam on freshly sampled batches, differentiating the parallel form.

    Every ``eval_interval`` steps (and at step 0 and the last step) the
    model is scored on a held-out batch; rows ``(step, loss, accuracy)`` are
    collected and, if ``metrics_path`` is set, written as CSV.  With
    ``target_accuracy`` the loop stops at the first evaluation that beats it.
    """
    tc = train_config
    _keep_heap_memory()
    if params is None:
        params = init_params(model_config)
    named = {k: np.asarray(v) for k, v in params.named().items()}
    names = params.trainable_names(model_config)
    trainable = {k: named[k] for k in names}
    frozen = {k: v for k, v in named.items() if k not in trainable}
    opt = AdamState.zeros(trainable)
    stream = Prng(tc.seed)
    eval_batch = make_batch(tc.task, stream.fork(-1), tc.eval_batch, tc.seq_len, model_config.vocab_size)
    result = TrainResult(params)
    t0 = time.perf_counter()

    for step in range(tc.steps + 1):
        if step % tc.eval_interval == 0 or step == tc.steps:
            current = ModelParams.from_named(model_config, {**frozen, **trainable})
            try:
                loss, acc = evaluate(current, model_config, eval_batch)
            except NumericError as exc:
                raise TrainingError(f"evaluation at step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite eval loss at step {step}")
            result.metrics.append((step, loss, acc))
            log.info("step %d loss %.4f acc %.4f", step, loss, acc)
            if step == tc.steps or (target_accuracy is not None and acc > target_accuracy):
                break
        batch = make_batch(tc.task, stream.fork(step), tc.batch_size, tc.seq_len, model_config.vocab_size)
        try:
            loss, grads = ad.value_and_grad(loss_fn(model_config, batch, frozen), trainable)
        except NumericError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss {loss} at step {step}")
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise TrainingError(f"non-finite gradient at step {step} in {bad[0]}")
        trainable, opt = adam_step(trainable, grads, opt, tc)
        if model_config.trainable_gamma:
            for k in trainable:
                if k.endswith("msr.gammas"):
                    trainable[k] = np.clip(trainable[k], 1e-4, 1.0 - 1e-6)

    result.params = ModelParams.from_named(model_config, {**frozen, **trainable})
    result.seconds = time.perf_counter() - t0
    if metrics_path is not None:
        write_metrics(metrics_path, result.metrics)
    return result


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "accuracy"])
        for step, loss, acc in rows:
            w.writerow([step, f"{loss:.6f}", f"{acc:.6f}"])
