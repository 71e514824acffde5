"""Tape-based reverse-mode differentiation over the numerics primitives.

Every differentiable op is registered once in ``OPS`` with a forward and a
vector-Jacobian rule.  The functional wrappers at the bottom of this module
(``matmul``, ``gelu``, ``gather`` ...) dispatch on their arguments: if any
argument is a :class:`Node` the op is recorded on that node's tape, otherwise
the forward runs directly on arrays.  Model code written against these
wrappers is therefore usable both for plain inference and for training.

Non-differentiable data (token ids, targets, masks, axis arguments) travels
as keyword attributes and is stored with the record so the tape can be
replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import numerics as nx


class ContractError(RuntimeError):
    """A precondition of a tape operation was violated."""


class Op(NamedTuple):
    forward: Callable
    # backward(grad_out, out, *input_values, **attrs) -> tuple of input grads
    backward: Callable


OPS: dict[str, Op] = {}


def defop(name: str, forward: Callable, backward: Callable) -> None:
    OPS[name] = Op(forward, backward)


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    tape: "Tape" = field(repr=False)
    attrs: dict = field(default_factory=dict, repr=False)
    requires_grad: bool = True
    name: str | None = None
    grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype


class Tape:
    """Ordered record of every op applied to nodes created from it."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, kind, parents, value, attrs, requires_grad, name=None) -> Node:
        node = Node(len(self.nodes), kind, parents, value, self, attrs, requires_grad, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable input (parameter)."""
        node = self._push("leaf", (), np.asarray(value), {}, True, name)
        self.leaves.append(node.id)
        return node

    def constant(self, value) -> Node:
        return self._push("const", (), np.asarray(value), {}, False)

    def record(self, kind: str, *inputs, **attrs) -> Node:
        if kind not in OPS:
            raise ContractError(f"unknown op kind {kind!r}")
        parents = []
        for x in inputs:
            if isinstance(x, Node):
                if x.tape is not self or self.nodes[x.id] is not x:
                    raise ContractError("input node belongs to a different tape")
                parents.append(x)
            else:
                parents.append(self.constant(x))
        value = OPS[kind].forward(*(p.value for p in parents), **attrs)
        needs = any(p.requires_grad for p in parents)
        return self._push(kind, tuple(p.id for p in parents), value, attrs, needs)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaf and constant values, in tape order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind in ("leaf", "const"):
                values.append(node.value)
            else:
                args = (values[i] for i in node.parents)
                values.append(OPS[node.kind].forward(*args, **node.attrs))
        return values

    def release(self) -> None:
        """Drop every recorded node so their buffers are freed right away
        (nodes and tape reference each other)."""
        self.nodes.clear()
        self.leaves.clear()

    def backward(self, loss: Node, retain_grads: bool = True) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every node reachable backwards from ``loss``.

        Returns the gradient for every leaf on the tape, keyed by node id.
        Leaves that do not influence the loss get zeros.  With
        ``retain_grads=False`` only leaves keep ``.grad``; intermediate
        gradients are dropped as soon as they have been propagated.
        """
        if loss.tape is not self:
            raise ContractError("loss node is not on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id) if retain_grads or node.kind == "leaf" else grads.pop(node.id, None)
            if g is None or not node.parents or not node.requires_grad:
                continue
            parents = [self.nodes[i] for i in node.parents]
            in_grads = OPS[node.kind].backward(
                g, node.value, *(p.value for p in parents), **node.attrs
            )
            for p, pg in zip(parents, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.value.shape:
                    raise ContractError(
                        f"{node.kind} backward gave shape {pg.shape} for input {p.value.shape}"
                    )
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg
        for node in self.nodes:
            node.grad = grads.get(node.id)
        out = {}
        for i in self.leaves:
            leaf = self.nodes[i]
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            out[i] = leaf.grad
        return out


# -- op definitions ---------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of one-sided broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _matmul_bwd(g, out, a, b):
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        return ga, a.reshape(-1, a.shape[-1]).T @ g2
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


defop("matmul", nx.matmul, _matmul_bwd)
defop("add", nx.add, lambda g, out, a, b: (g, _unbroadcast(g, b.shape)))
defop("sub", lambda a, b: nx.add(a, -np.asarray(b)), lambda g, out, a, b: (g, -_unbroadcast(g, b.shape)))
defop("hadamard", nx.hadamard, lambda g, out, a, b: (g * b, _unbroadcast(g * a, b.shape)))
defop("scale", lambda x, c: nx.hadamard(x, c), lambda g, out, x, c: (g * c,))
defop("sum", lambda x: np.asarray(x.sum()), lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),))


def _swish_bwd(g, out, x):
    # d/dx x*s(x) = s + x*s*(1-s) = s + out*(1-s)
    s = nx.sigmoid(x)
    r = np.asarray(1.0 - s)
    r *= out
    r += s
    r *= g
    return (r,)


defop("swish", nx.swish, _swish_bwd)


def _gelu_bwd(g, out, x):
    c, k = nx.GELU_COEF, 0.044715
    x2 = np.asarray(x * x)
    t = np.asarray(x2 * (c * k))
    t += c
    t *= x
    np.tanh(t, out=t)
    # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2); x2 becomes x * du/dx
    x2 *= 3 * c * k
    x2 += c
    x2 *= x
    r = np.asarray(t * t)
    np.subtract(1.0, r, out=r)
    r *= x2
    r += t
    r += 1.0
    r *= 0.5
    r *= g
    return (r,)


defop("gelu", nx.gelu, _gelu_bwd)


def _gn_fwd(x, scale, shift, groups, eps):
    return nx.group_norm(x, groups, eps, scale, shift)


def _gn_bwd(g, out, x, scale, shift, groups, eps):
    d = x.shape[-1]
    split = (*x.shape[:-1], groups, d // groups)
    xhat = x.reshape(split) - x.reshape(split).mean(axis=-1, keepdims=True)
    inv = nx._finite((xhat * xhat).mean(axis=-1, keepdims=True), "group_norm variance")
    inv += eps
    np.sqrt(inv, out=inv)
    np.reciprocal(inv, out=inv)
    xhat *= inv
    gy = (g * scale).reshape(split)
    proj = (gy * xhat).mean(axis=-1, keepdims=True)
    gx = gy - gy.mean(axis=-1, keepdims=True)
    gx -= xhat * proj
    gx *= inv
    xhat = xhat.reshape(x.shape)
    return gx.reshape(x.shape), _unbroadcast(g * xhat, scale.shape), _unbroadcast(g, shift.shape)


defop("group_norm", _gn_fwd, _gn_bwd)


def _softmax_bwd(g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


defop("softmax_rows", nx.softmax_rows, _softmax_bwd)
defop(
    "transpose",
    lambda x: np.swapaxes(x, -1, -2),
    lambda g, out, x: (np.swapaxes(g, -1, -2),),
)
defop("reshape", lambda x, shape: x.reshape(shape), lambda g, out, x, shape: (g.reshape(x.shape),))
defop(
    "permute",
    lambda x, axes: np.transpose(x, axes),
    lambda g, out, x, axes: (np.transpose(g, np.argsort(axes)),),
)


def _slice_fwd(x, axis, start, stop):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)]


def _slice_bwd(g, out, x, axis, start, stop):
    gx = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    gx[tuple(idx)] = g
    return (gx,)


defop("slice", _slice_fwd, _slice_bwd)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_bwd(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


defop("concat", _concat_fwd, _concat_bwd)


def _gather_fwd(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    return table[ids]


def _gather_bwd(g, out, table, ids):
    gt = np.zeros_like(table)
    np.add.at(gt, np.asarray(ids).reshape(-1), g.reshape(-1, table.shape[-1]))
    return (gt,)


defop("gather", _gather_fwd, _gather_bwd)


def _rotate_pairs(x, cos, sin):
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _xpos_angles(theta, n, start, conjugate):
    pos = np.arange(start, start + n, dtype=theta.dtype)
    ang = pos[:, None] * theta[None, :]
    return -ang if conjugate else ang


def _xpos_fwd(x, theta, start, conjugate):
    ang = _xpos_angles(theta, x.shape[-2], start, conjugate)
    return _rotate_pairs(x, np.cos(ang), np.sin(ang))


def _xpos_bwd(g, out, x, theta, start, conjugate):
    n = x.shape[-2]
    ang = _xpos_angles(theta, n, start, conjugate)
    # the transpose of a rotation is the rotation by the negated angle
    gx = _rotate_pairs(g, np.cos(ang), -np.sin(ang))
    # d out / d angle is the output rotated by a further quarter turn
    g0, g1 = g[..., 0::2], g[..., 1::2]
    o0, o1 = out[..., 0::2], out[..., 1::2]
    dang = g1 * o0 - g0 * o1
    dang = dang.reshape(-1, n, theta.shape[0]).sum(axis=0)
    pos = np.arange(start, start + n, dtype=theta.dtype)[:, None]
    gtheta = (dang * pos).sum(axis=0)
    return gx, -gtheta if conjugate else gtheta


defop("xpos", _xpos_fwd, _xpos_bwd)


def decay_matrix_values(gammas, n, normalize):
    """Per-head causal decay matrices ``[h, n, n]`` with entries ``gamma**(row-col)``."""
    gammas = np.asarray(gammas)
    idx = np.arange(n)
    dist = idx[:, None] - idx[None, :]
    causal = dist >= 0
    d = np.where(causal, gammas[:, None, None] ** np.maximum(dist, 0), 0.0).astype(gammas.dtype)
    if normalize:
        d = d / np.maximum(np.abs(d.sum(axis=-1, keepdims=True)), 1.0)
    return d


def _decay_bwd(g, out, gammas, n, normalize):
    idx = np.arange(n)
    dist = np.maximum(idx[:, None] - idx[None, :], 0).astype(gammas.dtype)
    causal = (idx[:, None] - idx[None, :]) >= 0
    gam = gammas[:, None, None]
    raw = np.where(causal, gam**dist, 0.0)
    draw = np.where(causal & (dist > 0), dist * gam ** np.maximum(dist - 1, 0), 0.0)
    if normalize:
        rs = raw.sum(axis=-1, keepdims=True)
        den = np.maximum(rs, 1.0)
        drs = draw.sum(axis=-1, keepdims=True) * (rs > 1.0)
        dd = draw / den - raw * drs / (den * den)
    else:
        dd = draw
    return ((g * dd).sum(axis=(1, 2)),)


defop("decay_matrix", lambda gammas, n, normalize: decay_matrix_values(gammas, n, normalize), _decay_bwd)


def _ce_fwd(logits, targets, mask):
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(logits, np.asarray(targets)[..., None], axis=-1)[..., 0]
    w = np.asarray(mask, dtype=logits.dtype)
    return np.asarray(((lse - picked) * w).sum() / w.sum(), dtype=logits.dtype)


def _ce_bwd(g, out, logits, targets, mask):
    p = nx.softmax_rows(logits)
    t = np.asarray(targets)[..., None]
    np.put_along_axis(p, t, np.take_along_axis(p, t, -1) - 1.0, -1)
    w = np.asarray(mask, dtype=logits.dtype)
    return (g * p * (w / w.sum())[..., None],)


defop("cross_entropy", _ce_fwd, _ce_bwd)


# -- functional wrappers -------------------------------------------------------------


def _apply(kind: str, *inputs, **attrs):
    for x in inputs:
        if isinstance(x, Node):
            return x.tape.record(kind, *inputs, **attrs)
    return OPS[kind].forward(*inputs, **attrs)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def matmul(a, b):
    return _apply("matmul", a, b)


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def hadamard(a, b):
    return _apply("hadamard", a, b)


def scale(x, c: float):
    return _apply("scale", x, c=c)


def sum_all(x):
    return _apply("sum", x)


def swish(x):
    return _apply("swish", x)


def gelu(x):
    return _apply("gelu", x)


def group_norm(x, groups, scale, shift, eps=nx.DEFAULT_EPS):
    return _apply("group_norm", x, scale, shift, groups=groups, eps=eps)


def layer_norm(x, scale, shift, eps=nx.DEFAULT_EPS):
    return _apply("group_norm", x, scale, shift, groups=1, eps=eps)


def softmax_rows(x):
    return _apply("softmax_rows", x)


def transpose(x):
    return _apply("transpose", x)


def reshape(x, shape):
    return _apply("reshape", x, shape=tuple(shape))


def permute(x, axes):
    return _apply("permute", x, axes=tuple(axes))


def slice_axis(x, axis, start, stop):
    return _apply("slice", x, axis=axis % value(x).ndim, start=start, stop=stop)


def split(x, parts: int, axis: int = -1):
    size = value(x).shape[axis]
    if size % parts:
        raise nx.DimensionError(f"axis of size {size} cannot be split into {parts} parts")
    w = size // parts
    return [slice_axis(x, axis, i * w, (i + 1) * w) for i in range(parts)]


def concat(xs, axis: int = -1):
    return _apply("concat", *xs, axis=axis)


def gather(table, ids):
    return _apply("gather", table, ids=np.asarray(ids))


def xpos(x, theta, start: int = 0, conjugate: bool = False):
    return _apply("xpos", x, theta, start=int(start), conjugate=bool(conjugate))


def decay_matrix(gammas, n: int, normalize: bool = False):
    return _apply("decay_matrix", gammas, n=int(n), normalize=bool(normalize))


def cross_entropy(logits, targets, mask):
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if not mask.any():
        raise ContractError("cross_entropy mask selects no positions")
    return _apply("cross_entropy", logits, targets=targets, mask=mask)


# -- gradients and the finite-difference oracle --------------------------------------


def value_and_grad(f: Callable, params: dict[str, np.ndarray]):
    """Evaluate ``f(params)`` on a fresh tape; return ``(loss, {name: grad})``."""
    tape = Tape()
    nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = f(nodes)
    if not isinstance(loss, Node):
        raise ContractError("f did not depend on any parameter")
    grads = tape.backward(loss, retain_grads=False)
    out = float(loss.value), {k: grads[n.id] for k, n in nodes.items()}
    tape.release()
    return out


def finite_diff_check(
    f: Callable,
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` maps a dict of parameters (arrays or nodes) to a scalar.  With
    ``max_coords`` set, that many coordinates are sampled per parameter
    instead of checking all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = value_and_grad(f, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat_idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat_idx = rng.choice(p.size, max_coords, replace=False)
        for i in flat_idx:
            work = dict(params)
            hi, lo = p.copy(), p.copy()
            hi.flat[i] += step
            lo.flat[i] -= step
            work[name] = hi
            fp = float(value(f(work)))
            work[name] = lo
            fm = float(value(f(work)))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise nx.NumericError(f"non-finite evaluation while perturbing {name}[{i}]")
            numeric = (fp - fm) / (2 * step)
            analytic = float(grads[name].flat[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
