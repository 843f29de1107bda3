"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray; primitive ops compute forward values eagerly and,
when a Tape is active, record a backward closure. Nodes are appended in
execution order, so the list itself is a topological order and the reverse
pass is a single reversed sweep. Floating dtype is whatever the operands
carry: float32 for normal runs, float64 when gradients are checked against
finite differences.

With no active tape every op is value-only, which is the inference path.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateRowError,
    DataError,
    NumericError,
    ShapeError,
    UsageError,
)

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Array value plus bookkeeping for the tape.

    Leaves are created directly (requires_grad=True for parameters); op
    outputs get a node_id pointing into the recording tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind not in "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Usage:
        with Tape() as tape:
            loss = f(params)
        backward(tape, loss)

    backward adds into .grad on every leaf the pass touched (accumulation
    across tapes is deliberate; optimizers zero grads after stepping).
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Callable]] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self.node_grads: list[np.ndarray | None] | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise UsageError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _watch(self, t: Tensor) -> None:
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)
            t.tape = self

    def record(self, out: Tensor, parents: tuple[Tensor, ...], bwd: Callable) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append((parents, bwd))
        for p in parents:
            if p.node_id is None and p.requires_grad:
                self._watch(p)

    def grad_of(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward's loss w.r.t. an intermediate.

        Only available when backward ran with retain_node_grads=True.
        """
        if t.node_id is None:
            if t.grad is None:
                raise UsageError("tensor is a leaf with no accumulated grad")
            return t.grad
        if self.node_grads is None:
            raise UsageError("backward was not run with retain_node_grads=True")
        g = self.node_grads[t.node_id]
        if g is None:
            return np.zeros_like(t.data)
        return g


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node_id is not None


def _as_tensor(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # scalars follow the other operand's dtype so f32 graphs stay f32
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(np.asarray(x))


def _maybe_record(out: Tensor, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(_tracked(p) for p in parents):
        tape.record(out, tuple(parents), bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor, retain_node_grads: bool = False) -> None:
    """Reverse sweep from a scalar loss recorded on `tape`.

    Populates .grad on every leaf the tape watched; unreached leaves get
    zeros. Grads ADD into existing .grad buffers.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise UsageError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    n = len(tape.nodes)
    node_grads: list[np.ndarray | None] = [None] * n
    node_grads[loss.node_id] = np.ones_like(loss.data)
    for i in range(n - 1, -1, -1):
        g = node_grads[i]
        if g is None:
            continue
        parents, bwd = tape.nodes[i]
        pgrads = bwd(g)
        for p, pg in zip(parents, pgrads):
            if pg is None:
                continue
            if p.node_id is not None:
                if node_grads[p.node_id] is None:
                    node_grads[p.node_id] = pg.copy()
                else:
                    node_grads[p.node_id] += pg
            elif p.requires_grad:
                if p.grad is None:
                    p.grad = pg.copy()
                else:
                    p.grad += pg
    for leaf in tape.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    tape.node_grads = node_grads if retain_node_grads else None


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    if isinstance(a, Tensor):
        a, b = a, _as_tensor(b, like=a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, like=b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _maybe_record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor):
        a, b = a, _as_tensor(b, like=a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, like=b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _maybe_record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _maybe_record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast like np.matmul."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data
    out = Tensor(np.matmul(ad, bd))

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _maybe_record(out, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _maybe_record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _maybe_record(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(parts) == 0:
        raise UsageError("concat needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _maybe_record(out, tuple(parts), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[idx[i]] along axis 0. Repeats allowed (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DataError(f"gather index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _maybe_record(out, (a,), bwd)


def scatter_rows(a: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Zeros[num_rows, ...] with out[idx] = a. Indices must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != a.data.shape[0]:
        raise ShapeError("scatter index count must match rows of input")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise DataError(f"scatter index out of range for {num_rows} rows")
    if len(np.unique(idx)) != idx.size:
        raise DataError("scatter indices must be unique")
    out_data = np.zeros((num_rows,) + a.data.shape[1:], dtype=a.data.dtype)
    out_data[idx] = a.data
    out = Tensor(out_data)

    def bwd(g):
        return (g[idx],)

    return _maybe_record(out, (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _maybe_record(out, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), applied elementwise."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _maybe_record(out, (a,), bwd)


def rms_norm(a: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """weight * x / sqrt(mean(x^2, last) + eps)."""
    if weight.data.shape != a.data.shape[-1:]:
        raise ShapeError("rms_norm weight must match the last axis")
    x = a.data
    d = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    xhat = x / r
    out = Tensor(xhat * weight.data)

    def bwd(g):
        w = weight.data
        gw_full = g * xhat
        gw = gw_full.reshape(-1, d).sum(axis=0)
        gwx = g * w
        q = np.sum(gwx * x, axis=-1, keepdims=True)
        gx = gwx / r - x * q / (d * r**3)
        return gx, gw

    return _maybe_record(out, (a, weight), bwd)


def rope_rotate(a: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary position encoding on interleaved pairs.

    a is [t, h, d] with d even; pair j of each head rotates by
    positions * base**(-2j/d). Angles are computed in float64 then cast to
    a's dtype so float32 and float64 runs see consistent tables.
    """
    t, h, d = a.data.shape
    if d % 2 != 0:
        raise ShapeError("rope_rotate needs an even head dim")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (t,):
        raise ShapeError("positions must have one entry per row")
    inv = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = positions[:, None] * inv[None, :]
    cos = np.cos(ang).astype(a.data.dtype)[:, None, :]
    sin = np.sin(ang).astype(a.data.dtype)[:, None, :]
    even = a.data[..., 0::2]
    odd = a.data[..., 1::2]
    out_data = np.empty_like(a.data)
    out_data[..., 0::2] = even * cos - odd * sin
    out_data[..., 1::2] = even * sin + odd * cos
    out = Tensor(out_data)

    def bwd(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        ga = np.empty_like(g)
        ga[..., 0::2] = ge * cos + go * sin
        ga[..., 1::2] = -ge * sin + go * cos
        return (ga,)

    return _maybe_record(out, (a,), bwd)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    mask holds 0 where attention is allowed and -inf where it is not, and
    broadcasts against a. Masked entries come out exactly 0. A row with
    every entry masked is an error rather than a NaN.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask)
        x = x + mask.astype(x.dtype)
        if not np.isfinite(x).any(axis=-1).all():
            raise DegenerateRowError("softmax row fully masked")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    p = e / z
    out = Tensor(p)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _maybe_record(out, (a,), bwd)


IGNORE_LABEL = -100


def cross_entropy(
    logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL
) -> tuple[Tensor, int]:
    """Mean NLL over rows whose label is not ignore_label.

    Returns (loss, counted). With every row ignored the loss is a constant
    0 off the tape and counted == 0; callers skip the step.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects [rows, vocab] logits")
    rows, vocab = logits.data.shape
    if labels.shape != (rows,):
        raise ShapeError("labels must have one entry per logits row")
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    lab = labels[valid]
    if lab.min() < 0 or lab.max() >= vocab:
        raise DataError("label id outside vocabulary")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = x[np.arange(rows), np.clip(labels, 0, vocab - 1)]
    nll = np.where(valid, lse - picked, 0.0)
    loss_val = nll.sum() / n
    if not np.isfinite(loss_val):
        raise NumericError("cross_entropy produced a non-finite loss")
    out = Tensor(np.asarray(loss_val, dtype=logits.data.dtype))

    def bwd(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(rows), np.clip(labels, 0, vocab - 1)] -= 1.0
        p[~valid] = 0.0
        return (p * (g / n),)

    return _maybe_record(out, (logits,), bwd), n


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    f maps x to a scalar Tensor and must be deterministic. x must be
    float64; central differences in float32 drown in rounding noise.
    Relative error per coordinate is |fd - g| / (|g| + epsilon).
    """
    if x.data.dtype != np.float64:
        raise UsageError("finite_diff_check requires a float64 tensor")
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    with Tape() as tape:
        y = f(x)
    backward(tape, y)
    g = x.grad.copy()
    x.grad = saved_grad

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    gflat = g.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + epsilon
        fp = float(f(x).data)
        flat[c] = orig - epsilon
        fm = float(f(x).data)
        flat[c] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("f produced a non-finite value during probing")
        fd = (fp - fm) / (2.0 * epsilon)
        rel = abs(fd - gflat[c]) / (abs(gflat[c]) + epsilon)
        worst = max(worst, rel)
    return worst
