"""Dense tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node holding
its parents and a backward rule. ``backward`` orders the reachable nodes by
creation sequence (the tape), walks them in reverse and then consumes them;
a second ``backward`` over the same graph raises :class:`TapeError`.

There is no implicit broadcasting. Binary elementwise ops demand identical
shapes; use :func:`expand` to repeat a tensor along new leading axes.
"""

from __future__ import annotations

import itertools
import struct
import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "TapeError", "tensor", "record", "no_grad",
    "grad_enabled", "add", "sub", "mul", "div", "matmul", "exp", "log",
    "sigmoid", "relu", "silu", "softplus", "softmax", "layernorm", "reshape",
    "transpose", "concat", "expand", "take", "sum", "mean", "linear",
    "linear_recurrence_scan", "causal_depthwise_conv1d", "dropout",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("parents", "backward", "seq", "op", "consumed")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.op = op
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, op)
    return out


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Recorded operations reachable from a root, in creation order."""

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append(t)
            stack.extend(node.parents)
        found.sort(key=lambda t: t._node.seq)
        return cls([TapeEntry(t._node.op, t._node.parents, t, t._node.backward) for t in found])

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise TapeError("backward: loss does not depend on any tensor requiring grad")
    if loss._node.consumed:
        raise TapeError("backward: tape already consumed; run a fresh forward pass")

    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        out = entry.output
        g = grads.pop(id(out), None)
        node = out._node
        if g is not None:
            in_grads = entry.backward(g)
            for parent, pg in zip(entry.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        node.consumed = True
        node.backward = _consumed


def _consumed(_g):
    raise TapeError("backward: tape already consumed; run a fresh forward pass")


# ---------------------------------------------------------------- elementwise

def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return record(a.data + c, (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = _as_tensor(a)
    _check_same("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return record(a.data * c, (a,), lambda g: (g * c,), "scale")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = _as_tensor(a)
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return record(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return record(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax", a.shape, detail=f"axis {axis} out of range")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), bw, "softmax")


def layernorm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optional per-feature affine."""
    d = a.shape[-1]
    for p, nm in ((weight, "weight"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError("layernorm", a.shape, p.shape, detail=f"{nm} must be ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [a] + [p for p in (weight, bias) if p is not None]
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * weight.data if weight is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if weight is not None:
            res.append((g * xhat).sum(axis=lead))
        if bias is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)

    return record(out, parents, bw, "layernorm")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def expand(a: Tensor, *lead: int) -> Tensor:
    """Repeat ``a`` along new leading axes: shape ``lead + a.shape``."""
    n = len(lead)
    out = np.broadcast_to(a.data, tuple(lead) + a.shape)
    return record(out, (a,), lambda g: (g.sum(axis=tuple(range(n))),), "expand")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    src_shape, dtype = a.shape, a.dtype
    fancy = any(isinstance(i, (list, np.ndarray)) for i in
                (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return record(np.array(out, copy=True) if fancy else out, (a,), bw, "slice")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (row lookup for embeddings)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("take", a.shape, detail=f"index out of range [0, {n})")
    out = np.take(a.data, idx, axis=axis)
    src_shape = a.shape

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return record(out, (a,), bw, "take")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return record(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` (..., n, k); ``b`` is (k, m) or shares a's batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, m = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape, detail="weight is (out, in)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError("linear", weight.shape, bias.shape, detail="bias is (out,)")
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = g @ wd
        gw = g.reshape(-1, wd.shape[0]).T @ xd.reshape(-1, wd.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, bw, "linear")


# ---------------------------------------------------------------- sequence ops

def linear_recurrence_scan(a: Tensor, b: Tensor, h0: Tensor | None = None) -> Tensor:
    """All hidden states of ``h_t = a_t * h_{t-1} + b_t`` along axis 0."""
    if a.shape != b.shape:
        raise ShapeError("linear_recurrence_scan", a.shape, b.shape)
    if h0 is not None and h0.shape != a.shape[1:]:
        raise ShapeError("linear_recurrence_scan", a.shape, h0.shape, detail="h0 must match state dims")
    ad, bd = a.data, b.data
    steps = ad.shape[0]
    hs = np.empty(ad.shape, dtype=np.result_type(ad, bd))
    h = np.zeros(ad.shape[1:], dtype=hs.dtype) if h0 is None else h0.data
    for t in range(steps):
        h = ad[t] * h + bd[t]
        hs[t] = h
    h_init = np.zeros(ad.shape[1:], dtype=hs.dtype) if h0 is None else h0.data

    def bw(g):
        ga = np.empty_like(hs)
        gb = np.empty_like(hs)
        carry = np.zeros(ad.shape[1:], dtype=hs.dtype)
        for t in range(steps - 1, -1, -1):
            carry = g[t] + carry
            gb[t] = carry
            ga[t] = carry * (hs[t - 1] if t > 0 else h_init)
            carry = carry * ad[t]
        res = [ga, gb]
        if h0 is not None:
            res.append(carry)
        return tuple(res)

    parents = (a, b) if h0 is None else (a, b, h0)
    return record(hs, parents, bw, "linear_recurrence_scan")


def causal_depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel causal convolution over axis -2 of ``x`` (..., time, channels).

    ``kernel`` is (k, channels); ``y[t] = sum_j kernel[j] * x[t - k + 1 + j]``
    with zero left padding, so the output length equals the input length.
    """
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise ShapeError("causal_depthwise_conv1d", kernel.shape, detail="kernel must be (k, channels), k >= 1")
    if x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError("causal_depthwise_conv1d", x.shape, kernel.shape, detail="channel count differs")
    if bias is not None and bias.shape != (x.shape[-1],):
        raise ShapeError("causal_depthwise_conv1d", x.shape, bias.shape, detail="bias is (channels,)")
    k = kernel.shape[0]
    steps = x.shape[-2]
    xd, wd = x.data, kernel.data
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(xd, pad)
    out = np.zeros(xd.shape, dtype=np.result_type(xd, wd))
    for j in range(k):
        out += wd[j] * xp[..., j:j + steps, :]
    if bias is not None:
        out += bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gp = np.zeros_like(xp, dtype=g.dtype)
        gw = np.empty_like(wd, dtype=g.dtype)
        for j in range(k):
            gp[..., j:j + steps, :] += g * wd[j]
            gw[j] = (g * xp[..., j:j + steps, :]).sum(axis=lead)
        res = [gp[..., k - 1:, :], gw]
        if bias is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, parents, bw, "causal_depthwise_conv1d")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ASGM1\n"


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write named parameters (row-major float64) plus a JSON metadata block.

    Layout: magic, u32 meta length, meta JSON, u32 entry count, then per entry
    u16 name length, name, u8 ndim, u32 dims, float64 values. Little-endian.
    """
    from .io_utils import atomic_write_bytes

    chunks = [CHECKPOINT_MAGIC]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an ASGM1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def unpack(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (meta_len,) = unpack("<I")
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = unpack("<H")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out, meta

