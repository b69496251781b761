"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every op that sees an input with ``requires_grad`` returns a node that
remembers its parents, a backward rule and a monotonically increasing
sequence number. :func:`backward` gathers the nodes reachable from a scalar
into a :class:`Tape` ordered by that sequence number and walks it in
reverse, so each node is visited once after all of its consumers.

Broadcasting rule for elementwise binary ops (``add``, ``sub``, ``mul``,
``div``, ``prelu``): shapes are aligned on the right and every axis must
either agree or be 1 in one operand. In the model this covers exactly
scalar-with-tensor, bias/gain over time ``(C, 1)`` against ``(B, C, T)``,
and per-utterance statistics ``(B, 1, 1)`` or ``(B, D, 1)``. Anything else
raises :class:`ConfigurationError` naming the op and both shapes.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording in this thread (evaluation, finite differences)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ConfigurationError(f"tensor shape {arr.shape} has a zero extent")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded ops reachable from a root, in recording order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen = {id(root)}
        stack = [root]
        nodes = []
        while stack:
            node = stack.pop()
            if node._backward is None:
                continue
            nodes.append(node)
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> None:
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg


def backward(t: Tensor) -> Tape:
    """Populate ``.grad`` of every reachable leaf with d t / d leaf.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if t.size != 1:
        raise UsageError(f"backward needs a scalar, got shape {t.shape}")
    if not t.requires_grad:
        raise UsageError("backward called on a tensor that is not on the tape")
    if t._backward is None:
        t.grad = np.ones_like(t.data) if t.grad is None else t.grad + 1.0
        return Tape([])
    tape = Tape.from_root(t)
    tape.backward(t)
    return tape


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out.op = op
    return out


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of right-aligned broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), rule, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``: ``(..., n, k) @ (..., k, m) -> (..., n, m)``.

    Leading (batch) axes broadcast right-aligned; both operands need ndim >= 2.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ConfigurationError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data

    def rule(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), rule, "matmul")


# -- structural ------------------------------------------------------------


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise UsageError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat: no inputs")
    ndim = tensors[0].ndim
    axis = _axis(axis, ndim, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(x != y for i, (x, y) in enumerate(zip(ref, t.shape)) if i != axis):
            raise ConfigurationError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        out = []
        for i in range(len(tensors)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule, "concat")


def take_slice(a: Tensor, index) -> Tensor:
    """Basic indexing (ints and slices). Gradient scatters back into zeros."""
    if not isinstance(index, tuple):
        index = (index,)
    if any(not isinstance(i, (int, slice, type(Ellipsis))) for i in index):
        raise UsageError("slice: only ints, slices and Ellipsis are supported")
    shape = a.shape
    out = a.data[index]
    if out.size == 0:
        raise ConfigurationError(f"slice: index {index} on shape {shape} is empty")

    def rule(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _node(np.array(out, copy=True), (a,), rule, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; ``None`` reverses them like ``ndarray.T``."""
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_axis(x, a.ndim, "transpose") for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise UsageError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Expand size-1 axes (right-aligned) to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ConfigurationError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    src = a.shape
    return _node(np.array(out), (a,), lambda g: (unbroadcast(g, src),), "broadcast_to")


# -- elementwise unary -----------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; gradient passes only where ``a > floor``."""
    mask = a.data > floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """``a`` where positive, ``slope * a`` elsewhere; ``slope`` broadcasts like ``mul``."""
    _broadcast("prelu", a, slope)
    ad, sd = a.data, slope.data
    neg = np.minimum(ad, 0.0)
    out = ad - neg
    out += sd * neg

    def rule(g):
        ga = gs = None
        if a.requires_grad:
            # d/da is 1 on the positive side and slope elsewhere
            ga = g * (sd + (1.0 - sd) * (ad > 0))
        if slope.requires_grad:
            gs = unbroadcast(g * neg, sd.shape)
        return ga, gs

    return _node(out, (a, slope), rule, "prelu")


# -- reductions ------------------------------------------------------------


def _axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_axis(x, ndim, op) for x in axis))


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim, "sum")
    shape = a.shape
    return _node(
        a.data.sum(axis=axes, keepdims=keepdims),
        (a,),
        lambda g: (np.broadcast_to(_expand(g, axes, keepdims), shape),),
        "sum",
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim, "mean")
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes]))
    return _node(
        a.data.mean(axis=axes, keepdims=keepdims),
        (a,),
        lambda g: (np.broadcast_to(_expand(g, axes, keepdims) / n, shape),),
        "mean",
    )


def var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (1/n) variance over ``axis``."""
    axes = _axes(axis, a.ndim, "var")
    n = int(np.prod([a.shape[i] for i in axes]))
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = np.mean(centered * centered, axis=axes, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand(g, axes, keepdims) * (2.0 / n) * centered,), "var")


def tmax(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = _axis(axis, a.ndim, "max")
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out if keepdims else out.squeeze(axis), (a,), rule, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), rule, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, a.ndim, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    prob = np.exp(out)
    return _node(out, (a,), lambda g: (g - prob * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- convolution -----------------------------------------------------------


def depthwise_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel dilated convolution with symmetric zero padding.

    ``x`` is ``(..., C, T)``, ``kernel`` is ``(C, K)`` with K odd.
    ``y[..., c, t] = sum_k kernel[c, k] * xpad[..., c, t + k * dilation]``
    where ``xpad`` has ``(K - 1) * dilation / 2`` zeros on each side, so the
    time extent is preserved.
    """
    if dilation < 1:
        raise UsageError(f"depthwise_conv1d: dilation must be >= 1, got {dilation}")
    if kernel.ndim != 2 or kernel.shape[1] % 2 == 0:
        raise ConfigurationError(f"depthwise_conv1d: kernel shape {kernel.shape} must be (C, odd K)")
    if x.ndim < 2 or x.shape[-2] != kernel.shape[0]:
        raise ConfigurationError(
            f"depthwise_conv1d: input shape {x.shape} does not match kernel shape {kernel.shape}"
        )
    C, K = kernel.shape
    T = x.shape[-1]
    pad = (K - 1) * dilation // 2
    xp = np.zeros(x.shape[:-1] + (T + 2 * pad,))
    xp[..., pad : pad + T] = x.data
    w = kernel.data
    out = np.zeros(x.shape)
    for k in range(K):
        out += w[:, k : k + 1] * xp[..., k * dilation : k * dilation + T]

    def rule(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k * dilation : k * dilation + T] += w[:, k : k + 1] * g
            gx = gxp[..., pad : pad + T]
        if kernel.requires_grad:
            gk = np.empty((C, K))
            lead = tuple(range(g.ndim - 2))
            for k in range(K):
                prod = g * xp[..., k * dilation : k * dilation + T]
                gk[:, k] = prod.sum(axis=lead + (g.ndim - 1,))
        return gx, gk

    return _node(out, (x, kernel), rule, "depthwise_conv1d")

