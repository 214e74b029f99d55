"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray. Operations on tensors that require
gradients record their parents and a backward closure; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order. The graph is released
after a backward pass unless ``retain_graph=True``.

Arrays keep the dtype they were created with (float32 by default). Float64
is supported end to end so gradient checks can run at higher precision.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from mimae import _kernels
from mimae.errors import ContractError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_state = {"grad": True, "check_finite": True}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the NaN/Inf check performed after every forward op."""
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


def _released(_g):
    raise ContractError("backward through a graph that was already released; "
                        "pass retain_graph=True to keep it")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __len__(self):
        return self.shape[0]

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -------------------------------------------------------------- backward
    def backward(self, grad=None, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() on non-scalar tensor of shape {self.shape}; "
                                    "pass an explicit output gradient")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"output gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.dtype, copy=True)
                else:
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if not node.is_leaf:
                    node._backward = _released

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _topo_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, outputs before inputs."""
    visited = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


# ---------------------------------------------------------------- plumbing
def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _pair(a, b):
    """Coerce operands so constants adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power() supports scalar exponents only")
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return _make(ad * ad, (a,), lambda g: (g * 2.0 * ad,), "square")
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# -------------------------------------------------------------- reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


# ----------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across the batch dimensions of ``a``) or carry
    the same leading batch dimensions as ``a``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.sum(axis=tuple(range(ga.ndim - 2)))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ------------------------------------------------------------------ shapes
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, src),), "broadcast")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), backward, "getitem")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, v] = x[b, index[b, v]]`` for x of shape (B, P, D)."""
    index = np.asarray(index)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} and index {index.shape} are incompatible")
    rows = np.arange(x.shape[0])[:, None]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, (rows, index), g)
        return (out,)

    return _make(x.data[rows, index], (x,), backward, "gather_rows")


def scatter_rows(base: Tensor, src: Tensor, index: np.ndarray) -> Tensor:
    """Copy of ``base`` with ``base[b, index[b, v]] = src[b, v]``.

    Indices within a row must be unique.
    """
    index = np.asarray(index)
    if base.ndim != 3 or src.ndim != 3 or src.shape[:2] != index.shape \
            or base.shape[0] != src.shape[0] or base.shape[2] != src.shape[2]:
        raise ShapeError(f"scatter_rows: base {base.shape}, src {src.shape}, index {index.shape}")
    rows = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[rows, index] = src.data

    def backward(g):
        gbase = g.copy()
        gbase[rows, index] = 0
        return gbase, g[rows, index]

    return _make(out, (base, src), backward, "scatter_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % (tensors[0].ndim + 1)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def where_const(cond: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where ``cond`` holds, the constant ``fill`` elsewhere."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, np.asarray(fill, dtype=a.dtype))
    return _make(out, (a,), lambda g: (np.where(cond, g, 0).astype(a.dtype, copy=False),), "where")


# -------------------------------------------------------------- nonlinear
def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    y = _kernels.softmax_fwd(_rows(moved)).reshape(moved.shape)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        dx = _kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(moved.shape)
        return (np.moveaxis(dx, -1, axis),)

    return _make(np.moveaxis(y, -1, axis), (x,), backward, "softmax")


def logsumexp(x: Tensor, axis: int = -1, include: np.ndarray | None = None) -> Tensor:
    """log sum exp over the last axis, optionally restricted to ``include``.

    ``include`` is a boolean array broadcastable to ``x``; excluded entries
    do not contribute. Every row must include at least one entry.
    """
    if axis not in (-1, x.ndim - 1):
        raise ContractError("logsumexp supports the last axis only")
    xd = x.data
    if include is None:
        include = np.ones(xd.shape, dtype=bool)
    include = np.broadcast_to(np.asarray(include, dtype=bool), xd.shape)
    if not include.any(axis=-1).all():
        raise ContractError("logsumexp: a row has no included entries")
    lo = np.asarray(np.finfo(xd.dtype).min, dtype=xd.dtype)
    m = np.where(include, xd, lo).max(axis=-1, keepdims=True)
    e = np.where(include, np.exp(np.where(include, xd - m, 0)), 0).astype(xd.dtype, copy=False)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = e / s

    return _make(out, (x,), lambda g: (g[..., None] * p,), "logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then scale and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},), got {gain.shape}, {bias.shape}")
    shape = x.shape
    y, xhat, rstd = _kernels.layer_norm_fwd(_rows(x.data), gain.data, bias.data, eps)

    def backward(g):
        dx, dgain, dbias = _kernels.layer_norm_bwd(_rows(g), xhat, rstd, gain.data)
        return dx.reshape(shape), dgain, dbias

    return _make(y.reshape(shape), (x, gain, bias), backward, "layer_norm")


LEAKY_SLOPE = 0.01


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``gelu`` (tanh approximation), ``relu`` or ``leaky_relu`` (slope 0.01)."""
    xd = x.data
    if kind == "gelu":
        shape = xd.shape
        flat = xd.reshape(-1, shape[-1]) if xd.ndim else xd.reshape(1, 1)
        y = _kernels.gelu_fwd(flat).reshape(shape)
        return _make(y, (x,), lambda g: (_kernels.gelu_bwd(flat, g.reshape(flat.shape)).reshape(shape),),
                     "gelu")
    if kind == "relu":
        pos = xd > 0
        return _make(np.where(pos, xd, 0).astype(xd.dtype, copy=False), (x,),
                     lambda g: (np.where(pos, g, 0).astype(g.dtype, copy=False),), "relu")
    if kind == "leaky_relu":
        pos = xd > 0
        slope = np.asarray(LEAKY_SLOPE, dtype=xd.dtype)
        return _make(np.where(pos, xd, xd * slope), (x,),
                     lambda g: (np.where(pos, g, g * slope),), "leaky_relu")
    raise ContractError(f"unknown activation {kind!r}")
