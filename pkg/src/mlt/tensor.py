"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations the multi-label transformer needs,
each with a hand-written backward rule that is covered by the finite
difference checks in ``mlt.gradcheck``. All arithmetic is float64 so that
central-difference gradient comparisons stay tight.

Graph/tape policy: every operation eagerly computes its value and, when any
input participates in differentiation, records an ``Op`` node linking the
output to its inputs. ``backward`` topologically sorts the recorded ops
reaching the loss and visits each exactly once in reverse order. Graphs are
immutable; calling ``backward`` again re-walks the same graph and gradients
accumulate into ``.grad`` (callers zero grads between steps).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

LN_EPS_DEFAULT = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names both shapes."""


class NonScalarLossError(ValueError):
    """Raised when backward() is started from a tensor that is not a scalar."""


class Op:
    """One recorded operation: output's inputs plus the rule mapping the
    output gradient to per-input gradients (None for non-differentiable slots)."""

    __slots__ = ("name", "inputs", "backward")

    def __init__(self, name: str, inputs: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], tuple]):
        self.name = name
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """A dense float64 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[Op] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, name: str, inputs: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = Op(name, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that numpy broadcasting expanded to reach shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


class Tape:
    """Topologically ordered record of the ops reaching a root tensor.

    Every op's inputs precede it in ``nodes``; a reverse sweep therefore
    visits each op exactly once with its output gradient fully accumulated.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.op is not None:
                for parent in node.op.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Deterministic: traversal and accumulation order depend only on graph
    structure. Grads accumulate across calls; use ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(
            f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        input_grads = node.op.backward(g)
        for parent, pg in zip(node.op.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                grads[id(parent)] = acc + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic (trailing-dimension broadcasting)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, "sub", (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(data, "mul", (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    data = a.data / b.data
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape)
        return ga, gb

    return _make(data, "div", (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def back(g):
        return (g * c,)

    return _make(data, "scale", (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and shaping
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, "
                         f"got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents do not broadcast, "
                         f"{a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # batched-left case: one flat dgemm beats the batched gufunc, and
        # the weight gradient avoids a per-batch intermediate entirely
        a2 = np.ascontiguousarray(ad).reshape(-1, ad.shape[-1])
        data = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])

        def back_flat(g):
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(data, "matmul", (a, b), back_flat)

    data = ad @ bd

    def back(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, "matmul", (a, b), back)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: need rank >= 2, got {a.shape}")
    data = a.data.swapaxes(-1, -2)

    def back(g):
        return (g.swapaxes(-1, -2),)

    return _make(data, "transpose_last2", (a,), back)


def swap_axes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    if not (-a.ndim <= axis1 < a.ndim and -a.ndim <= axis2 < a.ndim):
        raise ShapeError(f"swap_axes: axes ({axis1}, {axis2}) out of range "
                         f"for shape {a.shape}")
    data = a.data.swapaxes(axis1, axis2)

    def back(g):
        return (g.swapaxes(axis1, axis2),)

    return _make(data, "swap_axes", (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape} changes element count")
    data = a.data.reshape(shape)
    src = a.shape

    def back(g):
        return (g.reshape(src),)

    return _make(data, "reshape", (a,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, "concat", tensors, back)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    sizes = [int(s) for s in sizes]
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} "
                         f"of shape {a.shape}")
    offsets = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, offsets, axis=axis)
    outs = []
    start = 0
    for piece, n in zip(pieces, sizes):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)
        start += n

        def back(g, _sl=sl):
            full = np.zeros_like(a.data)
            full[_sl] = g
            return (full,)

        outs.append(_make(piece, "split", (a,), back))
    return outs


def gather_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, "gather_rows", (table,), back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    return _make(data, "sum", (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: bad shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, "softmax_lastdim", (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = LN_EPS_DEFAULT) -> Tensor:
    """Standardize each last-dim slice (population variance) then apply
    the gamma/beta affine map."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} "
                         f"must be ({d},) for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def back(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _make(data, "layer_norm", (x, gamma, beta), back)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    phi = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    data = x.data * phi
    xd = x.data

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi + xd * pdf),)

    return _make(data, "gelu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_stable(x.data)

    def back(g):
        return (g * data * (1.0 - data),)

    return _make(data, "sigmoid", (x,), back)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tlog(x: Tensor) -> Tensor:
    data = np.log(x.data)
    xd = x.data

    def back(g):
        return (g / xd,)

    return _make(data, "log", (x,), back)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * inside,)

    return _make(data, "clip", (x,), back)


def dropout(x: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time;
    eval mode returns the input unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    data = x.data * factor

    def back(g):
        return (g * factor,)

    return _make(data, "dropout", (x,), back)
