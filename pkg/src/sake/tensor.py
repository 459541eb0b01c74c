"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array and records, on every operation, a closure
that propagates gradients to its parents. Calling ``backward`` on a
scalar loss walks the recorded graph in reverse topological order and
accumulates ``grad`` arrays on every tensor that requires them.

The op set is deliberately small: exactly what a few convolution blocks
with channel gates, two linear heads and a softmax cross-entropy need.
Training runs in float32; gradient checks build the same graphs in
float64.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(op)
    return arr


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """n-dimensional array of reals with an optional autodiff tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = ()):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.op = op
        self._parents = _parents if self.requires_grad else ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

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
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"op={self.op!r}, requires_grad={self.requires_grad})")

    # -- autodiff core ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable requires_grad leaf.

        ``self`` must be scalar. Non-participating leaves are untouched;
        use :func:`backward` to additionally zero-fill them.
        """
        if self.data.size != 1:
            raise ContractViolation(
                f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """Run reverse-mode differentiation of a scalar ``loss``.

    Every requires_grad tensor on the tape receives its gradient; any of
    the given ``leaves`` that did not participate in the graph gets an
    explicit zero gradient of its own shape.
    """
    loss.backward()
    for leaf in leaves:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor]) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = req
    out.op = op
    out._parents = tuple(parents) if req else ()
    out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- arithmetic --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = _make(_check_finite(a.data + b.data, "add"), "add", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = _make(_check_finite(a.data * b.data, "mul"), "mul", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = _coerce(a)
    out = _make(-a.data, "neg", (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(-out.grad)
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(_check_finite(a.data @ b.data, "matmul"), "matmul", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        out._backward = _bw
    return out


# -- elementwise nonlinearities ----------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = _make(np.maximum(a.data, 0), "relu", (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * (a.data > 0))
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    # evaluated via tanh for stability on large |x|
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = _make(_check_finite(s, "sigmoid"), "sigmoid", (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * s * (1.0 - s))
        out._backward = _bw
    return out


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    out = _make(a.data.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = _make(np.concatenate([p.data for p in parts], axis=axis),
                "concat", parts)
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def _bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    p._accumulate(out.grad[tuple(idx)])
        out._backward = _bw
    return out


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = _make(_check_finite(a.data.sum(), "sum").reshape(()), "sum", (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(np.broadcast_to(out.grad, a.shape))
        out._backward = _bw
    return out


def tmean(a: Tensor) -> Tensor:
    a = _coerce(a)
    n = a.data.size
    out = _make(np.asarray(a.data.mean()).reshape(()), "mean", (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(np.broadcast_to(out.grad / n, a.shape))
        out._backward = _bw
    return out


# -- softmax family ------------------------------------------------------------

def softmax_nd(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax on a plain array (max-subtracted)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis of a 2-D tensor."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ContractViolation(f"log_softmax expects 2-D logits, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _make(_check_finite(z - lse, "log_softmax"), "log_softmax", (a,))
    if out.requires_grad:
        sm = np.exp(out.data)

        def _bw():
            g = out.grad
            a._accumulate(g - sm * g.sum(axis=1, keepdims=True))
        out._backward = _bw
    return out


# -- spatial ops ----------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride,
                                    dj:dj + stride * wo:stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square kernel.

    x: (N, C, H, W); w: (O, C, k, k); b: (O,). Output (N, O, Ho, Wo).
    """
    x, w, b = _coerce(x), _coerce(w), _coerce(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-D input and kernel")
    n, c, h, wid = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ContractViolation(
            f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo)
    # (N, Ho, Wo, C*k*k) @ (C*k*k, O)
    flat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k)
    wflat = w.data.reshape(o, c * k * k).T
    y = (flat @ wflat).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + \
        b.data.reshape(1, o, 1, 1)
    out = _make(_check_finite(y, "conv2d"), "conv2d", (x, w, b))
    if out.requires_grad:
        def _bw():
            g = out.grad  # (N, O, Ho, Wo)
            gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            if b.requires_grad:
                b._accumulate(gflat.sum(axis=0))
            if w.requires_grad:
                gw = flat.T @ gflat  # (C*k*k, O)
                w._accumulate(gw.T.reshape(o, c, k, k))
            if x.requires_grad:
                gcols = (gflat @ wflat.T).reshape(n, ho, wo, c, k, k)
                gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros_like(xp)
                for di in range(k):
                    for dj in range(k):
                        gxp[:, :, di:di + stride * ho:stride,
                            dj:dj + stride * wo:stride] += gcols[:, :, di, dj]
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
                x._accumulate(gxp)
        out._backward = _bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an (N, C, H, W) tensor -> (N, C)."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ContractViolation("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.shape
    out = _make(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(n, c, 1, 1) / (h * w)
            x._accumulate(np.broadcast_to(g, x.shape))
        out._backward = _bw
    return out


# -- operator sugar --------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.sum = lambda self: tsum(self)
Tensor.mean = lambda self: tmean(self)
Tensor.reshape = lambda self, *shape: reshape(
    self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list))
    else shape)
