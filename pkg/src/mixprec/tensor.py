"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays wrapped in graph nodes, one
backward closure per operation, and an iterative topological sweep in
exact reverse construction order. float64 is the default dtype so that
finite-difference gradient checks have headroom; float32 arrays are
accepted and flow through numpy's promotion rules.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import GraphError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array plus an optional gradient slot.

    Operations on tensors record their inputs and a backward closure;
    calling :meth:`backward` on a scalar result fills ``grad`` on every
    reachable tensor with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def assert_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ShapeError(f"{context}: non-finite values encountered")
        return self

    # -- gradient machinery --------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse sweep from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar tensor")
        if self._backward is None and not self._parents:
            raise GraphError("backward() called on a tensor with no computation graph")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph reachable from root."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    """Create an op output; tracks parents only when gradients are needed."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise and structural ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float, np.floating)):
        c = float(b)
        out = _result(a.data * c, (a,))
        if out.requires_grad:
            out._backward = lambda g: a.accumulate_grad(g * c)
        return out
    b = as_tensor(b)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(-g)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(as_tensor(b)))


def relu(a: Tensor) -> Tensor:
    # gradient passes only where the input is strictly positive
    mask = a.data > 0
    out = _result(np.where(mask, a.data, 0.0), (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g * mask)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = _result(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g.reshape(old))
    return out


def flatten(a: Tensor) -> Tensor:
    """Collapse all non-batch axes: [N, ...] -> [N, prod(...)]."""
    return reshape(a, (a.data.shape[0], -1))


def tsum(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(np.asarray(a.data.mean()), (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.broadcast_to(g / n, a.data.shape).copy())
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ ({a.data.shape} @ {b.data.shape})")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), parts)
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def _bw(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                if p.requires_grad:
                    p.accumulate_grad(piece)
        out._backward = _bw
    return out


def softmax(a: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along `axis`, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError("softmax temperature must be positive")
    z = (a.data - a.data.max(axis=axis, keepdims=True)) / tau
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, (a,))
    if out.requires_grad:
        def _bw(g):
            inner = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate_grad(s * (g - inner) / tau)
        out._backward = _bw
    return out


def blend(copies: Sequence[Tensor], coeffs: Tensor) -> Tensor:
    """Convex combination sum_p coeffs[p] * copies[p] of same-shape tensors."""
    copies = [as_tensor(c) for c in copies]
    if coeffs.data.ndim != 1 or len(coeffs.data) != len(copies):
        raise ShapeError("blend: need one coefficient per copy")
    acc = coeffs.data[0] * copies[0].data
    for p in range(1, len(copies)):
        acc = acc + coeffs.data[p] * copies[p].data
    out = _result(acc, list(copies) + [coeffs])
    if out.requires_grad:
        def _bw(g):
            for p, c in enumerate(copies):
                if c.requires_grad:
                    c.accumulate_grad(coeffs.data[p] * g)
            if coeffs.requires_grad:
                gc = np.array([(g * c.data).sum() for c in copies])
                coeffs.accumulate_grad(gc)
        out._backward = _bw
    return out


def channel_blend(copies: Sequence[Tensor], coeffs: Tensor) -> Tensor:
    """Per-channel convex combination along axis 0.

    copies[p] has shape [C, ...]; coeffs has shape [C, P] (one softmax row
    per channel) or [1, P] (a single row shared by every channel, used by
    the tied/layer-wise mode - its gradient then sums over channels).
    """
    copies = [as_tensor(c) for c in copies]
    n_copies = len(copies)
    c_out = copies[0].data.shape[0]
    rows, width = coeffs.data.shape
    if width != n_copies or rows not in (1, c_out):
        raise ShapeError(
            f"channel_blend: coefficient shape {coeffs.data.shape} does not fit "
            f"{n_copies} copies with {c_out} channels")
    extra = (1,) * (copies[0].data.ndim - 1)
    acc = coeffs.data[:, 0].reshape((rows,) + extra) * copies[0].data
    for p in range(1, n_copies):
        acc = acc + coeffs.data[:, p].reshape((rows,) + extra) * copies[p].data
    out = _result(acc, list(copies) + [coeffs])
    if out.requires_grad:
        def _bw(g):
            for p, c in enumerate(copies):
                if c.requires_grad:
                    c.accumulate_grad(coeffs.data[:, p].reshape((rows,) + extra) * g)
            if coeffs.requires_grad:
                gc = np.empty((rows, n_copies))
                sum_axes = tuple(range(1, g.ndim))
                for p, c in enumerate(copies):
                    per_channel = (g * c.data).sum(axis=sum_axes)
                    gc[:, p] = per_channel.sum() if rows == 1 else per_channel
                coeffs.accumulate_grad(gc)
        out._backward = _bw
    return out


# -- neural-net ops ------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map [N, F_in] x [F_out, F_in] -> [N, F_out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input {x.data.shape} incompatible with weight {w.data.shape}")
    parents = (x, w) if b is None else (x, w, b)
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = _result(y, parents)
    if out.requires_grad:
        def _bw(g):
            if x.requires_grad:
                x.accumulate_grad(g @ w.data)
            if w.requires_grad:
                w.accumulate_grad(g.T @ x.data)
            if b is not None and b.requires_grad:
                b.accumulate_grad(g.sum(axis=0))
        out._backward = _bw
    return out


def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than padded input ({h}x{w})")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int,
            stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: [N,C,H,W] x [C_out,C,K_y,K_x] -> [N,C_out,OH,OW].

    Uses einsum for the contraction, so every output channel is reduced
    independently: splitting C_out and concatenating is bit-exact.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, width = x.data.shape
    c_out, c_in, kh, kw = w.data.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {c_in}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(c_out, c_in * kh * kw)
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(width, kw, stride, padding)
    y = np.einsum("ok,nkp->nop", wmat, cols).reshape(n, c_out, oh, ow)
    if b is not None:
        if b.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({c_out},)")
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y, parents)
    if out.requires_grad:
        def _bw(g):
            gflat = g.reshape(n, c_out, oh * ow)
            if w.requires_grad:
                gw = np.einsum("nop,nkp->ok", gflat, cols)
                w.accumulate_grad(gw.reshape(w.data.shape))
            if x.requires_grad:
                gcols = np.einsum("ok,nop->nkp", wmat, gflat)
                x.accumulate_grad(_col2im(gcols, x.data.shape, kh, kw, stride, padding))
            if b is not None and b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def _pool_view(x: np.ndarray, window: int):
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"pool: window {window} must divide spatial dims {h}x{w}")
    oh, ow = h // window, w // window
    v = x.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(n, c, oh, ow, window * window), (oh, ow)


def avgpool2d(x: Tensor, window: int) -> Tensor:
    v, (oh, ow) = _pool_view(x.data, window)
    out = _result(v.mean(axis=-1), (x,))
    if out.requires_grad:
        n, c = x.data.shape[:2]
        def _bw(g):
            spread = np.repeat(g[..., None], window * window, axis=-1) / (window * window)
            spread = spread.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
            x.accumulate_grad(spread.reshape(x.data.shape))
        out._backward = _bw
    return out


def maxpool2d(x: Tensor, window: int) -> Tensor:
    v, (oh, ow) = _pool_view(x.data, window)
    idx = v.argmax(axis=-1)  # first maximum on ties
    out = _result(np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], (x,))
    if out.requires_grad:
        n, c = x.data.shape[:2]
        def _bw(g):
            scatter = np.zeros_like(v)
            np.put_along_axis(scatter, idx[..., None], g[..., None], axis=-1)
            scatter = scatter.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
            x.accumulate_grad(scatter.reshape(x.data.shape))
        out._backward = _bw
    return out


# -- losses --------------------------------------------------------------------


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against rows of logits."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _result(np.asarray(-logp[np.arange(n), labels].mean()), (logits,))
    if out.requires_grad:
        def _bw(g):
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(p * (g / n))
        out._backward = _bw
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeError(f"mse: target shape {target.shape} != {pred.data.shape}")
    diff = pred.data - target
    out = _result(np.asarray((diff * diff).mean()), (pred,))
    if out.requires_grad:
        out._backward = lambda g: pred.accumulate_grad(2.0 * diff * (g / pred.data.size))
    return out


# operator sugar ----------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.relu = relu
Tensor.reshape = reshape
