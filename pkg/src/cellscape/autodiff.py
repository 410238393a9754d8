"""Minimal reverse-mode automatic differentiation over dense numpy buffers.

Tensors wrap float64 arrays and record the operations that produced them;
``backward`` walks the graph in reverse topological order and accumulates
gradients into every reachable tensor with ``requires_grad=True``. Only the
operations the training loop needs are implemented; all run on CPU numpy.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = bool(os.environ.get("CELLSCAPE_DEBUG"))


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks after every forward and backward step."""
    global _DEBUG
    _DEBUG = bool(flag)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float64 tensor with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def _accumulate(self, grad: np.ndarray, own: bool = False) -> None:
        # ``own=True`` promises the buffer is freshly allocated and never
        # handed to another tensor, so first-touch can take it without a copy
        if self.grad is None:
            self.grad = grad if own else np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self) -> None:
        backward(self)

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn, where: str) -> Tensor:
    """Create an op output, recording the graph only if a parent needs grads."""
    _check_finite(values, where)
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values + b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(values, (a, b), backward_fn, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values * b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape), own=True)

    return _make(values, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values / b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.values, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.values / (b.values * b.values), b.shape), own=True)

    return _make(values, (a, b), backward_fn, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    values = a.values ** p

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * p * a.values ** (p - 1.0), own=True)

    return _make(values, (a,), backward_fn, "power")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T, own=True)
        if b.requires_grad:
            b._accumulate(a.values.T @ g, own=True)

    return _make(values, (a, b), backward_fn, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2D tensor")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.T.copy(), own=True)

    return _make(a.values.T.copy(), (a,), backward_fn, "transpose")


def exp(a) -> Tensor:
    a = as_tensor(a)
    values = np.exp(a.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * values, own=True)

    return _make(values, (a,), backward_fn, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    values = np.log(a.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g / a.values, own=True)

    return _make(values, (a,), backward_fn, "log")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(values, (a,), backward_fn, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward_fn(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + s)
                t._accumulate(g[tuple(index)])
            offset += s

    return _make(values, tensors, backward_fn, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.values.reshape(shape), (a,), backward_fn, "reshape")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("slice_cols expects a 2D tensor")

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[:, start:stop] = g
            a._accumulate(full)

    return _make(a.values[:, start:stop].copy(), (a,), backward_fn, "slice_cols")


def _sorted_row_sums(rows: np.ndarray, sorted_ids: np.ndarray,
                     num_segments: int) -> np.ndarray:
    """Row sums grouped by pre-sorted integer ids (reduceat is much faster
    than np.add.at for the edge-sized arrays used here)."""
    out_shape = (num_segments,) + rows.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    if sorted_ids.size == 0:
        return out
    starts = np.flatnonzero(np.diff(sorted_ids)) + 1
    starts = np.concatenate(([0], starts))
    out[sorted_ids[starts]] = np.add.reduceat(rows, starts, axis=0)
    return out


def gather_rows(a, index) -> Tensor:
    """Masked row selection: pick rows of ``a`` by integer index (with repeats)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    order: list[np.ndarray] = []  # lazy argsort cache for the scatter-add

    def backward_fn(g):
        if a.requires_grad:
            if not order:
                order.append(np.argsort(idx, kind="stable"))
            perm = order[0]
            a._accumulate(_sorted_row_sums(g[perm], idx[perm], a.shape[0]), own=True)

    return _make(a.values[idx], (a,), backward_fn, "gather_rows")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row segment ids."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.size and np.all(seg[1:] >= seg[:-1]):
        values = _sorted_row_sums(a.values, seg, num_segments)
    else:
        values = np.zeros((num_segments,) + a.shape[1:], dtype=np.float64)
        np.add.at(values, seg, a.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g[seg], own=True)

    return _make(values, (a,), backward_fn, "segment_sum")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    positive = a.values > 0
    values = np.where(positive, a.values, slope * a.values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * np.where(positive, 1.0, slope), own=True)

    return _make(values, (a,), backward_fn, "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    positive = a.values > 0
    expm = alpha * np.expm1(np.minimum(a.values, 0.0))
    values = np.where(positive, a.values, expm)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * np.where(positive, 1.0, expm + alpha), own=True)

    return _make(values, (a,), backward_fn, "elu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            inner = (g * values).sum(axis=axis, keepdims=True)
            a._accumulate(values * (g - inner), own=True)

    return _make(values, (a,), backward_fn, "softmax")


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Normalize each row to unit Euclidean norm (zero rows stay zero via eps)."""
    a = as_tensor(a)
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    safe = np.maximum(norms, eps)
    values = a.values / safe

    def backward_fn(g):
        if a.requires_grad:
            dots = (g * a.values).sum(axis=1, keepdims=True)
            a._accumulate(g / safe - a.values * dots / (safe ** 3), own=True)

    return _make(values, (a,), backward_fn, "l2_normalize_rows")


# ---------------------------------------------------------------------------
# convolution, pooling, batch normalization
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Return (N*Ho*Wo, C*kh*kw) patch matrix for a stride-1 convolution."""
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, ho, wo, c, kh, kw), (s0, s2, s3, s1, s2, s3), writeable=False
    )
    return np.ascontiguousarray(windows).reshape(n * ho * wo, c * kh * kw)


def _conv_raw(x: np.ndarray, w: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    cols = _im2col(x, kh, kw, pad)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), cols


def conv2d(x, w, b, padding: int | str = "same") -> Tensor:
    """Stride-1 2D convolution, NCHW layout; ``padding`` is "same" or an int."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    cout, cin, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ValueError(f"conv2d input shape {x.shape} incompatible with kernel {w.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding requires odd kernel size")
        pad = (kh - 1) // 2
    else:
        pad = int(padding)
    values, cols = _conv_raw(x.values, w.values, pad)
    values = values + b.values.reshape(1, cout, 1, 1)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.shape), own=True)
        if x.requires_grad:
            w_rot = w.values[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv_raw(g, np.ascontiguousarray(w_rot), kh - 1 - pad)
            x._accumulate(gx, own=True)

    return _make(values, (x, w, b), backward_fn, "conv2d")


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    hp, wp = h // 2, w // 2
    if hp == 0 or wp == 0:
        raise ValueError(f"maxpool2 input spatial dims too small: {x.shape}")
    windows = (
        x.values[:, :, : 2 * hp, : 2 * wp]
        .reshape(n, c, hp, 2, wp, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hp, wp, 4)
    )
    idx = windows.argmax(axis=-1)
    values = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return
        g4 = np.zeros((n, c, hp, wp, 4), dtype=np.float64)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.values)
        gx[:, :, : 2 * hp, : 2 * wp] = (
            g4.reshape(n, c, hp, wp, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hp, 2 * wp)
        )
        x._accumulate(gx, own=True)

    return _make(values, (x,), backward_fn, "maxpool2")


class BatchNormState:
    """Running statistics for one batch-normalization layer."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(num_features, dtype=np.float64)
        self.running_var = np.ones(num_features, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               update_running: bool = True) -> Tensor:
    """Batch normalization over (N,) or (N,H,W) per channel; NCHW or ND input."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 2:
        axes, pshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm expects 2D or 4D input, got {x.shape}")
    gv = gamma.values.reshape(pshape)
    bv = beta.values.reshape(pshape)
    m = int(np.prod([x.shape[a] for a in axes]))

    if training:
        mu = x.values.mean(axis=axes, keepdims=True)
        var = x.values.var(axis=axes, keepdims=True)
        if update_running:
            unbiased = var.reshape(-1) * (m / max(m - 1, 1))
            state.running_mean += state.momentum * (mu.reshape(-1) - state.running_mean)
            state.running_var += state.momentum * (unbiased - state.running_var)
    else:
        mu = state.running_mean.reshape(pshape)
        var = state.running_var.reshape(pshape)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.values - mu) * inv_std
    values = gv * xhat + bv

    def backward_fn(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes), own=True)
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gv
            if training:
                term = gxhat.sum(axis=axes, keepdims=True) + xhat * (gxhat * xhat).sum(
                    axis=axes, keepdims=True
                )
                x._accumulate(inv_std * (gxhat - term / m), own=True)
            else:
                x._accumulate(gxhat * inv_std, own=True)

    return _make(values, (x, gamma, beta), backward_fn, "batch_norm")


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode gradient accumulation from a scalar loss.

    Raises if the loss is not scalar, if the graph contains a cycle, or if
    called twice on the same root without resetting gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this tensor; reset gradients first")
    loss._backward_done = True

    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = finished
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 2
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("computation graph contains a cycle")
        state[id(node)] = 1
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent)) == 1:
                raise RuntimeError("computation graph contains a cycle")
            if state.get(id(parent)) != 2:
                stack.append((parent, False))

    # reset op outputs (not leaves) so a second loss sharing this forward
    # graph starts from clean intermediate gradients
    for node in order:
        if node._backward_fn is not None:
            node.grad = None

    loss._accumulate(np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            _check_finite(node.grad, "backward")
            node._backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
