"""Reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run: every operation records its parents and a backward rule on
the freshly created output tensor, so the tape is exactly the graph hanging
off the loss and is rebuilt on each forward pass.  ``backward`` replays it
in reverse topological order and accumulates gradients into every tensor
flagged ``requires_grad``.

Scope is deliberately small: the operations the prompt-tuned transformer,
the evidential losses and the distillation path need, nothing else.  All
data is float64; a NaN or Inf appearing in any result raises immediately
rather than propagating.
"""

from __future__ import annotations

import contextlib

import numpy as np

from fedsim.backend import kernels
from fedsim.special import DomainError


class DimensionError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class GraphError(RuntimeError):
    """Autodiff usage error (non-scalar loss, repeated backward, ...)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data or gradients."""


_grad_enabled = True


def _assert_finite(arr: np.ndarray, what: str):
    # One scalar reduction on the fast path; a NaN/Inf anywhere makes the
    # sum non-finite. Only a suspicious sum (which could in principle be
    # overflow of large finite values) pays for the elementwise scan.
    s = float(arr.sum())
    if s != s or s == float("inf") or s == float("-inf"):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in {what}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float64 array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _assert_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._done = False

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

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd) -> Tensor:
    """Wrap an op result; records the tape edge only when a parent needs it."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._bwd is not None for p in parents):
        out._parents = parents
        out._bwd = bwd
    return out


def _needs(node: Tensor) -> bool:
    """Whether a gradient for this node is worth computing at all."""
    return node.requires_grad or node._bwd is not None


def _accum(node: Tensor, g):
    if not (node.requires_grad or node._bwd is not None):
        return
    if node.grad is None:
        # Adopt the array without copying. Gradient arrays are never
        # mutated in place (fan-in below reallocates), so aliasing a
        # rule's output or even another tensor's grad is safe.
        node.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already ran on this graph; run a fresh forward pass")
    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
    # Finiteness is asserted on the gradients optimizers actually read;
    # forward values were already checked at creation.
    for node in topo:
        if node.requires_grad and node.grad is not None:
            _assert_finite(node.grad, "gradient")
    loss._done = True


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops
# ---------------------------------------------------------------------------

def _broadcast_check(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bwd(g):
        if _needs(a):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        if _needs(a):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data ** p, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), bwd)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    flat = np.ascontiguousarray(a.data.reshape(-1))
    y, t = kernels.gelu_fwd(flat)

    def bwd(g):
        _accum(a, kernels.gelu_bwd(flat, t, np.ascontiguousarray(g.reshape(-1))).reshape(a.data.shape))

    return _make(y.reshape(a.data.shape), (a,), bwd)


def maximum_scalar(a, c) -> Tensor:
    """Elementwise max(a, c); gradient flows only where a > c."""
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        _accum(a, g * (a.data > c))

    return _make(np.maximum(a.data, c), (a,), bwd)


def lgamma(a) -> Tensor:
    a = _as_tensor(a)
    if not (a.data > 0).all():
        raise DomainError("lgamma requires strictly positive input")
    flat = np.ascontiguousarray(a.data.reshape(-1))

    def bwd(g):
        _accum(a, g * kernels.digamma_vec(flat).reshape(a.data.shape))

    return _make(kernels.lgamma_vec(flat).reshape(a.data.shape), (a,), bwd)


def digamma(a) -> Tensor:
    a = _as_tensor(a)
    if not (a.data > 0).all():
        raise DomainError("digamma requires strictly positive input")
    flat = np.ascontiguousarray(a.data.reshape(-1))

    def bwd(g):
        _accum(a, g * kernels.trigamma_vec(flat).reshape(a.data.shape))

    return _make(kernels.digamma_vec(flat).reshape(a.data.shape), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(str(e)) from None

    def bwd(g):
        if _needs(a):
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out_data, (a, b), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(a.data[idx].copy(), (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _needs(t):
                _accum(t, np.ascontiguousarray(np.moveaxis(moved[lo:hi], 0, axis)))

    return _make(out_data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape))

    return _make(out_data, (a,), bwd)


def max_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        full = out_data
        if axis is not None and not keepdims:
            full = np.expand_dims(out_data, axis)
            g = np.expand_dims(g, axis)
        mask = a.data == full
        ties = mask.sum(axis=axis, keepdims=True)
        _accum(a, mask * (g / ties))

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# fused neural-net ops (kernel-backed)
# ---------------------------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    ax = axis % a.ndim
    moved = np.ascontiguousarray(np.moveaxis(a.data, ax, -1))
    rows = moved.reshape(-1, moved.shape[-1])
    y2 = kernels.softmax_fwd(rows)
    out_data = np.moveaxis(y2.reshape(moved.shape), -1, ax)

    def bwd(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(rows.shape)
        dx = kernels.softmax_bwd(y2, gm).reshape(moved.shape)
        _accum(a, np.moveaxis(dx, -1, ax))

    return _make(np.ascontiguousarray(out_data), (a,), bwd)


def layernorm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise DimensionError("layernorm affine parameters must match the last axis")
    rows = np.ascontiguousarray(x.data.reshape(-1, n))
    y2, xhat, rstd = kernels.layernorm_fwd(rows, gamma.data, beta.data, float(eps))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, n))
        dx, dgamma, dbeta = kernels.layernorm_bwd(g2, xhat, rstd, gamma.data)
        _accum(x, dx.reshape(x.data.shape))
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    return _make(y2.reshape(x.data.shape), (x, gamma, beta), bwd)


def linear(x, w, b) -> Tensor:
    """x @ w + b with a 2-d weight, fused into one graph node.

    x may carry any number of leading axes; w is [d_in, d_out] and b is
    [d_out]. Cheaper than matmul + add for the transformer's many
    projections because the bias grad reduction happens in one place.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or b.data.shape != (w.data.shape[1],):
        raise DimensionError("linear expects w [d_in, d_out] and b [d_out]")
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise DimensionError(f"linear input last axis {x.data.shape[-1]} != {d_in}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, d_in)
    y = x2 @ w.data
    y += b.data

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d_out)
        if _needs(x):
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        if _needs(w):
            _accum(w, x2.T @ g2)
        if _needs(b):
            _accum(b, g2.sum(axis=0))

    return _make(y.reshape(x.data.shape[:-1] + (d_out,)), (x, w, b), bwd)


def attention_probs(q, k, scale) -> Tensor:
    """softmax(q @ k^T * scale) over the last axis, one fused node.

    q: [..., T, d], k: [..., C, d] with identical leading axes; output
    [..., T, C] rows summing to 1. The scores tensor never
    materializes in the graph.
    """
    q, k = _as_tensor(q), _as_tensor(k)
    if q.ndim < 2 or q.data.shape[:-2] != k.data.shape[:-2]:
        raise DimensionError(
            f"attention_probs leading axes disagree: {q.data.shape} vs {k.data.shape}"
        )
    if q.data.shape[-1] != k.data.shape[-1]:
        raise DimensionError("attention_probs head dimensions disagree")
    scale = float(scale)
    lead = q.data.shape[:-2]
    t, d = q.data.shape[-2:]
    c = k.data.shape[-2]
    q3 = np.ascontiguousarray(q.data).reshape(-1, t, d)
    k3 = np.ascontiguousarray(k.data).reshape(-1, c, d)
    probs = kernels.attn_probs_fwd(q3, k3, scale)

    def bwd(g):
        g3 = np.ascontiguousarray(g).reshape(-1, t, c)
        dq, dk = kernels.attn_probs_bwd(probs, q3, k3, scale, g3)
        _accum(q, dq.reshape(q.data.shape))
        _accum(k, dk.reshape(k.data.shape))

    return _make(probs.reshape(lead + (t, c)), (q, k), bwd)


def mse(a, b) -> Tensor:
    """Mean squared error over all entries; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    d = sub(a, b)
    return mean(mul(d, d))
