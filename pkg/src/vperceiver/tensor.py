"""Dense float32 tensors with reverse-mode autodiff.

A Tensor wraps a C-contiguous numpy array (row-major, float32 by default)
and records the op that produced it. Calling ``backward()`` on a scalar
walks the tape in reverse topological order, visiting each node exactly
once and accumulating ``.grad`` arrays on every tensor that requires them.

Every public op validates that its output is finite; a NaN/Inf anywhere is
treated as a hard error (NumericError), not a value to propagate.

Storage and accumulation are float32. A float64 mode (pass dtype explicitly
or upcast inputs) exists so tests can run the identical graph at 64-bit
precision, e.g. for finite-difference gradient checks.
"""

from __future__ import annotations

import math

import numpy as np

GELU_TANH_COEF = math.sqrt(2.0 / math.pi)  # 0.7978845608...
GELU_CUBIC_COEF = 0.044715


class NumericError(ArithmeticError):
    """A public op produced NaN/Inf, or was fed non-finite input."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        raise TypeError("expected raw array data, got Tensor")
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-d array node in the autodiff graph.

    `data` is always C-contiguous so the flat buffer is the row-major
    enumeration of the logical shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor initialized with non-finite values")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # owned copy
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Seeds d(self)/d(self) = 1 and propagates along the tape. Each node's
        backward closure runs exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar; the free functions below hold the real implementations
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def topo_order(root):
    """Depth-first topological order of the graph below `root`.

    Parents are stored in creation order, so the result is deterministic
    for a given graph construction.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _finite(data):
    # single float64 reduction: any NaN/Inf poisons the sum, and f32
    # magnitudes cannot overflow a float64 accumulator
    return np.isfinite(data.sum(dtype=np.float64))


def _make(data, parents, backward_fn):
    """Wrap an op result, check finiteness, and attach the tape record."""
    if not _finite(data):
        raise NumericError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward_fn)


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """c[..., i, j] = sum_p a[..., i, p] * b[..., p, j].

    Batch dims broadcast under numpy rules; gradients are summed back over
    any broadcast axes.
    """
    a = _wrap(a)
    b = _wrap(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects tensors of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions do not match: {a.data.shape} x {b.data.shape}"
        )

    if a.data.ndim > 2 and b.data.ndim == 2:
        # stacked-lhs x weight: flatten to one large GEMM (much faster than
        # a strided batched product, and the weight grad needs no reduction)
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.data.shape[-1],))

        def backward_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return _make(data, (a, b), backward_fn)

    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, _swap_last(b.data))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(_swap_last(a.data), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward_fn)


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate(s * (g - dot))

    return _make(s, (x,), backward_fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization over the last axis, then affine.

    Uses population variance. A zero-variance row normalizes to zeros and
    therefore maps to beta after the affine.
    """
    x = _wrap(x)
    gamma = _wrap(gamma, like=x)
    beta = _wrap(beta, like=x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gamma.data * xhat + beta.data

    def backward_fn(g):
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (gx_hat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), backward_fn)


def gelu(x):
    """GELU via the tanh approximation: 0.5x(1 + tanh(c(x + 0.044715 x^3)))."""
    x = _wrap(x)
    x3 = x.data * x.data * x.data
    inner = GELU_TANH_COEF * (x.data + GELU_CUBIC_COEF * x3)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        if x.requires_grad:
            d_inner = GELU_TANH_COEF * (1.0 + 3.0 * GELU_CUBIC_COEF * x.data * x.data)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner
            x._accumulate(g * dx)

    return _make(data, (x,), backward_fn)


def transpose(x, axes):
    x = _wrap(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(np.transpose(g, inverse)))

    return _make(data, (x,), backward_fn)


def reshape(x, shape):
    x = _wrap(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _make(data, (x,), backward_fn)


def gather_rows(x, indices):
    """Select rows of a 2-d tensor along axis 0, as a contiguous copy.

    The gradient scatters back into the un-selected layout, so rows that
    were not gathered receive exactly zero gradient.
    """
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows needs a non-empty 1-d index list")
    if idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise ShapeError(
            f"gather_rows indices out of range [0, {x.data.shape[0]}): {idx}"
        )
    data = np.ascontiguousarray(x.data[idx])

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _make(data, (x,), backward_fn)


def mean_all(x):
    x = _wrap(x)
    n = x.data.size
    data = np.asarray(x.data.mean(dtype=x.data.dtype))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g / n))

    return _make(data, (x,), backward_fn)


def sum_all(x):
    x = _wrap(x)
    data = np.asarray(x.data.sum(dtype=x.data.dtype))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _make(data, (x,), backward_fn)


def cross_entropy(logits, labels):
    """Mean cross-entropy between rows of logits and integer labels.

    Accepts [n_classes] with a scalar label or [batch, n_classes] with a
    label vector. Stabilized with log-sum-exp; gradient is
    (softmax - onehot) / batch.
    """
    logits = _wrap(logits)
    squeeze = logits.data.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects 1-d or 2-d logits, got {logits.data.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match logits batch {z.shape[0]}")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ShapeError("label out of range")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    nll = lse - z[np.arange(z.shape[0]), y]
    data = np.asarray(nll.mean(dtype=z.dtype))

    def backward_fn(g):
        if logits.requires_grad:
            e = np.exp(shifted)
            p = e / e.sum(axis=-1, keepdims=True)
            p[np.arange(z.shape[0]), y] -= 1.0
            p *= g / z.shape[0]
            logits._accumulate(p[0] if squeeze else p)

    return _make(data, (logits,), backward_fn)


def backward(loss, params):
    """Gradients of a scalar loss with respect to a named parameter store.

    Runs the reverse sweep and returns {name: grad array}; parameters that
    the loss does not depend on get zero gradients.
    """
    loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


def cosine_similarity(u, v):
    """cos(u, v) in [-1, 1], computed at 64-bit; zero-norm operands give 0.

    Treating a degenerate (zero) vector as similar-to-nothing keeps
    redundancy filters from discarding tokens on an undefined comparison.
    """
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64).reshape(-1)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity operands differ in length: {u.shape} vs {v.shape}")
    denom = float(np.linalg.norm(u) * np.linalg.norm(v))
    if denom == 0.0:
        return 0.0
    return float(np.clip(float(u @ v) / denom, -1.0, 1.0))
