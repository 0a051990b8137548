"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op that touches a tensor with ``requires_grad`` records a node holding
its inputs and a backward rule. :func:`backward` collects the nodes reachable
from a scalar loss into a :class:`Tape`, ordered by recording index, and
replays them once in reverse.
"""

from __future__ import annotations

import itertools

import numpy as np

_recording_index = itertools.count()


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class BackwardStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_index", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._index = -1
        self._consumed = False

    @classmethod
    def from_op(cls, data, parents, backward_fn):
        """Wrap ``data`` as the output of an op.

        ``backward_fn(upstream)`` must return one gradient (or None) per
        parent. Nothing is recorded when no parent requires a gradient.
        """
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._index = next(_recording_index)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered list of recorded nodes reachable from one output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.is_leaf:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._index)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def run_backward(self):
        for node in reversed(self.nodes):
            upstream = node.grad
            if upstream is None:
                continue
            grads = node._backward_fn(upstream)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + np.reshape(g, parent.shape)


def backward(loss):
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls (clear them with ``zero_grad``);
    the graph of one loss can only be replayed once.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar tensor, got shape {shape}")
    if loss._consumed:
        raise BackwardStateError("backward() already ran for this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = Tape.from_output(loss)
    for node in tape.nodes:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    tape.run_backward()
    loss._consumed = True


# --- elementwise and reductions -------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if b.size == 1 and a.size != 1:
        out = a.data + b.data.reshape(())
        return Tensor.from_op(out, (a, b), lambda g: (g, np.sum(g)))
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def power(a, p):
    p = float(p)
    return Tensor.from_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def tensor_sum(a):
    return Tensor.from_op(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def tensor_mean(a):
    n = a.size
    return Tensor.from_op(np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor.from_op(a.data @ b.data, (a, b),
                          lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None):
    """``x @ w.T + b`` for x (N, in), w (out, in), b (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is None:
        return Tensor.from_op(out, (x, w), lambda g: (g @ w.data, g.T @ x.data))
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return Tensor.from_op(out + b.data, (x, w, b),
                          lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def _im2col(xl, kh, kw, stride, ho, wo):
    # channels-last padded input (N, Hp, Wp, C) -> (N*H'*W', kh*kw*C)
    n, c = xl.shape[0], xl.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xl[:, i:i + stride * (ho - 1) + 1:stride,
                                        j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x, w, stride=1, pad=0):
    """Zero-padded cross-correlation of x (N,C,H,W) with w (F,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xl = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    xl[:, pad:pad + h, pad:pad + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xl, kh, kw, stride, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, c)
            dxl = np.zeros(xl.shape)
            for i in range(kh):
                for j in range(kw):
                    dxl[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxl[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return gx, gw

    return Tensor.from_op(out, (x, w), backward_fn)


def avg_pool2d(x, kernel):
    """Non-overlapping average pooling; H and W must be multiples of ``kernel``."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"avg_pool2d: spatial size {(h, w)} not divisible by {kernel}")
    ho, wo = h // kernel, w // kernel
    out = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))
    scale = 1.0 / (kernel * kernel)

    def backward_fn(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * scale, (n, c, ho, kernel, wo, kernel))
        return (gx.reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), backward_fn)


# --- normalization and loss ------------------------------------------------

class BatchNormState:
    """Running statistics of one batchnorm site."""

    def __init__(self, channels, momentum=0.1):
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batchnorm(x, gamma, beta, eps=1e-5, training=True, running_stats=None):
    """Per-channel batch normalization for (N,C) or (N,C,H,W) input."""
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if c == 0:
        raise DimensionError("batchnorm: zero channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma {gamma.shape}/beta {beta.shape} vs {c} channels")
    if eps <= 0:
        raise ContractError("batchnorm: eps must be positive")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            mom = running_stats.momentum
            unbiased = var * m / max(m - 1, 1)
            running_stats.running_mean = (1 - mom) * running_stats.running_mean + mom * mean
            running_stats.running_var = (1 - mom) * running_stats.running_var + mom * unbiased
    else:
        if running_stats is None:
            raise ContractError("batchnorm: eval mode needs running statistics")
        mean, var = running_stats.running_mean, running_stats.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsumexp - z[rows, labels])

    def backward_fn(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.array(loss), (logits,), backward_fn)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
