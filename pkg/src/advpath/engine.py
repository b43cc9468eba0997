"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient.  A call to
:meth:`Tape.backward` walks the record once in reverse order and writes
``.grad`` on every leaf tensor that asked for one.

Shapes are never broadcast.  The layer operations accept an optional
explicit leading batch axis (``N``); everything else must match exactly.
"""

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "precision",
    "get_dtype",
    "backward",
    "dense",
    "conv2d",
    "relu",
    "maxpool2",
    "flatten",
    "reshape",
    "softmax",
    "cross_entropy",
    "softmax_cross_entropy",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "tsum",
    "mean",
    "clamp",
    "finite_diff_check",
]

CE_EPS = 1e-12

_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    The engine runs in float32; float64 exists for finite-difference oracles,
    whose central differences are too noisy in single precision.
    """
    dtype = np.dtype(dtype).type
    old = get_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = old


class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or get_dtype(), copy=True)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is already topological.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, fn):
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, fn))

    def backward(self, loss):
        """Populate ``.grad`` of every leaf tensor that requires one.

        Leaf gradients are overwritten on each call, so repeated calls from
        one forward pass give identical results.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar loss tensor, got shape {shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        produced = set()
        leaves = {}
        for node in self.nodes:
            produced.add(id(node.out))
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)


def backward(tape, loss):
    tape.backward(loss)


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(arr, inputs, fn):
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, fn)
    return out


# ----------------------------------------------------------------------------
# elementwise and reductions
# ----------------------------------------------------------------------------


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b):
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c):
    """Multiply by a constant scalar."""
    c = x.data.dtype.type(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def square(x):
    return _emit(x.data * x.data, (x,), lambda g: (2 * x.data * g,))


def tsum(x):
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _emit(out, (x,), lambda g: (np.full_like(x.data, g),))


def mean(x):
    n = x.data.dtype.type(x.size)
    out = np.asarray(x.data.sum() / n, dtype=x.data.dtype)
    return _emit(out, (x,), lambda g: (np.full_like(x.data, g / n),))


def relu(x):
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def clamp(x, lo, hi):
    """Clamp elementwise; the gradient is identity inside ``[lo, hi]`` and zero outside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}")
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x, batched=False):
    """Flatten to a vector, or to ``N x features`` when ``batched``."""
    if batched:
        return reshape(x, (x.shape[0], x.size // max(x.shape[0], 1)))
    return reshape(x, (x.size,))


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------


def dense(x, W, b):
    """Affine map ``W @ x + b`` for ``x`` of shape ``[n_in]`` or ``[N, n_in]``."""
    if W.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != W.shape[0] or x.data.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"dense: input {x.shape}, weight {W.shape}, bias {b.shape} do not conform")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def fn(g):
        if xd.ndim == 1:
            return Wd.T @ g, np.outer(g, xd), g
        return g @ Wd, g.T @ xd, g.sum(axis=0)

    return _emit(out, (x, W, b), fn)


def _conv_out(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


def conv2d(x, K, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (``[C,H,W]`` or ``[N,C,H,W]``) with ``K`` (``[Co,Ci,k,k]``)."""
    stride, pad = int(stride), int(pad)
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or K.data.ndim != 4 or b.data.ndim != 1:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {K.shape}, bias {b.shape} do not conform")
    Co, Ci, kh, kw = K.shape
    C, H, W = x.shape[-3:]
    if stride < 1 or pad < 0 or kh != kw or C != Ci or b.shape[0] != Co:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {K.shape}, bias {b.shape}, stride {stride}, pad {pad} do not conform")
    Ho, Wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    if Ho is None or Wo is None:
        raise DimensionError(f"conv2d: input {x.shape} with kernel {kh}, stride {stride}, pad {pad} does not tile exactly")
    xd = x.data if batched else x.data[None]
    N = xd.shape[0]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    Kmat = K.data.reshape(Co, -1)
    out = (cols @ Kmat.T + b.data).reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def fn(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, Co)
        dK = (g2.T @ cols).reshape(K.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ Kmat).reshape(N, Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return (dx if batched else dx[0]), dK, db

    return _emit(out, (x, K, b), fn)


def maxpool2(x):
    """2x2 non-overlapping max pool; gradient goes to the first maximal cell."""
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"maxpool2: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2: spatial dims of {x.shape} must be even")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, H // 2, 2, W // 2, 2)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
    flat = blocks.transpose(perm).reshape(*lead, H // 2, W // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        back = onehot.reshape(*lead, H // 2, W // 2, 2, 2)
        inv = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
        return (back.transpose(inv).reshape(x.shape),)

    return _emit(np.ascontiguousarray(out), (x,), fn)


# ----------------------------------------------------------------------------
# probabilities and losses
# ----------------------------------------------------------------------------


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z):
    """Softmax over the last axis, with max subtraction."""
    if z.data.ndim not in (1, 2):
        raise DimensionError(f"softmax: expected [k] or [N,k], got {z.shape}")
    p = _softmax(z.data)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (z,), fn)


def _check_labels(y, k, n=None):
    y = np.asarray(y)
    if n is None:
        if y.ndim != 0:
            raise DimensionError(f"expected a single class index, got shape {y.shape}")
    elif y.shape != (n,):
        raise DimensionError(f"expected {n} class indices, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise IndexError(f"class indices must be integers, got {y}")
        y = y.astype(np.int64)
    if np.any((y < 0) | (y >= k)):
        raise IndexError(f"class index {y} out of range for {k} classes")
    return y


def cross_entropy(p, y):
    """``-log(p[y] + eps)`` for a probability vector ``p``."""
    if p.data.ndim != 1:
        raise DimensionError(f"cross_entropy: expected [k], got {p.shape}")
    y = int(_check_labels(y, p.shape[0]))
    eps = p.data.dtype.type(CE_EPS)
    py = p.data[y]
    out = np.asarray(-np.log(py + eps), dtype=p.data.dtype)

    def fn(g):
        d = np.zeros_like(p.data)
        d[y] = -g / (py + eps)
        return (d,)

    return _emit(out, (p,), fn)


def softmax_cross_entropy(z, y):
    """Fused, stable softmax + cross-entropy taken on logits.

    For ``z`` of shape ``[N, k]`` the loss is the batch mean.
    """
    if z.data.ndim == 1:
        yv = _check_labels(y, z.shape[0])[None]
        zd = z.data[None]
    elif z.data.ndim == 2:
        yv = _check_labels(y, z.shape[1], z.shape[0])
        zd = z.data
    else:
        raise DimensionError(f"softmax_cross_entropy: expected [k] or [N,k], got {z.shape}")
    N = zd.shape[0]
    rows = np.arange(N)
    shifted = zd - zd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    losses = lse - shifted[rows, yv]
    out = np.asarray(losses.mean(), dtype=zd.dtype)
    p = _softmax(zd)

    def fn(g):
        d = p.copy()
        # p[y] - 1 loses everything when p[y] rounds to 1; use the complement sum.
        d[rows, yv] = 0
        d[rows, yv] = -d.sum(axis=-1)
        d *= g / zd.dtype.type(N)
        return (d if z.data.ndim == 2 else d[0],)

    return _emit(out, (z,), fn)


# ----------------------------------------------------------------------------
# oracle
# ----------------------------------------------------------------------------


def finite_diff_check(f, x, h=1e-3, indices=None, return_grads=False):
    """Compare backward's gradient of scalar ``f(x)`` with central differences.

    ``x`` is perturbed in place, so ``f`` may ignore its argument and close
    over ``x`` directly (handy for parameter tensors).  ``indices`` limits the
    check to some flat coordinates.  Returns the maximum per-coordinate
    relative error with denominator ``max(|a|, |b|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        analytic = x.grad.astype(np.float64).reshape(-1)
    finally:
        x.requires_grad = was
        x.grad = None
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    analytic = analytic[idx]
    numeric = np.empty(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric[j] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if idx.size else 0.0
    if return_grads:
        return err, analytic, numeric
    return err
