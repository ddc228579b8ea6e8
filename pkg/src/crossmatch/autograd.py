"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each op output keeps references to its parents and a closure that pushes the
output gradient back into them; ``backward`` walks the resulting DAG in
reverse topological order. Gradients accumulate on leaves until zeroed.
"""
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError

_GRAD_ENABLED = True
NORM_FLOOR = 1e-12


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf":
            arr = np.array(arr, dtype=np.float64, copy=True)
            if arr.ndim == 0:
                arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite values produced by '{_op}'")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self._op = _op

    # -- basic protocol
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def backward(self):
        backward(self)

    # -- operators
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward_fn):
    """Wrap an op result; record graph edges only when some parent needs grad."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into every leaf with requires_grad."""
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not node.is_leaf:
            node.grad = None


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def scale(a, s):
    return mul(a, float(s))


def exp(a):
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        y = np.exp(a.data)

    def bw(g):
        _accum(a, g * y)

    return _node(y, (a,), "exp", bw)


def log(a):
    if (a.data <= 0).any():
        raise NumericalError("log of non-positive value")
    x = a.data

    def bw(g):
        _accum(a, g / x)

    return _node(np.log(x), (a,), "log", bw)


def sigmoid(a):
    y = kernels._sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _node(y, (a,), "sigmoid", bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _node(y, (a,), "tanh", bw)


def leaky_relu(a, slope=0.01):
    pos = a.data > 0
    y = np.where(pos, a.data, slope * a.data)

    def bw(g):
        _accum(a, np.where(pos, g, slope * g))

    return _node(y, (a,), "leaky_relu", bw)


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, np.where(inside, g, 0.0))

    return _node(np.clip(a.data, lo, hi), (a,), "clip", bw)


def grad_reverse(a, strength=1.0):
    """Identity forward; multiplies the incoming gradient by -strength."""

    def bw(g):
        _accum(a, -strength * g)

    return _node(a.data, (a,), "grad_reverse", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def transpose(a):
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix")

    def bw(g):
        _accum(a, g.T)

    return _node(a.data.T, (a,), "transpose", bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", bw)


def take(a, idx):
    """Basic or integer-array indexing; gradients scatter-add back."""
    y = a.data[idx]
    fancy = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx))

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accum(a, full)

    return _node(y, (a,), "take", bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _node(table.data[ids], (table,), "embedding", bw)


# ---------------------------------------------------------------- row-wise

def softmax_rows(x):
    if x.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _node(y, (x,), "softmax_rows", bw)


def log_softmax_rows(x):
    if x.ndim != 2:
        raise DimensionError("log_softmax_rows expects a matrix")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse

    def bw(g):
        _accum(x, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _node(y, (x,), "log_softmax_rows", bw)


def l2_normalize_rows(x):
    if x.ndim != 2:
        raise DimensionError("l2_normalize_rows expects a matrix")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (n < NORM_FLOOR).any():
        raise DegenerateInputError("row with (near-)zero Euclidean norm")
    # dividing by the max-abs entry first makes the result bit-identical
    # for any exactly representable positive rescaling of a row
    u = x.data / np.abs(x.data).max(axis=1, keepdims=True)
    y = u / np.sqrt((u * u).sum(axis=1, keepdims=True))

    def bw(g):
        _accum(x, (g - y * (g * y).sum(axis=1, keepdims=True)) / n)

    return _node(y, (x,), "l2_normalize_rows", bw)


# ---------------------------------------------------------------- layers

def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.9, eps=1e-5, update_stats=True):
    """Per-feature batch normalization over rows.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode (when ``update_stats``); ``momentum`` weights the old value.
    """
    B = x.shape[0]
    if training:
        if B < 2:
            raise ContractError("batch normalization in training mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var * B / (B - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = gamma.data * xhat + beta.data

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                dx = inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * inv_std
            _accum(x, dx)

    return _node(y, (x, gamma, beta), "batch_norm", bw)


def lstm_cell(z, hc_prev, mask):
    """One masked LSTM step.

    ``z`` holds gate pre-activations (i, f, g, o blocks), ``hc_prev`` the
    concatenated previous hidden and cell state. Rows with mask 0 carry the
    previous state through unchanged.
    """
    H = hc_prev.shape[1] // 2
    if z.shape != (hc_prev.shape[0], 4 * H):
        raise DimensionError(f"lstm_cell gate shape {z.shape} vs state {hc_prev.shape}")
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    h_prev = np.ascontiguousarray(hc_prev.data[:, :H])
    c_prev = np.ascontiguousarray(hc_prev.data[:, H:])
    h, c, acts, tanh_c = kernels.lstm_cell_forward(np.ascontiguousarray(z.data), h_prev, c_prev, mask)

    def bw(g):
        dh = np.ascontiguousarray(g[:, :H])
        dc = np.ascontiguousarray(g[:, H:])
        dz, dh_prev, dc_prev = kernels.lstm_cell_backward(dh, dc, acts, tanh_c, c_prev, mask)
        _accum(z, dz)
        _accum(hc_prev, np.concatenate([dh_prev, dc_prev], axis=1))

    return _node(np.concatenate([h, c], axis=1), (z, hc_prev), "lstm_cell", bw)


def lstm_sequence(x_proj, w_hh, mask):
    """Masked LSTM over a whole sequence; returns the final hidden state.

    ``x_proj`` holds input projections time-major ((T*B) x 4H), ``mask`` is
    T x B. Equivalent to chaining lstm_cell, but the recurrent-weight
    gradient is formed with a single matmul over all steps.
    """
    T, B = mask.shape
    H = w_hh.shape[0]
    if x_proj.shape != (T * B, 4 * H) or w_hh.shape != (H, 4 * H):
        raise DimensionError(f"lstm_sequence shapes {x_proj.shape}, {w_hh.shape}, mask {mask.shape}")
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    h, c = np.zeros((B, H)), np.zeros((B, H))
    h_prevs = np.empty((T * B, H))
    cache = []
    for t in range(T):
        rows = slice(t * B, (t + 1) * B)
        h_prevs[rows] = h
        z = x_proj.data[rows] + h @ w_hh.data
        h_new, c_new, acts, tanh_c = kernels.lstm_cell_forward(z, h, c, mask[t])
        cache.append((c, acts, tanh_c))
        h, c = h_new, c_new

    def bw(g):
        dh = np.ascontiguousarray(g)
        dc = np.zeros((B, H))
        dZ = np.empty((T * B, 4 * H))
        for t in range(T - 1, -1, -1):
            c_prev, acts, tanh_c = cache[t]
            dz, dh_carry, dc = kernels.lstm_cell_backward(dh, dc, acts, tanh_c, c_prev, mask[t])
            dZ[t * B:(t + 1) * B] = dz
            dh = dh_carry + dz @ w_hh.data.T
        _accum(x_proj, dZ)
        if w_hh.requires_grad:
            _accum(w_hh, h_prevs.T @ dZ)

    return _node(h, (x_proj, w_hh), "lstm_sequence", bw)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tol)


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f, x, h=1e-5, tol=1e-4, coords=None):
    """Compare backward() against central differences of ``f`` at ``x``.

    ``f`` maps the tensor to a scalar Tensor. ``coords`` optionally restricts
    the check to a subset of flat indices.
    """
    saved = x.grad
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    out = f(x)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(out)
    analytic_full = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved
    x.requires_grad = was

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    numeric = np.empty(idx.size)
    with no_grad():
        for n, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = f(x).item()
            flat[k] = orig - h
            fm = f(x).item()
            flat[k] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
    analytic = analytic_full.reshape(-1)[idx]
    errs = rel_error(analytic, numeric)
    return GradCheckReport(float(errs.max()) if errs.size else 0.0, errs, analytic, numeric, tol)
