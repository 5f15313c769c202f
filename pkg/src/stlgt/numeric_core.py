"""Minimal dense-tensor engine with reverse-mode differentiation.

64-bit floats everywhere: the models built on top are tiny, so determinism
wins over speed. Every op checks that its output is finite and raises
NumericalFault otherwise. Ops record onto an ambient Tape when one is active
and an input requires gradients; ``Tape.backward`` walks the recorded nodes
in reverse order exactly once and then clears the tape. Tensors created
outside a tape are plain immutable values, safe to share across contexts.

Multiply-accumulate accounting: wrap a region in ``with count_ops() as st``
and every op adds its cost to ``st.macs``. Conventions (fixed so analytic
cost formulas asserted in tests are reproducible):

    matmul        prod(batch dims) * n * k * m
    spmm          nnz * mixed columns
    elementwise   output size (unary and binary alike)
    reductions    input size (sum, mean, frobenius_norm)
    softmax 4*n   layer_norm 8*n   gelu 4*n   rdft_mag 2*F*T*d + 4*F*d
    data movement 0 (reshape, transpose, concat, pad, slice, take, gather)

``st.max_out_elems`` records the largest single op output, which lets tests
assert structurally that a code path never materialized an N x N matrix.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf


class NumericalFault(ArithmeticError):
    """An op produced NaN/Inf, or a positivity guard failed."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


# --------------------------------------------------------------------------
# tensors, tape, op accounting

class Tensor:
    """Row-major float64 array plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


class TapeNode:
    """One recorded op: inputs, output, and the closure for its backward rule."""

    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


_TAPE = None


class Tape:
    """Records ops in topological order; one backward pass, then cleared."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._prev = None

    def __enter__(self):
        global _TAPE
        self._prev = _TAPE
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every reachable ``.grad``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = gi.reshape(t.data.shape)
                t.grad = gi if t.grad is None else t.grad + gi
        self.nodes.clear()


class OpStats:
    """Multiply-accumulate counter; see module docstring for conventions."""

    def __init__(self):
        self.macs = 0
        self.ops = 0
        self.max_out_elems = 0
        self.by_kind: dict[str, int] = {}

    def _bump(self, kind, macs, out_elems):
        self.macs += macs
        self.ops += 1
        self.by_kind[kind] = self.by_kind.get(kind, 0) + 1
        if out_elems > self.max_out_elems:
            self.max_out_elems = out_elems


_STATS = None


@contextmanager
def count_ops():
    global _STATS
    prev = _STATS
    st = OpStats()
    _STATS = st
    try:
        yield st
    finally:
        _STATS = prev


def _record(kind, out_data, inputs, backward, macs):
    if not np.isfinite(out_data).all():
        raise NumericalFault(f"op '{kind}' produced non-finite values")
    if _STATS is not None:
        _STATS._bump(kind, int(macs), out_data.size)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req and _TAPE is not None:
        _TAPE.nodes.append(TapeNode(kind, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), backward, out.size)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), backward, out.size)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(over="ignore"):
        out = a.data * b.data  # non-finite results trip the fault check below

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), backward, out.size)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results trip the fault check below

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", out, (a, b), backward, out.size)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _record("neg", -a.data, (a,), backward, a.size)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0  # gradient 0 at exactly 0, by convention

    def backward(g):
        return (g * mask,)

    return _record("relu", out, (a,), backward, out.size)


def gelu(a):
    """Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * phi_cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (phi_cdf + x * pdf),)

    return _record("gelu", out, (a,), backward, 4 * out.size)


def softmax(a):
    """Row softmax over the last axis, computed with max-subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        return (gy - y * gy.sum(axis=-1, keepdims=True),)

    return _record("softmax", y, (a,), backward, 4 * y.size)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize each row (last axis) to mean 0 / variance 1, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = g * gamma.data
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        return dx, dgamma, dbeta

    return _record("layer_norm", out, (x, gamma, beta), backward, 8 * out.size)


# --------------------------------------------------------------------------
# contractions and reductions

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    n, k, m = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape)
        gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward, batch * n * k * m)


def sum_(x, axis=None, keepdims: bool = False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_reduced(g, x.data.shape, axis, keepdims),)

    return _record("sum", np.asarray(out), (x,), backward, x.size)


def mean(x, axis=None, keepdims: bool = False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(1, np.asarray(out).size)

    def backward(g):
        return (_expand_reduced(g, x.data.shape, axis, keepdims) / count,)

    return _record("mean", np.asarray(out), (x,), backward, x.size)


def _expand_reduced(g, full_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, full_shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(full_shape) for a in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, full_shape).copy()


def frobenius_norm(x, axis=None, keepdims: bool = False):
    """sqrt of the sum of squares, over the whole tensor or given axes."""
    x = as_tensor(x)
    sq = (x.data * x.data).sum(axis=axis, keepdims=keepdims)
    f = np.sqrt(sq)

    def backward(g):
        g_full = _expand_reduced(g, x.data.shape, axis, keepdims)
        f_full = _expand_reduced(f, x.data.shape, axis, keepdims)
        denom = np.where(f_full == 0.0, 1.0, f_full)
        return (g_full * x.data / denom,)

    return _record("frobenius_norm", np.asarray(f), (x,), backward, x.size)


# --------------------------------------------------------------------------
# shape and indexing ops (zero multiply-accumulate cost)

def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _record("reshape", out, (x,), backward, 0)


def transpose(x, ax1: int = -2, ax2: int = -1):
    x = as_tensor(x)
    out = np.swapaxes(x.data, ax1, ax2)

    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _record("transpose", out, (x,), backward, 0)


def concat(tensors, axis: int = -1):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), backward, 0)


def pad_axis(x, axis: int, before: int, after: int):
    """Zero-pad one axis."""
    x = as_tensor(x)
    widths = [(0, 0)] * x.ndim
    widths[axis % x.ndim] = (before, after)
    out = np.pad(x.data, widths)
    key = [slice(None)] * x.ndim
    n = x.data.shape[axis % x.ndim]
    key[axis % x.ndim] = slice(before, before + n)
    key = tuple(key)

    def backward(g):
        return (g[key],)

    return _record("pad", out, (x,), backward, 0)


def slice_(x, key):
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    out = x.data[key]

    def backward(g):
        z = np.zeros_like(x.data)
        z[key] = g
        return (z,)

    return _record("slice", out, (x,), backward, 0)


def take(x, idx, axis: int = 0):
    """Row gather along axis 0; idx is a plain integer array."""
    if axis != 0:
        raise ShapeError("take supports axis=0 only")
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def backward(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record("take", out, (x,), backward, 0)


def index_add(base, idx, update):
    """Return base with update rows added at idx (axis 0, scatter-add)."""
    base, update = as_tensor(base), as_tensor(update)
    idx = np.asarray(idx, dtype=np.intp)
    out = base.data.copy()
    np.add.at(out, idx, update.data)

    def backward(g):
        return g, g[idx]

    return _record("index_add", out, (base, update), backward, update.size)


def gather_last(x, idx):
    """out[s, k] = x[s, idx[s, k]] for 2-d x and integer idx."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.ndim != 2:
        raise ShapeError(f"gather_last needs 2-d operands, got {x.shape}, {idx.shape}")
    out = np.take_along_axis(x.data, idx, axis=-1)
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (rows, idx), g)
        return (z,)

    return _record("gather", out, (x,), backward, 0)


# --------------------------------------------------------------------------
# sparse propagation, spectra, convolution

def spmm(sp, x):
    """CSR matrix (constant) times dense tensor over the -2 axis."""
    x = as_tensor(x)
    n = sp.shape[1]
    if x.shape[-2] != n:
        raise ShapeError(f"spmm: operator is {sp.shape}, tensor rows {x.shape}")
    if x.ndim == 2:
        out = np.asarray(sp @ x.data)
    else:
        lead = x.shape[:-2]
        flat = np.moveaxis(x.data, -2, 0).reshape(n, -1)
        mixed = np.asarray(sp @ flat)
        out = np.moveaxis(mixed.reshape(sp.shape[0], *lead, x.shape[-1]), 0, -2)
    spT = sp.T.tocsr()

    def backward(g):
        if g.ndim == 2:
            return (np.asarray(spT @ g),)
        lead = g.shape[:-2]
        flat = np.moveaxis(g, -2, 0).reshape(sp.shape[0], -1)
        back = np.asarray(spT @ flat)
        return (np.moveaxis(back.reshape(n, *lead, g.shape[-1]), 0, -2),)

    return _record("spmm", out, (x,), backward, sp.nnz * (x.size // n))


_DFT_BASES: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _dft_basis(t_len: int):
    if t_len not in _DFT_BASES:
        f = np.arange(t_len // 2 + 1)
        t = np.arange(t_len)
        ang = 2.0 * math.pi * np.outer(f, t) / t_len
        _DFT_BASES[t_len] = (np.cos(ang), -np.sin(ang))
    return _DFT_BASES[t_len]


def rdft_mag(x):
    """Real-input DFT magnitudes over the -2 (time) axis.

    (..., T, d) -> (..., floor(T/2)+1, d). Direct O(T^2) evaluation; the
    series here are a couple dozen steps long. Gradient is 0 at exactly-zero
    bins (the magnitude has no derivative there).
    """
    x = as_tensor(x)
    t_len = x.shape[-2]
    if t_len < 2:
        raise ShapeError("rdft_mag needs at least 2 time steps")
    cos_b, sin_b = _dft_basis(t_len)
    re = np.matmul(cos_b, x.data)
    im = np.matmul(sin_b, x.data)
    out = np.hypot(re, im)
    n_bins = cos_b.shape[0]

    def backward(g):
        coef = g / np.where(out == 0.0, 1.0, out)
        return (np.matmul(cos_b.T, coef * re) + np.matmul(sin_b.T, coef * im),)

    macs = 2 * n_bins * t_len * (x.size // t_len) + 4 * n_bins * (x.size // t_len)
    return _record("rdft_mag", out, (x,), backward, macs)


def conv3x3(x, w, b):
    """3x3 same-padding conv over a channels-last grid, as a composite op.

    x: (..., R, C, cin); w: (3, 3, cin, cout); b: (cout,). Zero padding 1,
    stride 1. Expressed through pad/slice/concat/matmul so the backward pass
    comes from the primitives.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    rows, cols = x.shape[-3], x.shape[-2]
    cin, cout = w.shape[-2], w.shape[-1]
    xp = pad_axis(pad_axis(x, -3, 1, 1), -2, 1, 1)
    patches = concat(
        [xp[..., i:i + rows, j:j + cols, :] for i in (0, 1, 2) for j in (0, 1, 2)],
        axis=-1,
    )
    flat_w = reshape(w, (9 * cin, cout))
    return add(matmul(patches, flat_w), b)


def global_grad_norm(params) -> float:
    """L2 norm over all parameter gradients (missing grads count as zero)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)
