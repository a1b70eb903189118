"""Dense row-major tensors with a small reverse-mode autodiff tape.

Two float modes: "f32" (training / inference default) and "f64" (used by the
gradient-check tests, where central finite differences need the headroom).
All reductions run in a fixed order, so identical inputs give bitwise
identical outputs.

The graph is define-by-run: every op closes over its inputs and records a
backward closure; `backward(loss, params)` topologically sorts the tape and
returns a gradient map for the requested leaves.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, NumericFaultError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}

# When enabled, every op output is checked for NaN/Inf. Off by default
# (it costs a scan per op); the test suite turns it on.
DEBUG_CHECKS = os.environ.get("MACWEIGHTS_DEBUG_CHECKS", "") == "1"


def np_dtype(dtype: str):
    try:
        return _DTYPES[dtype]
    except KeyError:
        raise ConfigError(f"unknown dtype {dtype!r}, expected one of {sorted(_DTYPES)}")


class Tensor:
    __slots__ = ("data", "dtype", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, dtype="f32", requires_grad=False):
        self.data = np.asarray(data, dtype=np_dtype(dtype))
        self.dtype = dtype
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.dtype}, rg={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), _as_tensor(-1.0, self.dtype)))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def constant(data, dtype="f32"):
    """A graph leaf that never receives gradient (masks, rope tables, ...)."""
    return Tensor(data, dtype=dtype, requires_grad=False)


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.dtype}")
    return dt


def _make(out_data, dtype, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.dtype = dtype
    out.grad = None
    track = any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericFaultError("non-finite value produced by a tensor op")
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, (gdim, sdim) in enumerate(zip(grad.shape, shape)):
        if sdim == 1 and gdim != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    dt = _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out, dt, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    dt = _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, dt, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    dt = _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out, dt, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = a.data.T

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(out, a.dtype, (a,), backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        if a.requires_grad:
            _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(out, a.dtype, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out)

    return _make(out, a.dtype, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(out, a.dtype, (a,), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        if a.requires_grad:
            _accum(a, -g * out * out)

    return _make(out, a.dtype, (a,), backward)


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            _accum(a, (g - dot) * out)

    return _make(out, a.dtype, (a,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if eps <= 0:
        raise ConfigError(f"rmsnorm eps must be > 0, got {eps}")
    dt = _check_same_dtype(x, gain)
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + np_dtype(dt)(eps))
    out = x.data * inv * gain.data

    def backward(g):
        if x.requires_grad:
            dot = (g * gain.data * x.data).sum(axis=-1, keepdims=True)
            _accum(x, inv * gain.data * g - x.data * (inv**3 / d) * dot)
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * x.data * inv, gain.shape))

    return _make(out, dt, (x, gain), backward)


def layernorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    dt = _check_same_dtype(x, gain)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np_dtype(dt)(eps))
    xhat = xc * inv
    out = xhat * gain.data

    def backward(g):
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))

    return _make(out, dt, (x, gain), backward)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row gather (embedding lookup). Gradient scatters back with += per row."""
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _make(out, table.dtype, (table,), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = a.data[..., lo:hi]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[..., lo:hi] = g
            _accum(a, ga)

    return _make(out, a.dtype, (a,), backward)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    dt = _check_same_dtype(*parts)
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, g[..., off : off + w])
            off += w

    return _make(out, dt, tuple(parts), backward)


def rotate_half(a: Tensor) -> Tensor:
    """[x1, x2] -> [-x2, x1] on the last dimension (rotary-embedding helper)."""
    d = a.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rotate_half needs an even last dim, got {d}")
    h = d // 2
    out = np.concatenate([-a.data[..., h:], a.data[..., :h]], axis=-1)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.concatenate([g[..., h:], -g[..., :h]], axis=-1))

    return _make(out, a.dtype, (a,), backward)


def sum_lastdim(a: Tensor, keepdims: bool = True) -> Tensor:
    out = a.data.sum(axis=-1, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, -1)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out, a.dtype, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out, a.dtype, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / n, a.shape).copy())

    return _make(out, a.dtype, (a,), backward)


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean next-token NLL over N rows; logits [N, V], targets N ints."""
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean expects [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    if tgt.shape != (n,):
        raise ShapeError(f"targets shape {tgt.shape} does not match {n} logit rows")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = np.asarray(-logp[np.arange(n), tgt].mean(), dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(logp)
            soft[np.arange(n), tgt] -= 1.0
            _accum(logits, soft * (g / n))

    return _make(out, logits.dtype, (logits,), backward)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo(loss: Tensor):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None):
    """Run reverse-mode AD from a scalar loss.

    Leaves accumulate into `.grad`; if `params` (name -> leaf Tensor) is
    given, returns {name: gradient array} with zeros for unreached leaves.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return None
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
