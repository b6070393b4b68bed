"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`GradTape` is active are appended to it;
``tape.gradient`` replays the records backwards.  Outside a tape the same
operations just compute values, so model code runs unchanged in either mode.
"""
from __future__ import annotations

import contextvars

import numpy as np

from ..errors import ContractError, DimensionError

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("persfl_tape", default=None)

# Probabilities are clamped here before any log.
LOG_CLAMP = 1e-12


class Tensor:
    """A float64 array plus the bookkeeping needed for gradients."""

    __slots__ = ("data", "_id")
    _counter = 0

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        Tensor._counter += 1
        self._id = Tensor._counter

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # Arithmetic sugar. Constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return div_const(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Records differentiable operations for one backward pass.

    Usage::

        with GradTape() as tape:
            w = tape.watch(weights)
            loss = (w * w).sum()
        (gw,) = tape.gradient(loss, [w])
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.watched: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, value):
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        self.watched[t._id] = t
        return t

    def _record(self, out, inputs, vjp):
        self.records.append(_Record(out, inputs, vjp))

    def gradient(self, loss, sources):
        """Return d(loss)/d(source) for each source, zeros where unconnected."""
        return backward(self, loss, sources)


def backward(tape, loss, sources):
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss node, got {shape}")
    grads = {loss._id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out._id, None)
        if g is None:
            continue
        contributions = rec.vjp(g)
        for inp, contrib in zip(rec.inputs, contributions):
            if contrib is None or not isinstance(inp, Tensor):
                continue
            prev = grads.get(inp._id)
            grads[inp._id] = contrib if prev is None else prev + contrib
    return [grads.get(s._id, np.zeros_like(s.data)) for s in sources]


def _tracking(*inputs):
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return None
    if any(isinstance(i, Tensor) for i in inputs):
        return tape
    return None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _op(value, inputs, vjp):
    out = Tensor(value)
    tape = _tracking(*inputs)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    a = _as_tensor(a)
    return _op(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def div_const(a, c):
    return _op(a.data / c, (a,), lambda g: (g / c,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _op(a.data @ b.data, (a, b),
               lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return _op(a.data.T, (a,), lambda g: (g.T,))


def linear(x, weight, bias):
    """``x @ weight.T + bias`` as one recorded step."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    value = x.data @ weight.data.T + bias.data

    def vjp(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _op(value, (x, weight, bias), vjp)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum(a):  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    return _op(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    a = _as_tensor(a)
    shape, n = a.shape, a.data.size
    return _op(np.sum(a.data) / n, (a,), lambda g: (np.full(shape, g / n),))


def softmax_rows(z, temperature=1.0):
    """Row softmax of ``z / temperature`` with max subtraction."""
    scaled = z / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z, temperature=1.0):
    z = _as_tensor(z)
    p = softmax_rows(z.data, temperature)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return _op(p, (z,), vjp)


def nll_clamped(probs, labels):
    """Mean over rows of ``-log(max(p[label], LOG_CLAMP))``."""
    probs = _as_tensor(probs)
    rows = np.arange(probs.shape[0])
    picked = probs.data[rows, labels]
    active = picked >= LOG_CLAMP
    n = probs.shape[0]
    value = -np.sum(np.log(np.maximum(picked, LOG_CLAMP))) / n

    def vjp(g):
        grad = np.zeros_like(probs.data)
        grad[rows, labels] = np.where(active, -g / (n * np.where(active, picked, 1.0)), 0.0)
        return (grad,)

    return _op(value, (probs,), vjp)


def kl_rows(p, q):
    """Mean over rows of ``sum_c p log(p / max(q, LOG_CLAMP))``; p=0 terms are 0."""
    p, q = _as_tensor(p), _as_tensor(q)
    n = p.shape[0]
    pos = p.data > 0
    safe_p = np.where(pos, p.data, 1.0)
    qc = np.maximum(q.data, LOG_CLAMP)
    active = q.data >= LOG_CLAMP
    log_ratio = np.log(safe_p) - np.log(qc)
    value = np.sum(np.where(pos, p.data * log_ratio, 0.0)) / n

    def vjp(g):
        gp = np.where(pos, (log_ratio + 1.0) * (g / n), 0.0)
        gq = np.where(active, -p.data / qc * (g / n), 0.0)
        return gp, gq

    return _op(value, (p, q), vjp)


def soft_cross_entropy_rows(q, target):
    """Mean over rows of ``-sum_c target * log(max(q, LOG_CLAMP))``."""
    q, target = _as_tensor(q), _as_tensor(target)
    n = q.shape[0]
    qc = np.maximum(q.data, LOG_CLAMP)
    active = q.data >= LOG_CLAMP
    logq = np.log(qc)
    value = -np.sum(target.data * logq) / n

    def vjp(g):
        gq = np.where(active, -target.data / qc * (g / n), 0.0)
        return gq, -logq * (g / n)

    return _op(value, (q, target), vjp)
