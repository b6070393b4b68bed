"""Dense MLP parameters, forward passes and the plain SGD update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, ParameterError
from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class Hyper:
    eta: float = 0.05
    batch_size: int = 32
    local_epochs: int = 2

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError(f"learning rate must be positive, got {self.eta}")
        if int(self.batch_size) < 1 or int(self.local_epochs) < 1:
            raise ParameterError("batch_size and local_epochs must be positive integers")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights ``(out, in)`` and biases ``(out,)`` of a ReLU MLP.

    Hidden layers use ReLU, the last layer emits raw logits.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        ws = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.ascontiguousarray(b, dtype=np.float64) for b in self.biases)
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i}: input width {w.shape[1]} != previous output {ws[i - 1].shape[0]}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def sizes(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def activations(self):
        return ("relu",) * (self.num_layers - 1) + ("identity",)

    def arrays(self):
        """Flat list ``[w0, b0, w1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def copy(self):
        return ModelParams(tuple(w.copy() for w in self.weights),
                           tuple(b.copy() for b in self.biases))

    def same_shape(self, other):
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]

    def equals(self, other):
        """Bit-exact equality, including the shape layout."""
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays(), other.arrays()))


def init_params(sizes, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for layer widths ``sizes``."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ParameterError(f"need at least input and output widths, got {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParams(tuple(weights), tuple(biases))


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"layer 0: input must be 2-D (batch x features), got shape {x.shape}")
    if x.shape[1] != params.weights[0].shape[1]:
        raise DimensionError(
            f"layer 0: input has {x.shape[1]} columns, layer expects {params.weights[0].shape[1]}")
    return x


def forward(params, x):
    """Raw logits of ``params`` on rows of ``x``."""
    h = _check_input(params, x)
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.where(h > 0, h, 0.0)
    return h


def forward_tensor(layers, x):
    """Forward pass through watched ``(weight, bias)`` tensors."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[1] != layers[0][0].shape[1]:
        raise DimensionError(
            f"layer 0: input has {h.shape[1]} columns, layer expects {layers[0][0].shape[1]}")
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = tt.linear(h, w, b)
        if i < last:
            h = tt.relu(h)
    return h


def watch(tape, params):
    """Register every parameter array on ``tape``; returns ``[(w, b), ...]``."""
    return [(tape.watch(w.copy()), tape.watch(b.copy()))
            for w, b in zip(params.weights, params.biases)]


def sgd_step(params, grads, eta):
    """``w - eta * g`` for every array; ``grads`` mirrors ``params.arrays()``."""
    if eta < 0:
        raise ParameterError(f"learning rate must be non-negative, got {eta}")
    arrays = params.arrays()
    grads = list(grads.arrays() if isinstance(grads, ModelParams) else grads)
    if len(grads) != len(arrays):
        raise DimensionError(f"expected {len(arrays)} gradient arrays, got {len(grads)}")
    new = []
    for i, (w, g) in enumerate(zip(arrays, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != w.shape:
            raise DimensionError(f"layer {i // 2}: gradient {g.shape} != parameter {w.shape}")
        new.append(w - eta * g)
    return ModelParams.from_arrays(new)
