"""Mini-batch SGD training loops with two interchangeable engines.

``compiled`` runs each epoch inside the Cython kernel in ``_kernels``;
``python`` builds a :class:`GradTape` per batch and differentiates the loss
node.  The compiled engine is chosen at import when it was built; set
``PERSFL_BACKEND=python`` (or call :func:`set_backend`) to force the fallback.
"""
from __future__ import annotations

import logging
import os

import numpy as np

from ..errors import ParameterError
from . import functional as F
from .model import ModelParams, forward_tensor, sgd_step, watch
from .tensor import GradTape

log = logging.getLogger(__name__)

try:
    from . import _kernels
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None

SOFT_MODES = ("kl", "gd", "kl_reverse")


def available_backends():
    return ("compiled", "python") if _kernels is not None else ("python",)


def _initial_backend():
    wanted = os.environ.get("PERSFL_BACKEND", "auto").lower()
    if wanted == "python":
        return "python"
    if wanted == "compiled" and _kernels is None:
        log.warning("PERSFL_BACKEND=compiled but the extension is not built; using python")
    return "compiled" if _kernels is not None else "python"


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Select the training engine; returns the previous one."""
    global _backend
    if name not in available_backends():
        raise ParameterError(f"backend {name!r} unavailable; have {available_backends()}")
    prev, _backend = _backend, name
    return prev


class use_backend:
    """Context manager that temporarily switches the training engine."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self.prev = set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self.prev)
        return False


def objective_loss(logits, labels, soft_targets=None, hard_weight=1.0, soft_weight=0.0,
                   T=1.0, soft_mode="kl"):
    """``hard_weight * CE + soft_weight * soft`` on student logits.

    ``soft_mode`` picks the soft term: ``kl`` is KL(targets || student),
    ``gd`` the cross-entropy of the student against the targets and
    ``kl_reverse`` is KL(student || targets).
    """
    hard = F.cross_entropy(F.softmax_t(logits, 1.0), labels)
    if soft_targets is None:
        return hard if hard_weight == 1.0 else hard * hard_weight
    q = F.softmax_t(logits, T)
    if soft_mode == "kl":
        soft = F.kl_div(soft_targets, q)
    elif soft_mode == "gd":
        soft = F.soft_cross_entropy(q, soft_targets)
    elif soft_mode == "kl_reverse":
        soft = F.kl_div(q, soft_targets)
    else:
        raise ParameterError(f"unknown soft loss mode {soft_mode!r}")
    return hard * hard_weight + soft * soft_weight


def batches(order, batch_size):
    """Consecutive slices of ``order``; the short final batch is kept."""
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _python_epoch(params, X, y, soft, order, batch_size, eta, hard_w, soft_w, T, soft_mode):
    for idx in batches(order, batch_size):
        with GradTape() as tape:
            layers = watch(tape, params)
            logits = forward_tensor(layers, X[idx])
            loss = objective_loss(logits, y[idx], None if soft is None else soft[idx],
                                  hard_w, soft_w, T, soft_mode)
            grads = tape.gradient(loss, [t for pair in layers for t in pair])
        params = sgd_step(params, grads, eta)
    return params


def train_epochs(params, X, y, *, eta, batch_size, epochs, rng, soft_targets=None,
                 hard_weight=1.0, soft_weight=0.0, T=1.0, soft_mode="kl", backend=None):
    """Run ``epochs`` passes of mini-batch SGD and return new parameters.

    Each epoch draws one permutation of the rows from ``rng``.  ``params`` is
    never modified.  ``soft_targets`` (rows aligned with ``X``) switch on the
    distillation term.
    """
    if soft_mode not in SOFT_MODES:
        raise ParameterError(f"unknown soft loss mode {soft_mode!r}")
    if epochs < 0 or eta < 0 or batch_size < 1:
        raise ParameterError("epochs and eta must be >= 0 and batch_size >= 1")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if soft_targets is not None:
        soft_targets = np.ascontiguousarray(soft_targets, dtype=np.float64)
    n = X.shape[0]
    engine = backend or _backend
    # The kernel implements the two soft modes whose gradients coincide.
    if engine == "compiled" and soft_mode == "kl_reverse" and soft_targets is not None:
        engine = "python"
    if engine == "compiled" and _kernels is None:
        engine = "python"
    if engine == "compiled":
        work = params.copy()
        ws, bs = list(work.weights), list(work.biases)
        for _ in range(epochs):
            order = rng.permutation(n).astype(np.int64)
            _kernels.sgd_epoch(ws, bs, X, y, soft_targets, order, int(batch_size),
                               float(eta), float(hard_weight), float(soft_weight), float(T))
        return ModelParams(tuple(ws), tuple(bs))
    for _ in range(epochs):
        order = rng.permutation(n)
        params = _python_epoch(params, X, y, soft_targets, order, batch_size, eta,
                               hard_weight, soft_weight, T, soft_mode)
    return params
