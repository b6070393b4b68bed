"""Temperature softmax and the two losses used for training and distillation.

Every function accepts either plain arrays or :class:`Tensor` nodes.  Arrays
give arrays back (no tape involvement); tensors give tensors, recorded on the
active tape when there is one.
"""
import numpy as np

from ..errors import DimensionError, ParameterError
from . import tensor as tt
from .tensor import LOG_CLAMP, Tensor


def _unwrap(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _wrap_result(out, *inputs):
    if any(isinstance(i, Tensor) for i in inputs):
        return out
    return out.data if out.data.ndim else float(out.data)


def softmax_t(logits, T=1.0):
    """Row-wise softmax of ``logits / T``."""
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    z = _unwrap(logits)
    if z.ndim != 2:
        raise DimensionError(f"logits must be 2-D (batch x classes), got shape {z.shape}")
    return _wrap_result(tt.softmax(logits, float(T)), logits)


def _check_labels(labels, n_rows, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise IndexError(f"label {bad} out of range for {n_classes} classes")
    return labels.astype(np.intp, copy=False)


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class.

    Probabilities below ``1e-12`` are clamped before the log.
    """
    p = _unwrap(probs)
    if p.ndim != 2:
        raise DimensionError(f"probs must be 2-D, got shape {p.shape}")
    labels = _check_labels(labels, p.shape[0], p.shape[1])
    return _wrap_result(tt.nll_clamped(probs, labels), probs)


def kl_div(p, q):
    """Batch-mean ``KL(p || q)``; ``p`` is the reference distribution."""
    pa, qa = _unwrap(p), _unwrap(q)
    if pa.shape != qa.shape or pa.ndim != 2:
        raise DimensionError(f"kl_div shapes differ: {pa.shape} vs {qa.shape}")
    return _wrap_result(tt.kl_rows(p, q), p, q)


def soft_cross_entropy(q, target):
    """Batch-mean cross-entropy of prediction ``q`` against soft targets."""
    qa, ta = _unwrap(q), _unwrap(target)
    if qa.shape != ta.shape or qa.ndim != 2:
        raise DimensionError(f"soft_cross_entropy shapes differ: {qa.shape} vs {ta.shape}")
    return _wrap_result(tt.soft_cross_entropy_rows(q, target), q, target)


__all__ = ["LOG_CLAMP", "softmax_t", "cross_entropy", "kl_div", "soft_cross_entropy"]
