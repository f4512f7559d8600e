"""Training objectives for the tool head and the phase classifiers.

Both losses take pre-activation logits and return ``(loss, grad_logits)``;
the activation (sigmoid or softmax) is folded into the loss.
"""

from __future__ import annotations

import numpy as np

from .numerics import DTYPE, log_softmax, sigmoid, softmax

LOG_EPS = 1e-12


def _as_2d(a, name):
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 1-D or 2-D array, got shape {a.shape}")
    return a


def sigmoid_ce(labels, logits):
    """Multi-label sigmoid cross-entropy averaged over frames and classes.

    ``labels`` is an (N, C) binary matrix, ``logits`` the matching
    pre-sigmoid scores. The gradient is ``(sigmoid(z) - p) / (N * C)``.
    """
    p = _as_2d(labels, "labels")
    z = _as_2d(logits, "logits")
    if p.shape != z.shape:
        raise ValueError(f"labels shape {p.shape} != logits shape {z.shape}")
    if not np.all((p == 0) | (p == 1)):
        raise ValueError("multi-label targets must be binary (0 or 1)")
    n, c = p.shape
    prob = np.clip(sigmoid(z), LOG_EPS, 1.0 - LOG_EPS)
    loss = -np.sum(p * np.log(prob) + (1.0 - p) * np.log1p(-prob)) / (n * c)
    grad = (sigmoid(z) - p) / (n * c)
    return float(max(loss, 0.0)), grad


def softmax_ce(labels, logits):
    """Softmax cross-entropy averaged over rows.

    ``labels`` must be one-hot rows. The gradient is ``(softmax(z) - p) / N``.
    """
    p = _as_2d(labels, "labels")
    z = _as_2d(logits, "logits")
    if p.shape != z.shape:
        raise ValueError(f"labels shape {p.shape} != logits shape {z.shape}")
    if not (np.all((p == 0) | (p == 1)) and np.all(p.sum(axis=1) == 1)):
        raise ValueError("every label row must be one-hot")
    n = p.shape[0]
    logp = log_softmax(z, axis=1)
    loss = -np.sum(p * logp) / n
    grad = (softmax(z, axis=1) - p) / n
    return float(max(loss, 0.0)), grad


def one_hot(ids, n_classes):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    out = np.zeros(ids.shape + (n_classes,), dtype=DTYPE)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out
