"""Dense float64 arithmetic shared by every model in the package.

Vectors and matrices are plain ``numpy`` arrays of dtype float64. Functions
never mutate their arguments.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a stream name.

    Used to fan a single run seed out into named streams (init, shuffle,
    noise, ...) so that adding a consumer never shifts another's draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    # stable branch: exp(x) never overflows for x < 0
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=DTYPE)
    if z.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=DTYPE)
    if z.size == 0:
        raise ValueError("log_softmax of an empty vector is undefined")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


@dataclass
class DenseLayer:
    """Affine map ``y = W x + b`` with ``W`` of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"output dimension {self.weights.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def _check_input(layer: DenseLayer, x: np.ndarray) -> None:
    if x.shape[-1] != layer.in_dim:
        raise ValueError(
            f"input dimension {x.shape[-1]} does not match layer input dimension {layer.in_dim}"
        )


def dense_forward(layer: DenseLayer, x):
    """Apply the layer to a vector or to a batch of row vectors."""
    x = np.asarray(x, dtype=DTYPE)
    _check_input(layer, x)
    return x @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x, grad_out):
    """Gradients of a scalar loss through ``dense_forward``.

    ``x`` and ``grad_out`` may be single vectors or batches (leading axes are
    summed over for the parameter gradients).

    Returns ``(grad_weights, grad_bias, grad_x)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    _check_input(layer, x)
    if grad_out.shape[-1] != layer.out_dim:
        raise ValueError(
            f"upstream gradient dimension {grad_out.shape[-1]} does not match "
            f"layer output dimension {layer.out_dim}"
        )
    if grad_out.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"batch shapes differ: {x.shape[:-1]} vs {grad_out.shape[:-1]}")
    x2 = x.reshape(-1, layer.in_dim)
    g2 = grad_out.reshape(-1, layer.out_dim)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = grad_out @ layer.weights
    return grad_w, grad_b, grad_x


def seeded_gaussian(rows, cols, mean=0.0, stddev=1.0, seed=0):
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if stddev == 0:
        return np.full((rows, cols), float(mean), dtype=DTYPE)
    return rng.normal(mean, stddev, size=(rows, cols)).astype(DTYPE)


def seeded_uniform(shape, bound, rng: np.random.Generator):
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
