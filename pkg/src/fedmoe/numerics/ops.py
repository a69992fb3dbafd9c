"""Pure forward operations on tensors: layers, activations, loss.

All functions are pure; identical inputs give bit-identical outputs.
Gradients live in :mod:`fedmoe.numerics.graph`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DimensionError
from . import kernels
from .tensor import Tensor

ACTIVATION_KINDS = ("relu", "sigmoid", "max_pool2x2", "softmax")


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine layer: out[b, o] = sum_i x[b, i] * W[i, o] + bias[o]."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not conform with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    return Tensor._wrap(kernels.dense(x.data, weights.data, bias.data))


def conv2d_forward(x: Tensor, kernels_t: Tensor, bias: Tensor) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation plus a per-filter bias."""
    if x.ndim != 4 or kernels_t.ndim != 4:
        raise DimensionError(f"conv2d: need 4-d input and kernels, got {x.shape} and {kernels_t.shape}")
    if x.shape[1] != kernels_t.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match kernels {kernels_t.shape}")
    if kernels_t.shape[2] > x.shape[2] or kernels_t.shape[3] > x.shape[3]:
        raise DimensionError(f"conv2d: kernel {kernels_t.shape} larger than input {x.shape}")
    if bias.shape != (kernels_t.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernels {kernels_t.shape}")
    return Tensor._wrap(kernels.conv2d(x.data, kernels_t.data, bias.data))


def relu(x: Tensor) -> Tensor:
    return Tensor._wrap(kernels.relu(x.data))


def sigmoid(x: Tensor) -> Tensor:
    return Tensor._wrap(kernels.sigmoid(x.data))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    return Tensor._wrap(kernels.softmax(x.data))


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling over the trailing two (spatial) axes."""
    if x.ndim < 3:
        raise DimensionError(f"max_pool2x2: need at least (C, H, W), got {x.shape}")
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise DimensionError(f"max_pool2x2: spatial dims must be even, got {x.shape}")
    pooled, _ = kernels.max_pool2x2(x.data)
    return Tensor._wrap(pooled)


def activations(x: Tensor, kind: str) -> Tensor:
    """Dispatch by activation kind: relu | sigmoid | max_pool2x2 | softmax."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "max_pool2x2":
        return max_pool2x2(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation kind {kind!r}, expected one of {ACTIVATION_KINDS}")


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (batch, classes), got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: {logits.shape[0]} logit rows but {y.shape} labels")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: labels must lie in [0, {logits.shape[1]}), got range [{y.min()}, {y.max()}]")
    return kernels.cross_entropy(logits.data, y)
