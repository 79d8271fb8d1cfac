"""Depthwise causal key convolution with SiLU and residual.

Each channel is filtered independently over a short causal window (zero left
padding), passed through SiLU, and added back to the raw key:

    k'[t] = k[t] + silu(sum_l W[l] * k[t - l])

Applied to keys before both routing centroids and the attention K. The
backward pass exists to prove the path is differentiable end to end, not to
drive a training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError


@dataclass
class ConvKernel:
    """Per-lag, per-channel weights, shape (width, d)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ShapeError("kernel weights must be 2-D (width x d)")
        if w.shape[0] < 1:
            raise ShapeError("kernel width must be >= 1")
        if not np.all(np.isfinite(w)):
            raise ShapeError("kernel weights must be finite")
        self.weights = w

    @property
    def width(self) -> int:
        return self.weights.shape[0]


def random_kernel(width: int, d: int, seed: int, dtype=np.float64) -> ConvKernel:
    """Fan-in scaled init: uniform(-1/sqrt(width), 1/sqrt(width)), seeded."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(width)
    return ConvKernel(rng.uniform(-bound, bound, size=(width, d)).astype(dtype))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_preact(K, W):
    """a[t] = sum_l W[l] * K[t - l], zero-padded on the left."""
    N = K.shape[0]
    a = np.zeros_like(K)
    for lag in range(W.shape[0]):
        if lag >= N:
            break
        a[lag:] += W[lag] * K[: N - lag]
    return a


def key_conv_forward(K, kernel: ConvKernel) -> np.ndarray:
    """Transformed keys k + silu(conv(k)); position t sees only inputs <= t."""
    if K.ndim != 2:
        raise ShapeError("K must be 2-D (N x d)")
    W = np.asarray(kernel.weights, dtype=K.dtype)
    if W.shape[1] != K.shape[1]:
        raise ShapeError(f"kernel channels {W.shape[1]} do not match d={K.shape[1]}")
    a = _conv_preact(K, W)
    return K + a * _sigmoid(a)


def key_conv_backward(K, kernel: ConvKernel, dK_out):
    """Exact gradients of key_conv_forward.

    Returns (dK, dW). dK carries the residual identity path plus the
    convolution path through silu'(a) = sigmoid(a) * (1 + a * (1 - sigmoid(a))).
    """
    if dK_out.shape != K.shape:
        raise ShapeError(f"gradient shape {dK_out.shape} does not match K {K.shape}")
    W = np.asarray(kernel.weights, dtype=K.dtype)
    if W.shape[1] != K.shape[1]:
        raise ShapeError(f"kernel channels {W.shape[1]} do not match d={K.shape[1]}")
    N = K.shape[0]
    width = W.shape[0]
    a = _conv_preact(K, W)
    sig = _sigmoid(a)
    g = dK_out * (sig * (1.0 + a * (1.0 - sig)))  # gradient at the pre-activation
    dK = dK_out.copy()
    dW = np.zeros_like(W)
    for lag in range(width):
        if lag >= N:
            break
        dW[lag] = (g[lag:] * K[: N - lag]).sum(axis=0)
        dK[: N - lag] += W[lag] * g[lag:]
    return dK, dW
