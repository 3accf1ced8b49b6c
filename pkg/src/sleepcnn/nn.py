"""Small numpy layer engine with hand-written backward passes.

All arrays are float64. Layer functions operate on batches: feature maps
are ``[batch, channels, length]`` and dense inputs ``[batch, features]``.
An unbatched ``[channels, length]`` map may be passed to the ``ConvLayer``
helpers; it is promoted to a batch of one and demoted on return.

Randomness comes from :class:`numpy.random.Generator` backed by PCG64,
seeded explicitly by callers (see :func:`make_rng`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    category = "ShapeMismatch"


class DistributionInvalid(ValueError):
    category = "DistributionInvalid"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# convolution


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid, stride-1 cross-correlation.

    ``y[n, o, t] = b[o] + sum_{c, j} x[n, c, t + j] * w[o, c, j]``
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-d input and kernel, got {x.shape} and {w.shape}")
    n, c_in, length = x.shape
    c_out, wc, k = w.shape
    if wc != c_in:
        raise ShapeMismatch(f"input has {c_in} channels, kernel expects {wc}")
    if length < k:
        raise ShapeMismatch(f"input length {length} shorter than kernel {k}")
    if b.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {c_out} filters")
    cols = sliding_window_view(x, k, axis=2)  # n, c_in, t, k
    y = np.tensordot(cols, w, axes=([1, 3], [1, 2]))  # n, t, c_out
    y = y.transpose(0, 2, 1) + b[None, :, None]
    return np.ascontiguousarray(y)


def conv1d_grad(x: np.ndarray, w: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv1d` given the upstream gradient ``dy``."""
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    out_len = length - k + 1
    if dy.shape != (n, c_out, out_len):
        raise ShapeMismatch(f"upstream gradient {dy.shape}, expected {(n, c_out, out_len)}")
    cols = sliding_window_view(x, k, axis=2)
    dw = np.tensordot(dy, cols, axes=([0, 2], [0, 2]))  # c_out, c_in, k
    db = dy.sum(axis=(0, 2))
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # n, t, c_in, k
    dcols = dcols.transpose(0, 2, 3, 1)  # n, c_in, k, t
    dx = np.zeros_like(x)
    for j in range(k):
        dx[:, :, j : j + out_len] += dcols[:, :, j, :]
    return dx, dw, db


@dataclass
class ConvLayer:
    kernel: np.ndarray  # out_channels x in_channels x kernel_len
    bias: np.ndarray
    activation: Literal["relu", "linear"] = "relu"

    def __post_init__(self):
        if self.kernel.ndim != 3 or self.kernel.shape[2] < 1:
            raise ShapeMismatch(f"bad kernel shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeMismatch(f"bias shape {self.bias.shape} for kernel {self.kernel.shape}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    return x, False


def conv1d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    xb, single = _batched(x)
    y = conv1d(xb, layer.kernel, layer.bias)
    if layer.activation == "relu":
        y = relu(y)
    return y[0] if single else y


def conv1d_backward(x: np.ndarray, layer: ConvLayer, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of ``conv1d_forward`` (activation included)."""
    xb, single = _batched(x)
    dyb = np.asarray(dy, dtype=np.float64)
    if single:
        dyb = dyb[None]
    z = conv1d(xb, layer.kernel, layer.bias)
    if dyb.shape != z.shape:
        raise ShapeMismatch(f"upstream gradient {dyb.shape}, expected {z.shape}")
    if layer.activation == "relu":
        dyb = relu_grad(z, dyb)
    dx, dw, db = conv1d_grad(xb, layer.kernel, dyb)
    return (dx[0] if single else dx), dw, db


# --------------------------------------------------------------------------
# pooling, activations, dense, dropout


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping width-2 max pooling along the last axis.

    A trailing odd element is dropped. Returns the pooled map and the
    within-window argmax (0 or 1; ties resolve to 0, the earlier element).
    """
    length = x.shape[-1]
    if length < 2:
        raise ShapeMismatch(f"cannot pool length {length}")
    m = length // 2
    pairs = x[..., : 2 * m].reshape(*x.shape[:-1], m, 2)
    arg = (pairs[..., 1] > pairs[..., 0]).astype(np.intp)
    y = np.where(arg == 1, pairs[..., 1], pairs[..., 0])
    return y, arg


def maxpool2_backward(dy: np.ndarray, arg: np.ndarray, length: int) -> np.ndarray:
    m = length // 2
    if dy.shape[-1] != m or arg.shape != dy.shape:
        raise ShapeMismatch(f"pool gradient {dy.shape} / argmax {arg.shape} for length {length}")
    dx = np.zeros((*dy.shape[:-1], length))
    pairs = np.zeros((*dy.shape, 2))
    pairs[..., 0] = np.where(arg == 0, dy, 0.0)
    pairs[..., 1] = np.where(arg == 1, dy, 0.0)
    dx[..., : 2 * m] = pairs.reshape(*dy.shape[:-1], 2 * m)
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through ReLU given its pre-activation ``z``; zero at the kink."""
    return np.where(z > 0.0, dy, 0.0)


relu_forward = relu
relu_backward = relu_grad


@dataclass
class DenseLayer:
    weights: np.ndarray  # in_features x out_features
    bias: np.ndarray


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[-1] != layer.weights.shape[0]:
        raise ShapeMismatch(f"dense input width {x.shape[-1]}, expected {layer.weights.shape[0]}")
    return x @ layer.weights + layer.bias


def dense_backward(x: np.ndarray, layer: DenseLayer, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    dx = dy2 @ layer.weights.T
    return dx.reshape(x.shape), x2.T @ dy2, dy2.sum(axis=0)


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the scaled keep mask (None at inference)."""
    if not training or rate == 0.0:
        return x, None
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return dy if mask is None else dy * mask


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Categorical cross-entropy ``-sum_i p_i log q_i`` per row.

    ``q`` must be a strictly positive distribution (rows summing to 1
    within 1e-9).
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(np.abs(q.sum(axis=-1) - 1.0) > 1e-9):
        raise DistributionInvalid("predicted distribution is not strictly positive and normalized")
    return -np.sum(p * np.log(q), axis=-1)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row loss, probabilities, and loss gradient w.r.t. the logits (``q - p``).

    ``targets`` are integer class indices.
    """
    q = softmax(logits)
    p = np.zeros_like(q)
    p[np.arange(len(targets)), targets] = 1.0
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_q = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -np.sum(p * log_q, axis=-1)
    return loss, q, q - p


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")

    @classmethod
    def for_params(cls, params: list[np.ndarray], **kwargs) -> AdamState:
        state = cls(**kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape}, grad {g.shape}, moment {m.shape}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state
