"""Numeric kernels with explicit forward/backward passes.

Arrays are float64 throughout. Convolution inputs are ``(channels, width)``
or batched ``(batch, channels, width)``; convolution is the valid
(no padding) cross-correlation used by deep learning frameworks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def conv_output_width(width: int, kernel: int, stride: int = 1) -> int:
    """Output width of a valid convolution, ``w - k + s``.

    For ``s = 1`` this coincides with the usual ``(w - k) // s + 1``; the
    kernels below only implement stride 1.
    """
    return width - kernel + stride


@dataclass
class FilterBank:
    """Weights ``(out_channels, in_channels, kernel)`` and bias ``(out_channels,)``."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError(f"filter weights must be 3-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters"
            )
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> FilterBank:
        return FilterBank(self.weights.copy(), self.bias.copy(), self.stride)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (channels, width) or (batch, channels, width), got {x.shape}")
    return x, False


def _check_conv(x: np.ndarray, f: FilterBank) -> None:
    if f.stride != 1:
        raise ValueError("only stride 1 is supported")
    if x.shape[1] != f.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, filter bank expects {f.in_channels}")
    if x.shape[2] < f.kernel_size:
        raise ValueError(f"input width {x.shape[2]} is shorter than kernel {f.kernel_size}")


def conv1d_forward(x: np.ndarray, f: FilterBank) -> np.ndarray:
    xb, single = _as_batch(x)
    _check_conv(xb, f)
    # patches: (B, C_in, W_out, k)
    patches = sliding_window_view(xb, f.kernel_size, axis=2)
    y = np.einsum("bcwk,ock->bow", patches, f.weights, optimize=True)
    y += f.bias[None, :, None]
    return y[0] if single else y


def conv1d_backward(
    x: np.ndarray, f: FilterBank, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. input, weights and bias."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    _check_conv(xb, f)
    k = f.kernel_size
    w_out = conv_output_width(xb.shape[2], k)
    expected = (xb.shape[0], f.out_channels, w_out)
    if gb.shape != expected:
        raise ValueError(f"grad_out shape {gb.shape} does not match forward output {expected}")

    patches = sliding_window_view(xb, k, axis=2)
    grad_w = np.einsum("bow,bcwk->ock", gb, patches, optimize=True)
    grad_b = gb.sum(axis=(0, 2))

    grad_x = None
    if need_input_grad:
        # full correlation of grad_out with the flipped kernel
        padded = np.pad(gb, ((0, 0), (0, 0), (k - 1, k - 1)))
        gpatches = sliding_window_view(padded, k, axis=2)
        grad_x = np.einsum("bowk,ock->bcw", gpatches, f.weights[:, :, ::-1], optimize=True)
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``x @ W.T + b`` for ``W`` of shape ``(out, in)``."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ValueError(f"inconsistent dense parameters: W {W.shape}, b {b.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"input dimension {x.shape[-1]} does not match W columns {W.shape[1]}")
    return x @ W.T + b


def dense_backward(
    x: np.ndarray, W: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[-1] != W.shape[0] or x.shape[-1] != W.shape[1]:
        raise ValueError("dense backward shapes do not match forward")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    grad_W = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = grad_out @ W if need_input_grad else None
    return grad_x, grad_W, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(np.asarray(x) > 0.0, grad, 0.0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient ``2 (pred - target) / n``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.dot(diff.ravel(), diff.ravel()) / n), 2.0 * diff / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def copy(self) -> AdamState:
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.step)


@dataclass
class Adam:
    """In-place Adam with bias correction.

    ``step`` mutates parameter arrays; use :func:`adam_update` for the pure form.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState | None = field(default=None, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1**st.step
        bc2 = 1.0 - self.beta2**st.step
        for p, g, m, v in zip(params, grads, st.m, st.v):
            if m.shape != p.shape or g.shape != p.shape:
                raise ValueError("moment/gradient shape does not match parameter")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.learning_rate == 0.0:
                continue
            p -= (self.learning_rate / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adam_update(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState | None = None,
    learning_rate: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam step returning new parameters and state; inputs are untouched."""
    new_params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    opt = Adam(learning_rate, beta1, beta2, eps, state.copy() if state is not None else None)
    opt.step(new_params, [np.asarray(g, dtype=np.float64) for g in grads])
    return new_params, opt.state
