"""Minimal NHWC conv-net building blocks with hand-written backward passes.

Convolution runs as im2col + BLAS matmul; the window packing/unpacking is a
kernel-backend call (numba or numpy).  Only what the toy detector needs.
"""

import numpy as np

from . import _kernels


def conv2d(x, w, b, stride, pad):
    """Forward conv, NHWC input, (kh, kw, Cin, Cout) weights.

    Returns (y, col); keep ``col`` only if weight gradients are needed later.
    """
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    col = _kernels.im2col(x, kh, kw, stride, pad)
    y = col @ w.reshape(-1, Cout) + b
    return y.reshape(B, OH, OW, Cout), col


def conv2d_backward(grad_y, x_shape, w, stride, pad, col=None):
    """Backward conv: returns (grad_x, grad_w, grad_b); the weight grads are
    None unless the forward ``col`` is supplied."""
    B, H, W, Cin = x_shape
    kh, kw, _, Cout = w.shape
    gy = grad_y.reshape(-1, Cout)
    grad_x = _kernels.col2im(gy @ w.reshape(-1, Cout).T, B, H, W, Cin, kh, kw, stride, pad)
    if col is None:
        return grad_x, None, None
    grad_w = (col.T @ gy).reshape(w.shape)
    grad_b = gy.sum(axis=0)
    return grad_x, grad_w, grad_b


def leaky_relu(x, slope=0.1):
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_backward(grad_y, x, slope=0.1):
    return grad_y * np.where(x > 0.0, 1.0, slope)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def bce_with_logits(z, y):
    """Elementwise binary cross-entropy on logits, numerically stable."""
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


class Adam:
    """Plain Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
