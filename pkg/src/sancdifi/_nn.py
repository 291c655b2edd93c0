"""Hand-written layers for the toy networks: 3x3 same-padding convolution,
softmax, timestep embedding and an Adam optimizer.

Tensors are ``(B, H, W, C)`` float64.  Convolution weights are stored as a
``(C_in * k * k, C_out)`` matrix whose rows are ordered ``(c, ki, kj)``, which is
the column order :func:`im2col` produces.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k=3):
    b, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    return win.reshape(b * h * w, c * k * k)


def col2im(dcols, shape, k=3):
    b, h, w, c = shape
    p = k // 2
    d = dcols.reshape(b, h, w, c, k, k)
    out = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w, :] += d[..., i, j]
    return out[:, p:p + h, p:p + w, :]


def conv_forward(x, weight, bias):
    """Returns the conv output and the im2col cache needed by the backward pass."""
    b, h, w, _ = x.shape
    cols = im2col(x)
    out = cols @ weight + bias
    return out.reshape(b, h, w, -1), cols


def conv_backward(dout, cols, weight, x_shape, need_input_grad=True):
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = cols.T @ d2
    db = d2.sum(axis=0)
    dx = col2im(d2 @ weight.T, x_shape) if need_input_grad else None
    return dx, dw, db


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def timestep_embedding(t, dim):
    """Sinusoidal features of integer timesteps, shape ``(len(t), dim)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def he_normal(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Adam:
    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads):
        if self.lr == 0:
            return
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        # sorted keys fix the update order
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, learning_rate, momentum=0.9):
        self.lr = learning_rate
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        if self.lr == 0:
            return
        for k in sorted(params):
            self.vel[k] = self.momentum * self.vel[k] - self.lr * grads[k]
            params[k] += self.vel[k]


def make_optimizer(name, params, learning_rate):
    if name == "adam":
        return Adam(params, learning_rate)
    if name == "sgd":
        return SGD(params, learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")
