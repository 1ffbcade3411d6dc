"""Minimal layer engine with reverse-mode gradients, enough for the detector CNN.

Layers operate on channels-last batches (N, H, W, C) or (N, F) and cache
what their backward pass needs. Everything is plain numpy; convolutions are
lowered to one GEMM per layer via im2col. Single-threaded execution is
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np


class NnError(Exception):
    pass


class KernelLargerThanInput(NnError):
    pass


class PoolLargerThanInput(NnError):
    pass


class DegenerateBatch(NnError):
    """Batch statistics need at least two samples in train mode."""


class ShapeMismatch(NnError):
    pass


class Param:
    """A trainable tensor and its gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = "") -> None:
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape


def _uniform_fanin(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Valid (no padding) cross-correlation, stride 1, channels last.

    Kernels are stored as (c_out, kh, kw, c_in). Rather than materializing
    an im2col buffer, the convolution accumulates one batched matmul per
    kernel offset, which is both faster and lighter on memory here.
    """

    def __init__(self, c_in: int, c_out: int, kh: int, kw: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64, name: str = "conv"):
        self.c_in, self.c_out, self.kh, self.kw = c_in, c_out, kh, kw
        rng = rng or np.random.default_rng(0)
        fan_in = kh * kw * c_in
        self.kernels = Param(_uniform_fanin(rng, (c_out, kh, kw, c_in), fan_in, dtype), f"{name}.kernels")
        self.bias = Param(np.zeros(c_out, dtype=dtype), f"{name}.bias")
        self._x: Optional[np.ndarray] = None

    def params(self) -> list[Param]:
        return [self.kernels, self.bias]

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        n, h, w, c = x.shape
        if c != self.c_in:
            raise ShapeMismatch(f"expected {self.c_in} input channels, got {c}")
        if self.kh > h or self.kw > w:
            raise KernelLargerThanInput(f"kernel {self.kh}x{self.kw} vs input {h}x{w}")
        ho, wo = h - self.kh + 1, w - self.kw + 1
        out = np.empty((n, ho, wo, self.c_out), dtype=x.dtype)
        out[...] = self.bias.value
        for a in range(self.kh):
            for b in range(self.kw):
                out += x[:, a: a + ho, b: b + wo, :] @ self.kernels.value[:, a, b, :].T
        self._x = x
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        ho, wo = dy.shape[1], dy.shape[2]
        self.bias.grad += dy.sum(axis=(0, 1, 2))
        dx = np.zeros_like(x)
        for a in range(self.kh):
            for b in range(self.kw):
                xs = x[:, a: a + ho, b: b + wo, :]
                self.kernels.grad[:, a, b, :] += np.tensordot(
                    dy, xs, axes=([0, 1, 2], [0, 1, 2])
                )
                dx[:, a: a + ho, b: b + wo, :] += dy @ self.kernels.value[:, a, b, :]
        return dx


class AvgPool2d(Layer):
    """Non-overlapping window means; trailing remainder rows/cols are dropped."""

    def __init__(self, ph: int, pw: int):
        self.ph, self.pw = ph, pw
        self._x_shape = None

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        n, h, w, c = x.shape
        if self.ph > h or self.pw > w:
            raise PoolLargerThanInput(f"pool {self.ph}x{self.pw} vs input {h}x{w}")
        ho, wo = h // self.ph, w // self.pw
        self._x_shape = x.shape
        core = x[:, : ho * self.ph, : wo * self.pw, :]
        return core.reshape(n, ho, self.ph, wo, self.pw, c).mean(axis=(2, 4))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, h, w, c = self._x_shape
        ho, wo = h // self.ph, w // self.pw
        dx = np.zeros(self._x_shape, dtype=dy.dtype)
        spread = np.broadcast_to(
            dy[:, :, None, :, None, :] / (self.ph * self.pw),
            (n, ho, self.ph, wo, self.pw, c),
        )
        dx[:, : ho * self.ph, : wo * self.pw, :] = spread.reshape(n, ho * self.ph, wo * self.pw, c)
        return dx


class BatchNorm(Layer):
    """Per-feature batch normalization over all axes but the last.

    Train mode normalizes with batch statistics and updates the running
    estimates with the configured momentum; infer mode uses the running
    statistics only.
    """

    def __init__(self, n_features: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float64, name: str = "bn"):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(n_features, dtype=dtype), f"{name}.gamma")
        self.beta = Param(np.zeros(n_features, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)
        self._cache = None

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        axes = tuple(range(x.ndim - 1))
        if mode == "train":
            if x.shape[0] < 2:
                raise DegenerateBatch("batch normalization needs batch size >= 2 to train")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
            self._cache = ("train", xhat, inv, axes, x[..., 0].size)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
            self._cache = ("infer", None, inv, axes, None)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mode, xhat, inv, axes, m = self._cache
        if mode == "infer":
            return dy * self.gamma.value * inv
        self.beta.grad += dy.sum(axis=axes)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        sum_dy = dy.sum(axis=axes)
        sum_dy_xhat = (dy * xhat).sum(axis=axes)
        return self.gamma.value * inv / m * (m * dy - sum_dy - xhat * sum_dy_xhat)


class ReLU(Layer):
    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout: train-time mask scaled by 1/(1-p); inference is identity."""

    def __init__(self, p: float = 0.5):
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self.rng: Optional[np.random.Generator] = None
        self.enabled = True
        self._mask = None

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        if mode != "train" or not self.enabled or self.p == 0:
            self._mask = None
            return x
        if self.rng is None:
            raise NnError("dropout layer has no rng; assign one before training")
        self._mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1 - self.p)
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, name: str = "fc"):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Param(_uniform_fanin(rng, (n_in, n_out), n_in, dtype), f"{name}.weight")
        self.bias = Param(np.zeros(n_out, dtype=dtype), f"{name}.bias")
        self._x = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        if x.shape[1] != self.n_in:
            raise ShapeMismatch(f"expected {self.n_in} features, got {x.shape[1]}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.weight.grad += self._x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax; shifting both logits leaves the output unchanged."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def softmax_xent_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the pre-softmax logits."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def l2_penalty(weights: Iterable[np.ndarray], lam: float) -> float:
    """lam * sum of squared entries; the gradient contribution is 2*lam*w."""
    if lam < 0:
        raise ValueError("l2 coefficient must be >= 0")
    return float(lam * sum(np.sum(w * w) for w in weights))


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam update, in place on value/m/v."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam optimizer over a fixed parameter list."""

    def __init__(self, params: list[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            adam_step(p.value, p.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)
