"""Small float64 neural-network engine.

Layers cache what they need during a training-mode forward pass and
propagate gradients back by hand in ``backward``. Parameter gradients
accumulate into ``Tensor.grad`` until :meth:`Tensor.zero_grad` is called.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericInputError, ShapeError, StateError

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Tensor:
    """A float64 array with an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=DTYPE)
            if self.grad.shape != self.data.shape:
                raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(np.zeros(shape, dtype=DTYPE))


# --------------------------------------------------------------------------- layers


class Layer:
    """Base class. Subclasses register parameters/buffers in dicts."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.children: dict[str, Layer] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a training-mode forward pass")
        return self._cache

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, t in self.params.items():
            yield prefix + k, t
        for name, child in self.children.items():
            yield from child.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, t in self.buffers.items():
            yield prefix + k, t
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def layers(self) -> Iterator["Layer"]:
        yield self
        for child in self.children.values():
            yield from child.layers()


class Conv1d(Layer):
    """1-D convolution with 'same'-style zero padding of ``kernel // 2``."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        self.params["weight"] = Tensor.zeros(out_channels, in_channels, kernel)
        self.params["bias"] = Tensor.zeros(out_channels)

    def out_length(self, length: int) -> int:
        return (length + 2 * self.pad - self.kernel) // self.stride + 1

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv1d expects [B, {self.in_channels}, L], got {list(x.shape)}")
        B, C, L = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad))) if self.pad else x
        win = sliding_window_view(xp, self.kernel, axis=2)[:, :, :: self.stride, :]
        Lout = win.shape[2]
        cols = win.transpose(0, 2, 1, 3).reshape(B * Lout, C * self.kernel)
        w = self.params["weight"].data.reshape(self.out_channels, -1)
        out = cols @ w.T
        out += self.params["bias"].data
        out = out.reshape(B, Lout, self.out_channels).transpose(0, 2, 1)
        self._cache = (cols, x.shape) if training else None
        return np.ascontiguousarray(out)

    def backward(self, grad):
        cols, (B, C, L) = self._need_cache()
        Lout = grad.shape[2]
        g2 = grad.transpose(0, 2, 1).reshape(B * Lout, self.out_channels)
        self.params["weight"].accumulate((g2.T @ cols).reshape(self.out_channels, C, self.kernel))
        self.params["bias"].accumulate(g2.sum(axis=0))
        w = self.params["weight"].data.reshape(self.out_channels, -1)
        dcols = (g2 @ w).reshape(B, Lout, C, self.kernel)
        dxp = np.zeros((B, C, L + 2 * self.pad), dtype=DTYPE)
        span = self.stride * (Lout - 1) + 1
        for j in range(self.kernel):
            dxp[:, :, j : j + span : self.stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dxp[:, :, self.pad : self.pad + L]


class BatchNorm1d(Layer):
    """Per-channel normalisation over batch and time axes of a [B, C, L] input."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["weight"] = Tensor(np.ones(channels))
        self.params["bias"] = Tensor.zeros(channels)
        self.buffers["running_mean"] = Tensor.zeros(channels)
        self.buffers["running_var"] = Tensor(np.ones(channels))

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm1d expects [B, {self.channels}, L], got {list(x.shape)}")
        gamma = self.params["weight"].data[None, :, None]
        beta = self.params["bias"].data[None, :, None]
        if not training:
            self._cache = None
            mean = self.buffers["running_mean"].data[None, :, None]
            var = self.buffers["running_var"].data[None, :, None]
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta
        n = x.shape[0] * x.shape[2]
        mean = x.mean(axis=(0, 2))
        centered = x - mean[None, :, None]
        var = (centered**2).mean(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std[None, :, None]
        m = self.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm.data = (1 - m) * rm.data + m * mean
        rv.data = (1 - m) * rv.data + m * unbiased
        self._cache = (xhat, inv_std, n)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std, n = self._need_cache()
        self.params["weight"].accumulate((grad * xhat).sum(axis=(0, 2)))
        self.params["bias"].accumulate(grad.sum(axis=(0, 2)))
        dxhat = grad * self.params["weight"].data[None, :, None]
        s1 = dxhat.sum(axis=(0, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        return (n * dxhat - s1 - xhat * s2) * (inv_std[None, :, None] / n)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = Tensor.zeros(out_features, in_features)
        self.params["bias"] = Tensor.zeros(out_features)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects [B, {self.in_features}], got {list(x.shape)}")
        self._cache = x if training else None
        return x @ self.params["weight"].data.T + self.params["bias"].data

    def backward(self, grad):
        x = self._need_cache()
        self.params["weight"].accumulate(grad.T @ x)
        self.params["bias"].accumulate(grad.sum(axis=0))
        return grad @ self.params["weight"].data


class ReLU(Layer):
    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask if training else None
        return x * mask

    def backward(self, grad):
        return grad * self._need_cache()


class GlobalAvgPool(Layer):
    """[B, C, L] -> [B, C] mean over time."""

    def forward(self, x, training=False):
        self._cache = x.shape if training else None
        return x.mean(axis=2)

    def backward(self, grad):
        B, C, L = self._need_cache()
        return np.broadcast_to(grad[:, :, None] / L, (B, C, L)).copy()


class Flatten(Layer):
    def forward(self, x, training=False):
        self._cache = x.shape if training else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


# --------------------------------------------------------------------------- initialisation


def kaiming_init(layer: Layer, rng: np.random.Generator) -> None:
    """Fan-in scaled normal weights (ReLU gain), zero bias."""
    w = layer.params["weight"]
    fan_in = int(np.prod(w.shape[1:]))
    w.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
    layer.params["bias"].data = np.zeros(layer.params["bias"].shape)


# --------------------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {list(logits.shape)} and labels {list(labels.shape)} disagree")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    logp = log_softmax(logits)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / B


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if params.keys() != grads.keys():
        raise ShapeError("params and grads have different names")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: grad {grads[name].shape} != param {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: moment shape {state.m[name].shape} != param {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a set of named :class:`Tensor` parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 5e-4, state: AdamState | None = None):
        self.params = dict(params)
        self.lr = lr
        self.state = state or AdamState()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> None:
        data = {k: t.data for k, t in self.params.items()}
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        adam_step(data, grads, self.state, self.lr)


def check_input(x: np.ndarray, channels: int, length: int) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1:] != (channels, length):
        raise ShapeError(f"expected input [B>=1, {channels}, {length}], got {list(x.shape)}")
    if not np.isfinite(x).all():
        raise NumericInputError("input batch contains non-finite values")
    return x
