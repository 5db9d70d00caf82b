"""Layers with explicit forward/backward passes.

Every layer keeps whatever its backward pass needs from the most recent
forward call. Arrays are float64 throughout; images are NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ValidationError
from .functional import sigmoid

ACTIVATIONS = ("relu", "prelu", "elu", "tanh", "sigmoid")
PRELU_INIT = 0.25
ELU_ALPHA = 1.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``kind`` is one of dense, conv2d, activation, dropout, batchnorm,
    maxpool, flatten. Only the fields relevant to that kind are set.
    """

    kind: str
    in_features: int | None = None
    out_features: int | None = None
    kernel_size: int | None = None
    activation: str | None = None
    rate: float | None = None
    window: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "conv2d" and self.kernel_size not in (3, 5):
            raise ValidationError(f"kernel size must be 3 or 5, got {self.kernel_size}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.kind == "dropout" and not (0.0 <= (self.rate if self.rate is not None else -1) < 1.0):
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass
class Layer:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    kind = "base"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def _init_weight(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
                 init: Any) -> np.ndarray:
    if init == "kaiming":
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    kind, std = init
    if kind != "normal":
        raise ValidationError(f"unknown init {init!r}")
    return rng.normal(0.0, std, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init: Any = "kaiming") -> None:
        super().__init__()
        self.params["W"] = _init_weight((in_features, out_features), in_features, rng, init)
        self.params["b"] = np.zeros(out_features)
        self.zero_grad()
        self._x: np.ndarray | None = None
        self.needs_param_grad = True

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ValidationError(
                f"dense layer expects (n, {self.params['W'].shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        if self.needs_param_grad:
            self.grads["W"] = self._x.T @ grad
            self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class Conv2d(Layer):
    """k x k convolution, stride 1, zero "same" padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, init: Any = "kaiming") -> None:
        super().__init__()
        if kernel_size not in (3, 5):
            raise ValidationError(f"kernel size must be 3 or 5, got {kernel_size}")
        fan_in = in_channels * kernel_size * kernel_size
        self.k = kernel_size
        self.params["W"] = _init_weight((out_channels, in_channels, kernel_size, kernel_size),
                                        fan_in, rng, init)
        self.params["b"] = np.zeros(out_channels)
        self.zero_grad()
        self.needs_input_grad = True
        self._cols: np.ndarray | None = None
        self._xshape: tuple[int, ...] | None = None

    @staticmethod
    def _columns(xc: np.ndarray, k: int) -> np.ndarray:
        """(c, n, h, w) -> (c*k*k, n*h*w) patch matrix of the zero-padded input."""
        c, n, h, w = xc.shape
        p = k // 2
        xp = np.zeros((c, n, h + 2 * p, w + 2 * p))
        xp[:, :, p:p + h, p:p + w] = xc
        cols = np.empty((c, k, k, n, h, w))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
        return cols.reshape(c * k * k, n * h * w)

    def forward(self, x, train):
        cout, cin, k, _ = self.params["W"].shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise ValidationError(f"conv2d expects (n, {cin}, h, w), got {x.shape}")
        n, _, h, w = x.shape
        cols = self._columns(x.transpose(1, 0, 2, 3), k)
        self._cols = cols
        self._xshape = x.shape
        out = self.params["W"].reshape(cout, -1) @ cols + self.params["b"][:, None]
        return out.reshape(cout, n, h, w).transpose(1, 0, 2, 3)

    def backward(self, grad):
        cout, cin, k, _ = self.params["W"].shape
        n, _, h, w = self._xshape
        gc = grad.transpose(1, 0, 2, 3)
        g2 = gc.reshape(cout, n * h * w)
        self.grads["W"] = (g2 @ self._cols.T).reshape(self.params["W"].shape)
        self.grads["b"] = g2.sum(axis=1)
        if not self.needs_input_grad:
            return None
        # input gradient = "same" correlation of grad with the flipped kernel
        flipped = self.params["W"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        dx = flipped @ self._columns(gc, k)
        return dx.reshape(cin, n, h, w).transpose(1, 0, 2, 3)


class Activation(Layer):
    kind = "activation"

    def __init__(self, name: str) -> None:
        super().__init__()
        if name not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {name!r}")
        self.name = name
        if name == "prelu":
            self.params["slope"] = np.array([PRELU_INIT])
        self.zero_grad()
        self._x: np.ndarray | None = None
        self._y: np.ndarray | None = None

    def forward(self, x, train):
        self._x = x
        if self.name == "relu":
            y = np.maximum(x, 0.0)
        elif self.name == "prelu":
            y = np.where(x > 0, x, self.params["slope"][0] * x)
        elif self.name == "elu":
            y = np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
        elif self.name == "tanh":
            y = np.tanh(x)
        else:
            y = sigmoid(x)
        self._y = y
        return y

    def backward(self, grad):
        x, y = self._x, self._y
        if self.name == "relu":
            return grad * (x > 0)
        if self.name == "prelu":
            neg = x <= 0
            self.grads["slope"] = np.array([np.sum(grad * x * neg)])
            return np.where(neg, self.params["slope"][0] * grad, grad)
        if self.name == "elu":
            return grad * np.where(x > 0, 1.0, y + ELU_ALPHA)
        if self.name == "tanh":
            return grad * (1.0 - y * y)
        return grad * y * (1.0 - y)


class Dropout(Layer):
    """Inverted dropout: zero with probability ``rate``, scale survivors."""

    kind = "dropout"

    def __init__(self, rate: float, rng: np.random.Generator) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._mask: np.ndarray | None = None

    def forward(self, x, train):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class BatchNorm(Layer):
    """Per-channel batch normalisation for (n, c) or (n, c, h, w) inputs."""

    kind = "batchnorm"

    def __init__(self, num_features: int) -> None:
        super().__init__()
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.buffers["running_mean"] = np.zeros(num_features)
        self.buffers["running_var"] = np.ones(num_features)
        self.zero_grad()
        self._cache: tuple | None = None

    @staticmethod
    def _axes(x: np.ndarray) -> tuple[int, ...]:
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bshape(x: np.ndarray) -> tuple[int, ...]:
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train):
        axes, bs = self._axes(x), self._bshape(x)
        if x.shape[1] != self.params["gamma"].shape[0]:
            raise ValidationError(f"batchnorm expects {self.params['gamma'].shape[0]} channels, got {x.shape}")
        if train:
            if x.shape[0] < 2:
                raise ValidationError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = BN_MOMENTUM
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        self._cache = (xhat, inv_std, train)
        return xhat * self.params["gamma"].reshape(bs) + self.params["beta"].reshape(bs)

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        axes, bs = self._axes(grad), self._bshape(grad)
        self.grads["gamma"] = np.sum(grad * xhat, axis=axes)
        self.grads["beta"] = np.sum(grad, axis=axes)
        dxhat = grad * self.params["gamma"].reshape(bs)
        if not train:
            return dxhat * inv_std.reshape(bs)
        n = grad.size // grad.shape[1]
        return (inv_std.reshape(bs) / n) * (
            n * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True)
        )


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "maxpool"

    def __init__(self, window: int = 2) -> None:
        super().__init__()
        self.window = window
        self._cache: tuple | None = None

    def forward(self, x, train):
        n, c, h, w = x.shape
        s = self.window
        ho, wo = h // s, w // s
        if ho < 1 or wo < 1:
            raise ValidationError(f"max pooling collapses {h}x{w} input below 1x1")
        xc = x[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s)
        blocks = xc.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
        arg = np.argmax(blocks, axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (n, c, h, w), arg = self._cache
        s = self.window
        ho, wo = grad.shape[2], grad.shape[3]
        blocks = np.zeros((n, c, ho, wo, s * s))
        np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, :ho * s, :wo * s] = (
            blocks.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        )
        return dx


class Flatten(Layer):
    kind = "flatten"

    def __init__(self) -> None:
        super().__init__()
        self._shape: tuple[int, ...] | None = None

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)
