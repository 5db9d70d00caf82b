"""Sequential container tying layers, parameters and gradients together."""

from __future__ import annotations

from typing import Any, Iterable, Sequence

import numpy as np

from ..errors import ValidationError
from .functional import check_finite
from .layers import (Activation, BatchNorm, Conv2d, Dense, Dropout, Flatten, Layer,
                     LayerSpec, MaxPool2d)


def build_layer(spec: LayerSpec, rng: np.random.Generator, init: Any = "kaiming") -> Layer:
    if spec.kind == "dense":
        return Dense(spec.in_features, spec.out_features, rng, init)
    if spec.kind == "conv2d":
        return Conv2d(spec.in_features, spec.out_features, spec.kernel_size, rng, init)
    if spec.kind == "activation":
        return Activation(spec.activation)
    if spec.kind == "dropout":
        return Dropout(spec.rate, rng)
    if spec.kind == "batchnorm":
        return BatchNorm(spec.in_features)
    if spec.kind == "maxpool":
        return MaxPool2d(spec.window or 2)
    if spec.kind == "flatten":
        return Flatten()
    raise ValidationError(f"unknown layer kind {spec.kind!r}")


class Sequential:
    """A stack of layers run in order.

    ``forward`` caches what ``backward`` needs; a cache is consumed by the
    backward call, so a second backward without a new forward raises.
    """

    def __init__(self, layers: Sequence[Layer], specs: Sequence[LayerSpec] | None = None) -> None:
        self.layers = list(layers)
        self.specs = list(specs) if specs is not None else None
        self._has_cache = False

    @classmethod
    def from_specs(cls, specs: Iterable[LayerSpec], rng: np.random.Generator,
                   init: Any = "kaiming") -> "Sequential":
        specs = list(specs)
        return cls([build_layer(s, rng, init) for s in specs], specs)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out, train)
        check_finite(out, "network output")
        self._has_cache = True
        return out

    __call__ = forward

    def backward(self, grad: np.ndarray, input_grad: bool = True, param_grads: bool = True) -> np.ndarray | None:
        """Backpropagate ``grad``; fills every layer's ``grads``.

        With ``input_grad=False`` a leading conv layer skips the (costly)
        gradient wrt the network input and ``None`` is returned. With
        ``param_grads=False`` dense layers only pass the gradient through and
        leave their ``grads`` as they were.
        """
        if not self._has_cache:
            raise ValidationError("backward called without a fresh forward pass (stale cache)")
        self._has_cache = False
        first = self.layers[0]
        if isinstance(first, Conv2d):
            first.needs_input_grad = input_grad
        for layer in self.layers:
            if isinstance(layer, Dense):
                layer.needs_param_grad = param_grads
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        for _, g in self.named_grads():
            check_finite(g, "gradient")
        return grad

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{k}", v) for i, layer in enumerate(self.layers) for k, v in layer.params.items()]

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{k}", layer.grads[k]) for i, layer in enumerate(self.layers) for k in layer.params]

    def params(self) -> list[np.ndarray]:
        return [v for _, v in self.named_params()]

    def grads(self) -> list[np.ndarray]:
        return [g for _, g in self.named_grads()]

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                state[f"{i}.{k}"] = v
            for k, v in layer.buffers.items():
                state[f"{i}.{k}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(expected) != set(state):
            raise ValidationError(f"state keys differ: {sorted(set(expected) ^ set(state))[:5]}")
        for name, value in state.items():
            idx, key = name.split(".", 1)
            layer = self.layers[int(idx)]
            target = layer.params if key in layer.params else layer.buffers
            if target[key].shape != value.shape:
                raise ValidationError(f"shape mismatch for {name}: {target[key].shape} vs {value.shape}")
            target[key][...] = value

    def set_rng(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng
