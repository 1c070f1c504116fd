"""Layers with cached forward state and hand-written backward passes."""

from abc import ABC, abstractmethod
from typing import Any

import numpy as np
from loguru import logger

from ..exceptions import ConfigError, StateError
from . import functional as F
from .tensor import LayerParam, Tensor


class Layer(ABC):
    """Base class for all layers.

    ``forward(x, cache=True)`` stores what ``backward`` needs on the layer;
    ``cache=False`` leaves the layer untouched so read-only inference can
    share one instance across threads.
    """

    def __init__(self, name: str):
        """Initialize the layer."""
        self.name = name
        self.logger = logger.bind(name=f"Layer.{name}")
        self._cache: Any = None

    @abstractmethod
    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        """Compute the layer output."""
        pass

    @abstractmethod
    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the input gradient."""
        pass

    def parameters(self) -> list[LayerParam]:
        return []

    def _remember(self, cache: bool, state: Any) -> None:
        if cache:
            self._cache = state

    def _cached(self) -> Any:
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before a caching forward pass")
        return self._cache


class Conv2d(Layer):
    """2D convolution with Kaiming fan-in initialization."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        padding: int | None = None,
        rng: np.random.Generator | None = None,
        dtype: str = "float32",
        bias_init: float = 0.0,
    ):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = LayerParam(f"{name}.weight", Tensor(weights.astype(dtype)))
        self.bias = LayerParam(f"{name}.bias", Tensor(np.full(out_channels, bias_init, dtype=dtype)))

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        self._remember(cache, x)
        return F.conv2d_forward(x, self.weight.values, self.bias.values, 1, self.padding)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cached()
        dx, dw, db = F.conv2d_backward(dy, x, self.weight.values, 1, self.padding)
        self.weight.tensor.accumulate(dw)
        self.bias.tensor.accumulate(db)
        return dx

    def parameters(self) -> list[LayerParam]:
        return [self.weight, self.bias]


class MaxPool2x2(Layer):
    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        y, argmax = F.maxpool2x2_forward(x)
        self._remember(cache, (argmax, x.shape))
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        argmax, shape = self._cached()
        return F.maxpool2x2_backward(dy, argmax, shape)


class Activation(Layer):
    """Elementwise ReLU or softplus."""

    KINDS = {
        "relu": (F.relu, F.relu_grad),
        "softplus": (F.softplus, F.softplus_grad),
    }

    def __init__(self, name: str, kind: str = "relu"):
        super().__init__(name)
        if kind not in self.KINDS:
            raise ConfigError(f"Unknown activation: {kind}")
        self.kind = kind
        self._fn, self._grad = self.KINDS[kind]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        self._remember(cache, x)
        return self._fn(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._grad(self._cached())


class Upsample2x(Layer):
    """Learned stride-2 transposed convolution, bilinear at initialization."""

    def __init__(self, name: str, channels: int = 1, gain: float = 1.0, dtype: str = "float32"):
        super().__init__(name)
        weights = F.bilinear_upsample_weights(channels, gain)
        self.weight = LayerParam(f"{name}.weight", Tensor(weights.astype(dtype)))

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        self._remember(cache, x)
        return F.deconv_upsample2x_forward(x, self.weight.values)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw = F.deconv_upsample2x_backward(dy, self._cached(), self.weight.values)
        self.weight.tensor.accumulate(dw)
        return dx

    def parameters(self) -> list[LayerParam]:
        return [self.weight]


class Sequential(Layer):
    """Layers applied in order."""

    def __init__(self, name: str, layers: list[Layer]):
        super().__init__(name)
        self.layers = layers

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, cache)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self) -> list[LayerParam]:
        return [p for layer in self.layers for p in layer.parameters()]
