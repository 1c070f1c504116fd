"""Parameter containers for the layer toolkit."""

from dataclasses import dataclass

import numpy as np

from ..exceptions import ShapeError


@dataclass
class Tensor:
    """Values plus an optional gradient of the same shape.

    Activations are (channels, height, width); parameters may have any rank.
    """

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.grad is not None and np.shape(self.grad) != self.values.shape:
            raise ShapeError(f"grad shape {np.shape(self.grad)} != values shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.values.shape, dtype=np.float64)

    def accumulate(self, grad: np.ndarray) -> None:
        """Add a gradient contribution (kept in double precision)."""
        if grad.shape != self.values.shape:
            raise ShapeError(f"gradient shape {grad.shape} != values shape {self.values.shape}")
        if self.grad is None:
            self.zero_grad()
        self.grad += grad


@dataclass
class LayerParam:
    """A named model parameter."""

    id: str
    tensor: Tensor
    learnable: bool = True

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @values.setter
    def values(self, new_values: np.ndarray) -> None:
        new_values = np.asarray(new_values)
        if new_values.shape != self.tensor.shape:
            raise ShapeError(f"{self.id}: shape {new_values.shape} != {self.tensor.shape}")
        self.tensor.values = new_values.astype(self.tensor.values.dtype, copy=True)

    @property
    def grad(self) -> np.ndarray:
        if self.tensor.grad is None:
            self.tensor.zero_grad()
        return self.tensor.grad
