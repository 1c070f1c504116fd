"""Perspective-aware combination of fine and coarse density maps.

A PA layer turns a perspective map into per-pixel weights
``w = sigmoid(alpha * (p - beta))`` and blends two density maps of the
same resolution: ``d = w * d_fine + (1 - w) * d_coarse_up``. The sign of
alpha decides which map dominates where p is high.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from .exceptions import ShapeError, StateError
from .nn.functional import sigmoid
from .nn.layers import Layer
from .nn.tensor import LayerParam, Tensor


@dataclass
class PAWeightParams:
    """Sigmoid slope and center of one PA layer."""

    alpha: float = 1.0
    beta: float = 0.0


@dataclass
class PACombineState:
    """Forward values needed by pa_combine_backward."""

    d_fine: np.ndarray
    d_coarse_up: np.ndarray
    p: np.ndarray
    w: np.ndarray
    alpha: float
    beta: float


@dataclass
class PACombineGrads:
    d_fine: np.ndarray
    d_coarse_up: np.ndarray
    p: np.ndarray
    alpha: float
    beta: float


def _check_same_size(*maps: np.ndarray) -> None:
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"PA combination needs maps of one size, got {sorted(shapes)}")


def pa_weights(p: np.ndarray, pw: PAWeightParams) -> np.ndarray:
    """w = 1 / (1 + exp(-alpha * (p - beta)))."""
    return sigmoid(pw.alpha * (np.asarray(p, dtype=np.float64) - pw.beta))


def pa_combine_forward(
    d_fine: np.ndarray, d_coarse_up: np.ndarray, p: np.ndarray, pw: PAWeightParams
) -> tuple[np.ndarray, np.ndarray]:
    """Blend the two density maps with perspective weights; returns (d_out, w)."""
    _check_same_size(d_fine, d_coarse_up, p)
    w = pa_weights(p, pw)
    d_out = w * np.asarray(d_fine, dtype=np.float64) + (1.0 - w) * np.asarray(d_coarse_up, dtype=np.float64)
    return d_out, w


def pa_combine_backward(upstream: np.ndarray, state: PACombineState | None) -> PACombineGrads:
    """Gradients of a PA combination for both density maps, p, alpha and beta."""
    if state is None:
        raise StateError("pa_combine_backward needs the state of a forward pass")
    _check_same_size(upstream, state.w)

    upstream = np.asarray(upstream, dtype=np.float64)
    diff = np.asarray(state.d_fine, dtype=np.float64) - np.asarray(state.d_coarse_up, dtype=np.float64)
    slope = state.w * (1.0 - state.w)
    through_sigmoid = upstream * diff * slope

    return PACombineGrads(
        d_fine=upstream * state.w,
        d_coarse_up=upstream * (1.0 - state.w),
        p=state.alpha * through_sigmoid,
        alpha=float(np.sum(through_sigmoid * (np.asarray(state.p, dtype=np.float64) - state.beta))),
        beta=float(np.sum(through_sigmoid * -state.alpha)),
    )


class PAWeighting(Layer):
    """PA weighting layer owning learnable alpha and beta.

    Works on (1, H, W) maps; ``forward`` takes the three maps as a tuple.
    """

    def __init__(self, name: str, params: PAWeightParams | None = None, dtype: str = "float32"):
        super().__init__(name)
        params = params or PAWeightParams()
        self.alpha = LayerParam(f"{name}.alpha", Tensor(np.array([params.alpha], dtype=dtype)))
        self.beta = LayerParam(f"{name}.beta", Tensor(np.array([params.beta], dtype=dtype)))
        self.last_weights: np.ndarray | None = None

    @property
    def params(self) -> PAWeightParams:
        return PAWeightParams(alpha=float(self.alpha.values[0]), beta=float(self.beta.values[0]))

    def set_params(self, params: PAWeightParams) -> None:
        self.alpha.values = np.array([params.alpha])
        self.beta.values = np.array([params.beta])
        self.logger.debug(f"PA params set to alpha={params.alpha:.4g} beta={params.beta:.4g}")

    def forward(self, maps: tuple[np.ndarray, np.ndarray, np.ndarray], cache: bool = True) -> np.ndarray:
        d_fine, d_coarse_up, p = maps
        pw = self.params
        d_out, w = pa_combine_forward(d_fine, d_coarse_up, p, pw)
        self._remember(cache, PACombineState(d_fine, d_coarse_up, p, w, pw.alpha, pw.beta))
        self.last_weights = w
        return d_out.astype(d_fine.dtype, copy=False)

    def combine(self, d_fine: np.ndarray, d_coarse_up: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stateless forward returning (d_out, w)."""
        d_out, w = pa_combine_forward(d_fine, d_coarse_up, p, self.params)
        return d_out.astype(d_fine.dtype, copy=False), w

    def backward(self, dy: np.ndarray) -> PACombineGrads:
        grads = pa_combine_backward(dy, self._cached())
        self.alpha.tensor.accumulate(np.array([grads.alpha]))
        self.beta.tensor.accumulate(np.array([grads.beta]))
        return grads

    def parameters(self) -> list[LayerParam]:
        return [self.alpha, self.beta]


def combine_average(
    d_e1: np.ndarray,
    d_e2: np.ndarray,
    d_e3: np.ndarray,
    upsampler: Callable[[np.ndarray], np.ndarray],
    inner_upsampler: Callable[[np.ndarray], np.ndarray] | None = None,
    return_middle: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """D = (D1 + Up((D2 + Up(D3)) / 2)) / 2 over the 1/8, 1/16, 1/32 chain.

    With ``return_middle`` the 1/16 average ``(D2 + Up(D3)) / 2`` comes back
    too, as ``(middle, d_e)``.
    """
    inner_upsampler = inner_upsampler or upsampler
    coarse = inner_upsampler(d_e3)
    _check_same_size(d_e2, coarse)
    middle = (np.asarray(d_e2) + coarse) / 2.0
    lifted = upsampler(middle)
    _check_same_size(d_e1, lifted)
    d_e = (np.asarray(d_e1) + lifted) / 2.0
    return (middle, d_e) if return_middle else d_e


def initial_beta(perspective_gt: np.ndarray) -> float:
    """Sigmoid center at the mean GT perspective, so weights start near 0.5."""
    beta = float(np.mean(perspective_gt))
    logger.debug(f"Initial PA beta={beta:.4g}")
    return beta
