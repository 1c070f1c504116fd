"""Forward and backward kernels of the layer toolkit.

All kernels work on single images shaped (channels, height, width).
Convolution is cross-correlation (no kernel flip). Reductions accumulate
in float64; outputs are cast back to the input dtype.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..exceptions import ShapeError

# 1D bilinear kernel of a stride-2 transposed convolution (kernel 4)
BILINEAR_1D = np.array([0.25, 0.75, 0.75, 0.25])
UPSAMPLE_KERNEL = 4
UPSAMPLE_CROP = 3


def _check_image(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (channels, height, width), got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return windows[:, ::stride, ::stride]


def conv2d_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """y[o] = sum_c x[c] * w[o, c] + b[o] (cross-correlation)."""
    _check_image(x)
    if weights.ndim != 4 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"weights {weights.shape} do not match input channels {x.shape[0]}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match {weights.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")

    _, kh, kw = weights.shape[1:]
    if min(conv_output_size(x.shape[1], kh, stride, padding), conv_output_size(x.shape[2], kw, stride, padding)) < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape[1:]} with padding {padding}")

    windows = _conv_windows(x, kh, kw, stride, padding).astype(np.float64)
    y = np.einsum("chwij,ocij->ohw", windows, weights.astype(np.float64), optimize=True)
    if bias is not None:
        y += bias[:, None, None]
    return y.astype(x.dtype, copy=False)


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, weights: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv2d_forward given the upstream gradient dy."""
    _, kh, kw = weights.shape[1:]
    windows = _conv_windows(x, kh, kw, stride, padding).astype(np.float64)
    if dy.shape != (weights.shape[0], *windows.shape[1:3]):
        raise ShapeError(f"upstream gradient {dy.shape} does not match conv output")

    dw = np.einsum("ohw,chwij->ocij", dy.astype(np.float64), windows, optimize=True)
    db = dy.sum(axis=(1, 2), dtype=np.float64)

    _, out_h, out_w = dy.shape
    dxp = np.zeros((x.shape[0], x.shape[1] + 2 * padding, x.shape[2] + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.einsum(
                "ohw,oc->chw", dy, weights[:, :, i, j], dtype=np.float64
            )
    dx = dxp[:, padding : padding + x.shape[1], padding : padding + x.shape[2]]
    return dx, dw, db


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling; odd sizes are padded with -inf.

    Returns the pooled map and the within-window argmax (first on ties).
    """
    _check_image(x)
    c, h, w = x.shape
    ph, pw = h + h % 2, w + w % 2
    if (ph, pw) != (h, w):
        x = np.pad(x, ((0, 0), (0, ph - h), (0, pw - w)), constant_values=-np.inf)

    blocks = x.reshape(c, ph // 2, 2, pw // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ph // 2, pw // 2, 4)
    argmax = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return y, argmax


def maxpool2x2_backward(dy: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Route each upstream gradient to its window's argmax."""
    if dy.shape != argmax.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match pooled shape {argmax.shape}")
    c, h, w = input_shape
    oh, ow = argmax.shape[1:]

    blocks = np.zeros((c, oh, ow, 4), dtype=np.float64)
    np.put_along_axis(blocks, argmax[..., None], dy[..., None], axis=-1)
    dx = blocks.reshape(c, oh, ow, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * oh, 2 * ow)
    return dx[:, :h, :w]


def bilinear_upsample_weights(channels: int, gain: float = 1.0) -> np.ndarray:
    """Channel-diagonal bilinear kernel for deconv_upsample2x; gain 0.25 preserves mass."""
    weights = np.zeros((channels, channels, UPSAMPLE_KERNEL, UPSAMPLE_KERNEL))
    kernel = np.outer(BILINEAR_1D, BILINEAR_1D) * gain
    for c in range(channels):
        weights[c, c] = kernel
    return weights


def deconv_upsample2x_forward(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Stride-2 transposed convolution doubling both spatial dims.

    The input is edge-replicated by one pixel before the transposed
    convolution and the result is cropped back to exactly (2H, 2W), so a
    bilinear kernel reproduces constant maps up to the borders.
    weights: (in_channels, out_channels, 4, 4).
    """
    _check_image(x)
    if weights.shape[0] != x.shape[0] or weights.shape[2:] != (UPSAMPLE_KERNEL, UPSAMPLE_KERNEL):
        raise ShapeError(f"upsample weights {weights.shape} do not match input {x.shape}")

    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    full = np.zeros((weights.shape[1], 2 * h + 6, 2 * w + 6), dtype=np.float64)
    for i in range(UPSAMPLE_KERNEL):
        for j in range(UPSAMPLE_KERNEL):
            full[:, i : i + 2 * (h + 2) : 2, j : j + 2 * (w + 2) : 2] += np.einsum(
                "chw,co->ohw", xp, weights[:, :, i, j], dtype=np.float64
            )
    y = full[:, UPSAMPLE_CROP : UPSAMPLE_CROP + 2 * h, UPSAMPLE_CROP : UPSAMPLE_CROP + 2 * w]
    return y.astype(x.dtype, copy=False)


def deconv_upsample2x_backward(
    dy: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dx, dw) of deconv_upsample2x_forward."""
    c, h, w = x.shape
    if dy.shape != (weights.shape[1], 2 * h, 2 * w):
        raise ShapeError(f"upstream gradient {dy.shape} does not match upsampled shape")

    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    full = np.zeros((weights.shape[1], 2 * h + 6, 2 * w + 6), dtype=np.float64)
    full[:, UPSAMPLE_CROP : UPSAMPLE_CROP + 2 * h, UPSAMPLE_CROP : UPSAMPLE_CROP + 2 * w] = dy

    dxp = np.zeros(xp.shape, dtype=np.float64)
    dw = np.zeros(weights.shape, dtype=np.float64)
    for i in range(UPSAMPLE_KERNEL):
        for j in range(UPSAMPLE_KERNEL):
            window = full[:, i : i + 2 * (h + 2) : 2, j : j + 2 * (w + 2) : 2]
            dxp += np.einsum("ohw,co->chw", window, weights[:, :, i, j], dtype=np.float64)
            dw[:, :, i, j] = np.einsum("chw,ohw->co", xp, window, dtype=np.float64)

    # fold the replicated border back onto the edge pixels
    rows = np.clip(np.arange(-1, h + 1), 0, h - 1)
    cols = np.clip(np.arange(-1, w + 1), 0, w - 1)
    folded_rows = np.zeros((c, h, w + 2), dtype=np.float64)
    np.add.at(folded_rows, (slice(None), rows, slice(None)), dxp)
    dx = np.zeros((c, h, w), dtype=np.float64)
    np.add.at(dx, (slice(None), slice(None), cols), folded_rows)
    return dx, dw


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(np.float64)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def softplus_grad(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)
