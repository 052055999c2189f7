"""
Spatial primitives on dense float64 arrays.

Tensors are plain ``numpy.ndarray`` values in row-major order. The functions
here take a single item ``[C, H, W]`` or a batch ``[N, C, H, W]``; leading axes
are carried through untouched. Nothing in this module mutates its inputs.

Conventions:
    * Convolution is valid mode, stride 1, implemented as cross-correlation.
      The decoder's full-mode convolution correlates a zero-padded input with
      flipped kernels, which makes it the adjoint of the encoder map.
    * Bias is one scalar per feature map, broadcast over the spatial map.
    * Max-pooling windows do not overlap; the first maximum in row-major window
      order wins ties. Extents that the pool size does not divide are rejected.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import CorruptionError, DimensionError

Tensor = np.ndarray

DTYPE = np.float64


def as_tensor(values):
    """Return ``values`` as a float64 array (no copy when already one)."""
    return np.asarray(values, dtype=DTYPE)


@dataclass(frozen=True)
class PoolIndexMap:
    """
    Where each pooled value came from.

    Attributes:
        shape (tuple): Shape of the pooled output
        rows (numpy.ndarray): Input row of the winning element, same shape as the output
        cols (numpy.ndarray): Input column of the winning element
        pool (tuple): Window extents ``(p1, p2)``
    """

    shape: tuple
    rows: np.ndarray
    cols: np.ndarray
    pool: tuple


def _check_spatial(x, name):
    if x.ndim < 3:
        raise DimensionError(f"{name} must have at least 3 axes [C, H, W], got shape {x.shape}")


def conv2d_valid(inputs, kernels, bias=None):
    """
    Valid-mode, stride-1 multi-channel cross-correlation.

    ``out[..., i, :, :] = sum_j corr(inputs[..., j, :, :], kernels[i, j]) + bias[i]``

    Args:
        inputs (Tensor): ``[..., C, H, W]``
        kernels (Tensor): ``[M, C, h1, h2]``
        bias (Tensor, optional): ``[M]``; zero when omitted

    Returns:
        Tensor: ``[..., M, H - h1 + 1, W - h2 + 1]``
    """
    inputs = as_tensor(inputs)
    kernels = as_tensor(kernels)
    _check_spatial(inputs, "input")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [M, C, h1, h2], got shape {kernels.shape}")
    maps, channels, h1, h2 = kernels.shape
    if inputs.shape[-3] != channels:
        raise DimensionError(
            f"channel axis mismatch: input has {inputs.shape[-3]} channels, kernels expect {channels}"
        )
    if h1 > inputs.shape[-2]:
        raise DimensionError(f"row axis: kernel height {h1} exceeds input height {inputs.shape[-2]}")
    if h2 > inputs.shape[-1]:
        raise DimensionError(f"column axis: kernel width {h2} exceeds input width {inputs.shape[-1]}")

    windows = sliding_window_view(inputs, (h1, h2), axis=(-2, -1))
    out = np.einsum("...chwij,mcij->...mhw", windows, kernels, optimize=True)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (maps,):
            raise DimensionError(f"bias axis mismatch: expected shape ({maps},), got {bias.shape}")
        out = out + bias[:, None, None]
    return out


def conv2d_full(inputs, kernels):
    """
    Full-mode convolution that undoes the shape map of ``conv2d_valid``.

    ``kernels`` are the encoder's ``[M, C, h1, h2]`` kernels; the input carries
    ``M`` maps and the output ``C`` channels. The input is zero-padded by
    ``h - 1`` on every side and correlated with the flipped, channel-transposed
    kernels.

    Args:
        inputs (Tensor): ``[..., M, H', W']``
        kernels (Tensor): ``[M, C, h1, h2]``

    Returns:
        Tensor: ``[..., C, H' + h1 - 1, W' + h2 - 1]``
    """
    inputs = as_tensor(inputs)
    kernels = as_tensor(kernels)
    _check_spatial(inputs, "input")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [M, C, h1, h2], got shape {kernels.shape}")
    maps, _, h1, h2 = kernels.shape
    if inputs.shape[-3] != maps:
        raise DimensionError(
            f"channel axis mismatch: input has {inputs.shape[-3]} maps, kernels expect {maps}"
        )
    pad = [(0, 0)] * (inputs.ndim - 2) + [(h1 - 1, h1 - 1), (h2 - 1, h2 - 1)]
    padded = np.pad(inputs, pad)
    return conv2d_valid(padded, flip2(kernels).transpose(1, 0, 2, 3))


def conv2d_kernel_grad(inputs, grad_out, kernel_shape):
    """
    Gradient of ``conv2d_valid`` with respect to its kernels, summed over the batch.

    Args:
        inputs (Tensor): ``[..., C, H, W]`` forward input
        grad_out (Tensor): ``[..., M, H - h1 + 1, W - h2 + 1]``
        kernel_shape (tuple): ``(M, C, h1, h2)``

    Returns:
        Tensor: ``[M, C, h1, h2]``
    """
    _, _, h1, h2 = kernel_shape
    windows = sliding_window_view(as_tensor(inputs), (h1, h2), axis=(-2, -1))
    return np.einsum("...chwij,...mhw->mcij", windows, as_tensor(grad_out), optimize=True)


def maxpool2d(inputs, pool):
    """
    Non-overlapping max-pooling that remembers the argmax of every window.

    Args:
        inputs (Tensor): ``[..., C, H, W]``
        pool (tuple): ``(p1, p2)``; must divide ``H`` and ``W``

    Returns:
        tuple: ``(pooled, PoolIndexMap)`` with pooled shape ``[..., C, H/p1, W/p2]``
    """
    inputs = as_tensor(inputs)
    _check_spatial(inputs, "input")
    p1, p2 = pool
    height, width = inputs.shape[-2:]
    if p1 < 1 or height % p1:
        raise DimensionError(f"row axis: pool height {p1} does not divide input height {height}")
    if p2 < 1 or width % p2:
        raise DimensionError(f"column axis: pool width {p2} does not divide input width {width}")

    lead = inputs.shape[:-2]
    out_h, out_w = height // p1, width // p2
    blocks = inputs.reshape(*lead, out_h, p1, out_w, p2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, out_h, out_w, p1 * p2)
    winner = np.argmax(blocks, axis=-1)
    pooled = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    rows = np.arange(out_h)[:, None] * p1 + winner // p2
    cols = np.arange(out_w)[None, :] * p2 + winner % p2
    return pooled, PoolIndexMap(shape=pooled.shape, rows=rows, cols=cols, pool=(p1, p2))


def unpool2d(inputs, indices, out_shape):
    """
    Write each pooled value back to its remembered argmax position.

    Args:
        inputs (Tensor): Pooled values, shape ``indices.shape``
        indices (PoolIndexMap): Map produced by ``maxpool2d``
        out_shape (tuple): Pre-pooling shape ``[..., C, H, W]``

    Returns:
        Tensor: ``out_shape`` tensor, zero except at the argmax positions
    """
    inputs = as_tensor(inputs)
    out_shape = tuple(out_shape)
    if inputs.shape != tuple(indices.shape):
        raise DimensionError(f"unpool input shape {inputs.shape} differs from index map shape {indices.shape}")
    if out_shape[:-2] != inputs.shape[:-2]:
        raise DimensionError(f"leading axes of out_shape {out_shape} do not match input {inputs.shape}")
    height, width = out_shape[-2:]
    rows, cols = indices.rows, indices.cols
    if rows.size and (rows.min() < 0 or rows.max() >= height or cols.min() < 0 or cols.max() >= width):
        raise CorruptionError(f"pool index map points outside the {height}x{width} output")

    lead = inputs.shape[:-2]
    flat_index = (rows * width + cols).reshape(*lead, -1)
    out = np.zeros((*lead, height * width), dtype=DTYPE)
    np.put_along_axis(out, flat_index, inputs.reshape(*lead, -1), axis=-1)
    return out.reshape(out_shape)


def flip2(kernel):
    """Reverse the last two axes of ``kernel`` (a copy)."""
    kernel = as_tensor(kernel)
    if kernel.ndim < 2:
        raise DimensionError(f"flip2 needs at least 2 axes, got shape {kernel.shape}")
    return kernel[..., ::-1, ::-1].copy()
