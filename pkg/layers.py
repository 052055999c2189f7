"""
Differentiable layer catalogue.

Each layer kind is a small frozen dataclass describing the layer; ``forward``
and ``backward`` dispatch on it. Parameters live outside the specs (see
``model.ParamSet``) and are passed in as a ``{name: Tensor}`` dict. All
functions work on batches whose first axis is the item axis.

Decoder layers (``DenseDecode``, ``ConvDecode``, ``Unpool``) own no weights:
they read the weights, input shape and pooling memory of the encoder layer they
are tied to through a ``TiedContext``, and their weight gradients are reported
under the encoder's parameter names.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Optional, Union

import numpy as np

from errors import ConfigError, DimensionError, UsageError
from tensor import (
    PoolIndexMap,
    as_tensor,
    conv2d_full,
    conv2d_kernel_grad,
    conv2d_valid,
    maxpool2d,
    unpool2d,
)

TRAIN = "train"
EVAL = "eval"


class ActivationKind(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


@dataclass(frozen=True)
class Conv:
    maps: int
    h1: int
    h2: int
    act: ActivationKind = ActivationKind.SIGMOID
    kind: ClassVar[str] = "conv"

    def __post_init__(self):
        if self.maps < 1 or self.h1 < 1 or self.h2 < 1:
            raise ConfigError(f"Conv needs positive maps and kernel extents, got {self}")


@dataclass(frozen=True)
class MaxPool:
    p1: int = 2
    p2: int = 2
    kind: ClassVar[str] = "maxpool"

    def __post_init__(self):
        if self.p1 < 1 or self.p2 < 1:
            raise ConfigError(f"MaxPool needs positive pool extents, got {self}")


@dataclass(frozen=True)
class Dense:
    units: int
    act: ActivationKind = ActivationKind.SIGMOID
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        if self.units < 1:
            raise ConfigError(f"Dense needs at least one unit, got {self.units}")


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"Dropout probability must be in [0, 1), got {self.p}")


@dataclass(frozen=True)
class DenseDecode:
    tied_to: int
    act: ActivationKind = ActivationKind.SIGMOID
    kind: ClassVar[str] = "dense_decode"


@dataclass(frozen=True)
class ConvDecode:
    tied_to: int
    act: ActivationKind = ActivationKind.SIGMOID
    kind: ClassVar[str] = "conv_decode"


@dataclass(frozen=True)
class Unpool:
    tied_to: int
    kind: ClassVar[str] = "unpool"


LayerSpec = Union[Conv, MaxPool, Dense, Dropout, DenseDecode, ConvDecode, Unpool]

LAYER_TYPES = {cls.kind: cls for cls in (Conv, MaxPool, Dense, Dropout, DenseDecode, ConvDecode, Unpool)}

TIED_KINDS = ("dense_decode", "conv_decode", "unpool")


def is_tied(spec):
    return spec.kind in TIED_KINDS


@dataclass
class ForwardCache:
    """What a layer's backward pass needs from its forward pass."""

    inputs: np.ndarray
    pre_activation: Optional[np.ndarray] = None
    outputs: Optional[np.ndarray] = None
    pool_map: Optional[PoolIndexMap] = None
    mask: Optional[np.ndarray] = None
    training: bool = False


@dataclass
class TiedContext:
    """The encoder layer a decoder layer is tied to."""

    params: dict = field(default_factory=dict)
    in_shape: tuple = ()
    cache: Optional[ForwardCache] = None


# ---------------------------------------------------------------- activations


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activate(kind, z):
    """
    Apply an activation function.

    Sigmoid, Tanh and ReLU act elementwise. Softmax normalises over all
    elements of each item's output (the first axis is the item axis) and
    subtracts the maximum first so large inputs cannot overflow.

    Args:
        kind (ActivationKind): Activation to apply
        z (Tensor): Pre-activations

    Returns:
        Tensor: Activations, same shape as ``z``
    """
    kind = ActivationKind(kind)
    z = as_tensor(z)
    if kind is ActivationKind.SIGMOID:
        return _sigmoid(z)
    if kind is ActivationKind.TANH:
        return np.tanh(z)
    if kind is ActivationKind.RELU:
        return np.maximum(z, 0.0)
    if kind is ActivationKind.SOFTMAX:
        flat = z.reshape(z.shape[0], -1) if z.ndim > 1 else z[None, :]
        shifted = np.exp(flat - flat.max(axis=1, keepdims=True))
        probs = shifted / shifted.sum(axis=1, keepdims=True)
        return probs.reshape(z.shape)
    return z.copy()


def activation_grad(kind, z, y, grad_out):
    """Back-propagate ``grad_out`` through an activation with pre-activation ``z`` and output ``y``."""
    kind = ActivationKind(kind)
    if kind is ActivationKind.SIGMOID:
        return grad_out * y * (1.0 - y)
    if kind is ActivationKind.TANH:
        return grad_out * (1.0 - y * y)
    if kind is ActivationKind.RELU:
        return grad_out * (z > 0)
    if kind is ActivationKind.SOFTMAX:
        flat_y = y.reshape(y.shape[0], -1)
        flat_g = grad_out.reshape(flat_y.shape)
        inner = np.sum(flat_g * flat_y, axis=1, keepdims=True)
        return (flat_y * (flat_g - inner)).reshape(y.shape)
    return grad_out


# ---------------------------------------------------------------- shapes


def output_shape(spec, in_shape, tied_in_shape=None):
    """
    Shape of one item leaving ``spec`` given the item shape entering it.

    Args:
        spec (LayerSpec): The layer
        in_shape (tuple): Item shape entering the layer
        tied_in_shape (tuple, optional): Item input shape of the tied encoder layer

    Returns:
        tuple: Item output shape
    """
    in_shape = tuple(in_shape)
    if spec.kind == "conv":
        if len(in_shape) != 3:
            raise DimensionError(f"Conv expects [C, H, W] input, got {in_shape}")
        _, height, width = in_shape
        if spec.h1 > height:
            raise DimensionError(f"row axis: kernel height {spec.h1} exceeds input height {height}")
        if spec.h2 > width:
            raise DimensionError(f"column axis: kernel width {spec.h2} exceeds input width {width}")
        return (spec.maps, height - spec.h1 + 1, width - spec.h2 + 1)
    if spec.kind == "maxpool":
        if len(in_shape) != 3:
            raise DimensionError(f"MaxPool expects [C, H, W] input, got {in_shape}")
        channels, height, width = in_shape
        if height % spec.p1:
            raise DimensionError(f"row axis: pool height {spec.p1} does not divide {height}")
        if width % spec.p2:
            raise DimensionError(f"column axis: pool width {spec.p2} does not divide {width}")
        return (channels, height // spec.p1, width // spec.p2)
    if spec.kind == "dense":
        return (spec.units,)
    if spec.kind == "dropout":
        return in_shape
    if tied_in_shape is None:
        raise UsageError(f"{spec.kind} layer needs the input shape of its tied layer {spec.tied_to}")
    return tuple(tied_in_shape)


def param_shapes(spec, in_shape):
    """Names and shapes of the parameters a layer owns (empty for tied and parameter-free layers)."""
    if spec.kind == "conv":
        return {"kernels": (spec.maps, in_shape[0], spec.h1, spec.h2), "bias": (spec.maps,)}
    if spec.kind == "dense":
        return {"weights": (int(np.prod(in_shape)), spec.units), "bias": (spec.units,)}
    return {}


def fan_in_out(spec, in_shape):
    """Glorot fan-in and fan-out of a parametric layer."""
    if spec.kind == "conv":
        receptive = spec.h1 * spec.h2
        return in_shape[0] * receptive, spec.maps * receptive
    if spec.kind == "dense":
        return int(np.prod(in_shape)), spec.units
    raise UsageError(f"{spec.kind} layers have no weights to initialise")


# ---------------------------------------------------------------- forward / backward


def _tied_param(tied, name, spec):
    if tied is None or name not in tied.params:
        raise UsageError(f"{spec.kind} layer tied to {spec.tied_to} is missing the encoder '{name}'")
    return tied.params[name]


def forward(spec, params, inputs, mode=TRAIN, rng=None, tied=None):
    """
    Run one layer forward over a batch.

    Args:
        spec (LayerSpec): The layer
        params (dict): The layer's own parameters (empty for tied layers)
        inputs (Tensor): ``[N, ...]`` batch
        mode (str): ``"train"`` or ``"eval"``; dropout is the identity in eval mode
        rng (numpy.random.Generator, optional): Source of dropout masks in train mode
        tied (TiedContext, optional): Encoder context for decoder layers

    Returns:
        tuple: ``(outputs, ForwardCache)``
    """
    if mode not in (TRAIN, EVAL):
        raise UsageError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")
    inputs = as_tensor(inputs)
    cache = ForwardCache(inputs=inputs, training=mode == TRAIN)
    batch = inputs.shape[0]

    if spec.kind == "conv":
        z = conv2d_valid(inputs, params["kernels"], params["bias"])
    elif spec.kind == "dense":
        weights = params["weights"]
        flat = inputs.reshape(batch, -1)
        if flat.shape[1] != weights.shape[0]:
            raise DimensionError(
                f"feature axis mismatch: Dense expects {weights.shape[0]} inputs, got {flat.shape[1]}"
            )
        z = flat @ weights + params["bias"]
    elif spec.kind == "dense_decode":
        weights = _tied_param(tied, "weights", spec)
        if inputs.reshape(batch, -1).shape[1] != weights.shape[1]:
            raise DimensionError(
                f"feature axis mismatch: DenseDecode expects {weights.shape[1]} inputs, "
                f"got {inputs.reshape(batch, -1).shape[1]}"
            )
        z = (inputs.reshape(batch, -1) @ weights.T).reshape(batch, *tied.in_shape)
    elif spec.kind == "conv_decode":
        z = conv2d_full(inputs, _tied_param(tied, "kernels", spec))
    elif spec.kind == "maxpool":
        outputs, cache.pool_map = maxpool2d(inputs, (spec.p1, spec.p2))
        cache.outputs = outputs
        return outputs, cache
    elif spec.kind == "unpool":
        if tied is None or tied.cache is None or tied.cache.pool_map is None:
            raise UsageError(f"unpool layer tied to {spec.tied_to} has no pooling memory")
        outputs = unpool2d(inputs, tied.cache.pool_map, (batch, *tied.in_shape))
        cache.outputs = outputs
        return outputs, cache
    elif spec.kind == "dropout":
        if mode == EVAL or spec.p == 0.0:
            return inputs, cache
        if rng is None:
            raise UsageError("train-mode dropout needs a random generator")
        keep = rng.random(inputs.shape) >= spec.p
        cache.mask = keep / (1.0 - spec.p)
        outputs = inputs * cache.mask
        cache.outputs = outputs
        return outputs, cache
    else:
        raise UsageError(f"Unknown layer kind: {spec.kind}")

    outputs = activate(spec.act, z)
    cache.pre_activation = z
    cache.outputs = outputs
    return outputs, cache


def backward(spec, params, cache, grad_out, tied=None):
    """
    Back-propagate through one layer.

    Args:
        spec (LayerSpec): The layer
        params (dict): The layer's own parameters
        cache (ForwardCache): Cache from the matching train-mode forward call
        grad_out (Tensor): Gradient of the loss with respect to the layer output
        tied (TiedContext, optional): Encoder context for decoder layers

    Returns:
        tuple: ``(grad_in, grad_params)``; for tied layers ``grad_params`` holds
        the gradient of the shared encoder weights under the encoder's names
    """
    if cache is None or not cache.training:
        raise UsageError(f"{spec.kind} backward needs the cache of a train-mode forward pass")
    grad_out = as_tensor(grad_out)
    inputs = cache.inputs
    batch = inputs.shape[0]

    if spec.kind == "maxpool":
        return unpool2d(grad_out, cache.pool_map, inputs.shape), {}
    if spec.kind == "unpool":
        pool_map = tied.cache.pool_map
        width = grad_out.shape[-1]
        flat_index = (pool_map.rows * width + pool_map.cols).reshape(*inputs.shape[:-2], -1)
        flat_grad = grad_out.reshape(*grad_out.shape[:-2], -1)
        return np.take_along_axis(flat_grad, flat_index, axis=-1).reshape(inputs.shape), {}
    if spec.kind == "dropout":
        if cache.mask is None:
            return grad_out, {}
        return grad_out * cache.mask, {}

    grad_z = activation_grad(spec.act, cache.pre_activation, cache.outputs, grad_out)

    if spec.kind == "conv":
        kernels = params["kernels"]
        grads = {
            "kernels": conv2d_kernel_grad(inputs, grad_z, kernels.shape),
            "bias": grad_z.sum(axis=(0, 2, 3)),
        }
        return conv2d_full(grad_z, kernels), grads
    if spec.kind == "dense":
        flat = inputs.reshape(batch, -1)
        weights = params["weights"]
        grads = {"weights": flat.T @ grad_z, "bias": grad_z.sum(axis=0)}
        return (grad_z @ weights.T).reshape(inputs.shape), grads
    if spec.kind == "dense_decode":
        weights = _tied_param(tied, "weights", spec)
        flat_in = inputs.reshape(batch, -1)
        flat_gz = grad_z.reshape(batch, -1)
        return (flat_gz @ weights).reshape(inputs.shape), {"weights": flat_gz.T @ flat_in}
    if spec.kind == "conv_decode":
        kernels = _tied_param(tied, "kernels", spec)
        return conv2d_valid(grad_z, kernels), {"kernels": conv2d_kernel_grad(grad_z, inputs, kernels.shape)}
    raise UsageError(f"Unknown layer kind: {spec.kind}")
