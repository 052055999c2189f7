"""
Network assembly, initialisation, whole-network training passes, CNN/CAE
conversion and checkpoint persistence.

A ``NetworkSpec`` is an ordered tuple of layer specs plus the task the network
is trained for. Layer ids are positions in that tuple and never change when a
network is converted between tasks, so a parameter address
``(layer_id, name)`` means the same thing in every conversion of a network.

Network layouts::

    CL: encoder..., Dense(num_classes, softmax)
    AE: encoder..., decoder...              (decoders tied to encoder ids)
    MT: encoder..., Dense(num_classes, softmax), decoder...

The encoder is everything before the classifier head or the first decoder.
"""

import json
import logging
import struct
from collections.abc import MutableMapping
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

import layers as L
from errors import (
    ConfigError,
    CorruptHeaderError,
    DimensionError,
    IncompatibleCheckpointError,
    TruncatedCheckpointError,
    UsageError,
    VersionMismatchError,
)
from layers import ActivationKind, TiedContext
from losses import (
    LossTerm,
    RegConfig,
    batch_hoyer_grad,
    batch_hoyer_penalty,
    cce,
    cce_grad,
    check_alpha,
    l2_grad,
    l2_penalty,
    mse,
    mse_grad,
    prior_reg,
    prior_reg_grad,
    total_loss,
)
from tensor import as_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CVADAPT\x00"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

WEIGHT_NAMES = ("kernels", "weights")


class Task(str, Enum):
    CL = "CL"
    AE = "AE"
    MT = "MT"


@dataclass(frozen=True)
class NetworkSpec:
    """
    Declarative description of a network.

    Attributes:
        input_shape (tuple): Item shape ``(C, H, W)``
        layers (tuple): Ordered ``LayerSpec`` values
        task (Task): What the network is trained for
        num_classes (int, optional): Classes of the softmax head (CL and MT)
        alpha_mt (float, optional): Reconstruction weight of the MT loss
        reg (RegConfig): Regulariser coefficients
    """

    input_shape: tuple
    layers: tuple
    task: Task
    num_classes: Optional[int] = None
    alpha_mt: Optional[float] = None
    reg: RegConfig = field(default_factory=RegConfig)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "task", Task(self.task))
        self._validate()

    # ------------------------------------------------------------ structure

    @property
    def head_id(self):
        """Id of the softmax classifier layer, or None."""
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense" and spec.act is ActivationKind.SOFTMAX:
                return i
        return None

    @property
    def decoder_ids(self):
        return tuple(i for i, spec in enumerate(self.layers) if L.is_tied(spec))

    @property
    def encoder_ids(self):
        stops = [i for i in (self.head_id, *self.decoder_ids) if i is not None]
        end = min(stops) if stops else len(self.layers)
        return tuple(range(end))

    @property
    def conv_ids(self):
        return tuple(i for i in self.encoder_ids if self.layers[i].kind == "conv")

    @property
    def sparsity_id(self):
        """Id of the layer whose output leaves the convolutional stage, or None."""
        stage = [i for i in self.encoder_ids if self.layers[i].kind in ("conv", "maxpool")]
        return stage[-1] if stage else None

    def predecessor(self, layer_id):
        """Id of the layer feeding ``layer_id`` (-1 for the network input)."""
        decoders = self.decoder_ids
        if self.task is Task.MT and decoders and layer_id == decoders[0]:
            return self.encoder_ids[-1]
        return layer_id - 1

    def layer_shapes(self):
        """List of ``(in_shape, out_shape)`` per layer, item shapes without the batch axis."""
        shapes = []
        for i, spec in enumerate(self.layers):
            pred = self.predecessor(i)
            in_shape = self.input_shape if pred < 0 else shapes[pred][1]
            tied_in = shapes[spec.tied_to][0] if L.is_tied(spec) else None
            shapes.append((in_shape, L.output_shape(spec, in_shape, tied_in)))
        return shapes

    def param_addresses(self):
        """Canonical ``(layer_id, name)`` order of all owned parameters with their shapes."""
        out = []
        for i, (spec, (in_shape, _)) in enumerate(zip(self.layers, self.layer_shapes())):
            for name, shape in L.param_shapes(spec, in_shape).items():
                out.append(((i, name), shape))
        return out

    def output_shape(self):
        shapes = self.layer_shapes()
        if self.task is Task.CL:
            return shapes[self.head_id][1]
        return shapes[self.decoder_ids[-1]][1]

    def _validate(self):
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        encoder = set(self.encoder_ids)
        mirror_of = {"dense_decode": "dense", "conv_decode": "conv", "unpool": "maxpool"}
        for i, spec in enumerate(self.layers):
            if L.is_tied(spec):
                target = spec.tied_to
                if target not in encoder or self.layers[target].kind != mirror_of[spec.kind]:
                    raise ConfigError(f"layer {i} ({spec.kind}) is tied to {target}, which is not a matching encoder layer")
            elif getattr(spec, "act", None) is ActivationKind.SOFTMAX and i != self.head_id:
                raise ConfigError(f"layer {i}: softmax is only allowed on the classifier output layer")
        shapes = self.layer_shapes()

        head, decoders = self.head_id, self.decoder_ids
        if self.task in (Task.CL, Task.MT):
            if head is None:
                raise ConfigError(f"{self.task.value} network needs a softmax classifier layer")
            if self.num_classes is None or shapes[head][1] != (self.num_classes,):
                raise ConfigError(f"classifier layer has {shapes[head][1]} outputs, expected {self.num_classes}")
        if self.task is Task.CL and (decoders or head != len(self.layers) - 1):
            raise ConfigError("CL network must end with its classifier layer and have no decoder")
        if self.task in (Task.AE, Task.MT):
            if not decoders:
                raise ConfigError(f"{self.task.value} network needs decoder layers")
            if shapes[decoders[-1]][1] != self.input_shape:
                raise DimensionError(f"decoder output {shapes[decoders[-1]][1]} does not reproduce input {self.input_shape}")
        if self.task is Task.AE and head is not None:
            raise ConfigError("AE network must not have a classifier layer")
        if self.task is Task.MT:
            check_alpha(self.alpha_mt)
            if head != decoders[0] - 1:
                raise ConfigError("MT network must place its classifier layer between encoder and decoder")


class ParamSet(MutableMapping):
    """
    Learnable parameters addressed by ``(layer_id, name)``.

    Tied decoder layers own no entries.
    """

    def __init__(self, tensors=None):
        self._tensors = {}
        for key, value in (tensors or {}).items():
            self[key] = value

    def __getitem__(self, key):
        return self._tensors[key]

    def __setitem__(self, key, value):
        self._tensors[tuple(key)] = as_tensor(value)

    def __delitem__(self, key):
        del self._tensors[key]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        shapes = ", ".join(f"{k}: {v.shape}" for k, v in self._tensors.items())
        return f"ParamSet({shapes})"

    def layer(self, layer_id):
        """The ``{name: tensor}`` parameters of one layer."""
        return {name: value for (lid, name), value in self._tensors.items() if lid == layer_id}

    def copy(self):
        return ParamSet({key: np.array(value, copy=True) for key, value in self._tensors.items()})

    def weights(self):
        """Weight tensors (kernels and dense weights), biases excluded."""
        return {key: value for key, value in self._tensors.items() if key[1] in WEIGHT_NAMES}


# ---------------------------------------------------------------- architectures


def classifier_spec(input_shape, conv_stages, hidden_units, num_classes, act=ActivationKind.SIGMOID,
                    dropout_p=0.5, reg=None):
    """
    Build a CNN classifier: conv/pool stages, dropout, one hidden dense layer and a softmax layer.

    Args:
        input_shape (tuple): Item shape ``(C, H, W)``
        conv_stages (list): ``(maps, kernel_size)`` per convolution, each followed by 2x2 max-pooling
        hidden_units (int): Units of the hidden dense layer
        num_classes (int): Softmax units
        act (ActivationKind): Activation of the convolutional and hidden layers
        dropout_p (float): Dropout after the convolutional stage
        reg (RegConfig, optional): Regulariser coefficients

    Returns:
        NetworkSpec: A CL network
    """
    stack = []
    for maps, size in conv_stages:
        stack += [L.Conv(maps, size, size, act), L.MaxPool(2, 2)]
    stack += [L.Dropout(dropout_p), L.Dense(hidden_units, act), L.Dense(num_classes, ActivationKind.SOFTMAX)]
    return NetworkSpec(input_shape, tuple(stack), Task.CL, num_classes=num_classes, reg=reg or RegConfig())


ARCHITECTURES = {
    "mnist": {"input_shape": (1, 28, 28), "conv_stages": [(32, 5)], "hidden_units": 40,
              "act": ActivationKind.SIGMOID},
    "cifar10": {"input_shape": (3, 32, 32), "conv_stages": [(32, 5)], "hidden_units": 40,
                "act": ActivationKind.SIGMOID},
    "composers": {"input_shape": (1, 68, 400), "conv_stages": [(9, 9), (5, 5)], "hidden_units": 256,
                  "act": ActivationKind.RELU},
}


def architecture_spec(dataset, num_classes, reg=None, dropout_p=0.5, maps=None, hidden_units=None):
    """
    Classifier spec for one of the built-in data sets.

    ``maps`` and ``hidden_units`` override the first convolution's map count and
    the hidden layer size for scaled-down runs.
    """
    if dataset not in ARCHITECTURES:
        raise ConfigError(f"no architecture for dataset {dataset!r}; known: {sorted(ARCHITECTURES)}")
    arch = ARCHITECTURES[dataset]
    stages = list(arch["conv_stages"])
    if maps is not None:
        stages[0] = (maps, stages[0][1])
    return classifier_spec(arch["input_shape"], stages, hidden_units or arch["hidden_units"], num_classes,
                           act=arch["act"], dropout_p=dropout_p, reg=reg)


# ---------------------------------------------------------------- conversions


def _decoder_activation(spec, layer_id):
    """Activation that reproduces the input of encoder layer ``layer_id``."""
    for i in range(layer_id - 1, -1, -1):
        act = getattr(spec.layers[i], "act", None)
        if act is not None:
            return act
    return ActivationKind.SIGMOID


def _mirror(spec, encoder_ids):
    decoder = []
    for i in reversed(encoder_ids):
        layer = spec.layers[i]
        if layer.kind == "dense":
            decoder.append(L.DenseDecode(i, _decoder_activation(spec, i)))
        elif layer.kind == "conv":
            decoder.append(L.ConvDecode(i, _decoder_activation(spec, i)))
        elif layer.kind == "maxpool":
            decoder.append(L.Unpool(i))
    return decoder


def build_cae_from_cnn(spec):
    """
    Turn a CNN classifier into a convolutional autoencoder.

    The classification layer is dropped and each encoder layer is mirrored in
    reverse order by a tied, bias-free decoder: ``DenseDecode`` for dense
    layers, ``ConvDecode`` for convolutions and ``Unpool`` for max-pooling.
    Dropout has no mirror.

    Args:
        spec (NetworkSpec): A CL network

    Returns:
        NetworkSpec: An AE network with the same encoder ids
    """
    if spec.task is not Task.CL:
        raise UsageError(f"build_cae_from_cnn needs a CL network, got {spec.task.value}")
    encoder = spec.encoder_ids
    stack = [spec.layers[i] for i in encoder] + _mirror(spec, encoder)
    return NetworkSpec(spec.input_shape, tuple(stack), Task.AE, reg=spec.reg)


def build_cnn_from_cae(spec, num_classes):
    """
    Turn a convolutional autoencoder into a CNN classifier.

    The decoder layers are removed and a softmax layer with ``num_classes``
    units is appended.

    Args:
        spec (NetworkSpec): An AE network
        num_classes (int): Softmax units of the new output layer

    Returns:
        NetworkSpec: A CL network with the same encoder ids
    """
    if spec.task is not Task.AE:
        raise UsageError(f"build_cnn_from_cae needs an AE network, got {spec.task.value}")
    stack = [spec.layers[i] for i in spec.encoder_ids] + [L.Dense(num_classes, ActivationKind.SOFTMAX)]
    return NetworkSpec(spec.input_shape, tuple(stack), Task.CL, num_classes=num_classes, reg=spec.reg)


def build_mt_from_cnn(spec, alpha_mt):
    """Shared-encoder multi-task network: the CNN's classifier head followed by the mirrored decoder."""
    if spec.task is not Task.CL:
        raise UsageError(f"build_mt_from_cnn needs a CL network, got {spec.task.value}")
    encoder = spec.encoder_ids
    stack = [spec.layers[i] for i in encoder] + [spec.layers[spec.head_id]] + _mirror(spec, encoder)
    return NetworkSpec(spec.input_shape, tuple(stack), Task.MT, num_classes=spec.num_classes,
                       alpha_mt=alpha_mt, reg=spec.reg)


def convert_spec(spec, task, num_classes=None, alpha_mt=None):
    """
    Convert ``spec`` to the layout of ``task`` keeping its encoder.

    Args:
        spec (NetworkSpec): Any network
        task (Task): Layout wanted
        num_classes (int, optional): Classes for CL/MT targets; defaults to the source's
        alpha_mt (float, optional): MT weight; defaults to the source's or 0.01

    Returns:
        NetworkSpec: Converted network
    """
    task = Task(task)
    num_classes = num_classes or spec.num_classes
    if spec.task is task and (task is Task.AE or spec.num_classes == num_classes):
        return spec
    if spec.task is Task.CL:
        base = spec if spec.num_classes == num_classes else build_cnn_from_cae(build_cae_from_cnn(spec), num_classes)
    elif spec.task is Task.AE:
        if task is Task.AE:
            return spec
        base = build_cnn_from_cae(spec, num_classes)
    else:
        stack = [spec.layers[i] for i in spec.encoder_ids] + [L.Dense(num_classes, ActivationKind.SOFTMAX)]
        base = NetworkSpec(spec.input_shape, tuple(stack), Task.CL, num_classes=num_classes, reg=spec.reg)
    if task is Task.CL:
        return base
    if task is Task.AE:
        return build_cae_from_cnn(base)
    return build_mt_from_cnn(base, alpha_mt if alpha_mt is not None else (spec.alpha_mt or 0.01))


def with_reg(spec, reg):
    return replace(spec, reg=reg)


# ---------------------------------------------------------------- initialisation


def init_params(spec, seed):
    """
    Glorot-uniform weights, zero biases.

    Weights of each layer are drawn from ``U(-b, b)`` with
    ``b = sqrt(6 / (fan_in + fan_out))``, in layer order from one generator.

    Args:
        spec (NetworkSpec): The network
        seed (int or numpy.random.Generator): Seed of the draw

    Returns:
        ParamSet: Fresh parameters
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = ParamSet()
    shapes = spec.layer_shapes()
    for (layer_id, name), shape in spec.param_addresses():
        if name == "bias":
            params[(layer_id, name)] = np.zeros(shape)
            continue
        fan_in, fan_out = L.fan_in_out(spec.layers[layer_id], shapes[layer_id][0])
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[(layer_id, name)] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------- forward / backward


@dataclass
class NetworkOutput:
    """
    Result of a whole-network forward pass.

    Attributes:
        probs (Tensor, optional): ``[N, num_classes]`` (CL and MT)
        recon (Tensor, optional): ``[N, *input_shape]`` (AE and MT)
        code (Tensor): Encoder output
        caches (dict): Layer id to ``ForwardCache``
        sparsity_activations (Tensor, optional): Output of the convolutional stage
    """

    probs: Optional[np.ndarray]
    recon: Optional[np.ndarray]
    code: np.ndarray
    caches: dict
    sparsity_activations: Optional[np.ndarray]


def _tied_context(spec, params, layer_id, caches, shapes):
    target = spec.layers[layer_id].tied_to
    return TiedContext(params=params.layer(target), in_shape=shapes[target][0], cache=caches.get(target))


def forward_network(spec, params, batch, mode=L.TRAIN, rng=None):
    """
    Run the whole network over a batch.

    Args:
        spec (NetworkSpec): The network
        params (ParamSet): Its parameters
        batch (Tensor): ``[N, *input_shape]``
        mode (str): ``"train"`` or ``"eval"``
        rng (numpy.random.Generator, optional): Dropout masks in train mode

    Returns:
        NetworkOutput: Heads, caches and the sparsity activations
    """
    batch = as_tensor(batch)
    if batch.shape[1:] != spec.input_shape:
        raise DimensionError(f"batch item shape {batch.shape[1:]} does not match network input {spec.input_shape}")
    shapes = spec.layer_shapes()
    caches = {}
    x = batch
    sparsity = None
    for i in spec.encoder_ids:
        x, caches[i] = L.forward(spec.layers[i], params.layer(i), x, mode, rng)
        if i == spec.sparsity_id:
            sparsity = x
    code = x

    probs = recon = None
    if spec.head_id is not None:
        probs, caches[spec.head_id] = L.forward(spec.layers[spec.head_id], params.layer(spec.head_id), code, mode, rng)
    if spec.decoder_ids:
        x = code
        for i in spec.decoder_ids:
            tied = _tied_context(spec, params, i, caches, shapes)
            x, caches[i] = L.forward(spec.layers[i], {}, x, mode, rng, tied=tied)
        recon = x
    return NetworkOutput(probs=probs, recon=recon, code=code, caches=caches, sparsity_activations=sparsity)


@dataclass(frozen=True)
class PriorBinding:
    """Prior regularisation bound to a snapshot of prior parameters."""

    snapshot: dict
    lam: float


def _accumulate(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def loss_and_grad(spec, params, inputs, targets=None, mode=L.TRAIN, rng=None, prior=None, compute_grad=True):
    """
    Total loss of a batch and, optionally, its gradient.

    The total is the task loss (CCE for CL, MSE against the input for AE,
    their scalarised mix for MT) plus L2 weight decay, prior regularisation
    when ``prior`` is given, and the Hoyer sparseness penalty on the output of
    the convolutional stage.

    Args:
        spec (NetworkSpec): The network
        params (ParamSet): Its parameters
        inputs (Tensor): ``[N, *input_shape]``
        targets (Tensor, optional): ``[N, num_classes]`` one-hot rows (CL and MT)
        mode (str): ``"train"`` or ``"eval"``; gradients need train mode
        rng (numpy.random.Generator, optional): Dropout masks
        prior (PriorBinding, optional): Prior regularisation
        compute_grad (bool): Whether to run the backward pass

    Returns:
        tuple: ``(total, terms, grads)``; ``grads`` is None when not computed
    """
    reg = spec.reg
    if reg.prior_lambda > 0 and prior is None:
        raise ConfigError("prior_lambda > 0 needs a prior snapshot")
    out = forward_network(spec, params, inputs, mode, rng)
    terms = []
    grad_probs = grad_recon = None

    if spec.task is Task.CL:
        terms.append(LossTerm("cce", cce(out.probs, targets)))
        grad_probs = cce_grad(out.probs, targets) if compute_grad else None
    elif spec.task is Task.AE:
        terms.append(LossTerm("mse", mse(out.recon, inputs)))
        grad_recon = mse_grad(out.recon, inputs) if compute_grad else None
    else:
        alpha = spec.alpha_mt
        l_cl, l_ae = cce(out.probs, targets), mse(out.recon, inputs)
        terms.append(LossTerm("multitask", (1.0 - alpha) * l_cl + alpha * l_ae))
        if compute_grad:
            grad_probs = (1.0 - alpha) * cce_grad(out.probs, targets)
            grad_recon = alpha * mse_grad(out.recon, inputs)

    weights = params.weights()
    if reg.l2_lambda > 0:
        terms.append(LossTerm("l2", l2_penalty(weights.values(), reg.l2_lambda), "parameters"))
    if prior is not None:
        live = {key: params[key] for key in prior.snapshot}
        terms.append(LossTerm("prior", prior_reg(live, prior.snapshot, prior.lam), "parameters"))
    use_sparsity = reg.sparsity_coeff > 0 and out.sparsity_activations is not None
    if use_sparsity:
        terms.append(LossTerm("sparsity", batch_hoyer_penalty(out.sparsity_activations, reg.sparsity_coeff,
                                                              reg.sparsity_target)))
    total = total_loss(terms)
    if not compute_grad:
        return total, terms, None

    grads = _backward_network(spec, params, out, grad_probs, grad_recon,
                              batch_hoyer_grad(out.sparsity_activations, reg.sparsity_coeff, reg.sparsity_target)
                              if use_sparsity else None)
    if reg.l2_lambda > 0:
        for key, value in weights.items():
            _accumulate(grads, key, l2_grad(value, reg.l2_lambda))
    if prior is not None:
        for key, value in prior_reg_grad(live, prior.snapshot, prior.lam).items():
            _accumulate(grads, key, value)
    return total, terms, grads


def _backward_network(spec, params, out, grad_probs, grad_recon, grad_sparsity):
    shapes = spec.layer_shapes()
    caches = out.caches
    grads = {}
    grad_code = np.zeros_like(out.code)

    def collect(layer_id, layer_grads):
        for name, value in layer_grads.items():
            _accumulate(grads, (layer_id, name), value)

    if grad_recon is not None:
        g = grad_recon
        for i in reversed(spec.decoder_ids):
            tied = _tied_context(spec, params, i, caches, shapes)
            g, layer_grads = L.backward(spec.layers[i], {}, caches[i], g, tied=tied)
            collect(spec.layers[i].tied_to, layer_grads)
        grad_code = grad_code + g
    if grad_probs is not None:
        head = spec.head_id
        g, layer_grads = L.backward(spec.layers[head], params.layer(head), caches[head], grad_probs)
        collect(head, layer_grads)
        grad_code = grad_code + g

    g = grad_code
    for i in reversed(spec.encoder_ids):
        if i == spec.sparsity_id and grad_sparsity is not None:
            g = g + grad_sparsity
        g, layer_grads = L.backward(spec.layers[i], params.layer(i), caches[i], g)
        collect(i, layer_grads)
    return grads


def predict(spec, params, inputs):
    """Eval-mode forward pass; returns the ``NetworkOutput``."""
    return forward_network(spec, params, inputs, mode=L.EVAL)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParamSet
    metadata: dict = field(default_factory=dict)


def spec_to_dict(spec):
    """JSON-ready description of a spec."""
    layers = []
    for layer in spec.layers:
        entry = {"kind": layer.kind}
        for key, value in asdict(layer).items():
            entry[key] = value.value if isinstance(value, Enum) else value
        layers.append(entry)
    return {
        "input_shape": list(spec.input_shape),
        "layers": layers,
        "task": spec.task.value,
        "num_classes": spec.num_classes,
        "alpha_mt": spec.alpha_mt,
        "reg": asdict(spec.reg),
    }


def spec_from_dict(data):
    stack = []
    for entry in data["layers"]:
        entry = dict(entry)
        kind = entry.pop("kind")
        if kind not in L.LAYER_TYPES:
            raise CorruptHeaderError(f"unknown layer kind in checkpoint: {kind!r}")
        if "act" in entry:
            entry["act"] = ActivationKind(entry["act"])
        stack.append(L.LAYER_TYPES[kind](**entry))
    return NetworkSpec(
        input_shape=tuple(data["input_shape"]),
        layers=tuple(stack),
        task=Task(data["task"]),
        num_classes=data.get("num_classes"),
        alpha_mt=data.get("alpha_mt"),
        reg=RegConfig(**data.get("reg", {})),
    )


def canonical_spec_text(spec):
    return json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, spec, params, metadata=None):
    """
    Write a checkpoint.

    Layout: 8-byte magic, little-endian uint32 format version, uint64 header
    length, a canonical JSON header (spec, metadata and the parameter table),
    then every parameter as raw little-endian float64 in the spec's canonical
    address order.

    Args:
        path (str or Path): Destination file
        spec (NetworkSpec): The network
        params (ParamSet): Its parameters
        metadata (dict, optional): JSON-serialisable run metadata
    """
    path = Path(path)
    table = []
    arrays = []
    for (layer_id, name), shape in spec.param_addresses():
        if (layer_id, name) not in params:
            raise UsageError(f"parameter ({layer_id}, {name}) missing from the parameter set")
        value = params[(layer_id, name)]
        if value.shape != tuple(shape):
            raise DimensionError(f"parameter ({layer_id}, {name}) has shape {value.shape}, spec says {tuple(shape)}")
        table.append([layer_id, name, list(shape)])
        arrays.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    header = json.dumps({"spec": spec_to_dict(spec), "metadata": metadata or {}, "params": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in arrays:
            f.write(blob)
    tmp.replace(path)
    logger.debug("saved checkpoint %s (%d tensors)", path, len(arrays))


def load_checkpoint(path, expect=None):
    """
    Read a checkpoint written by ``save_checkpoint``.

    Args:
        path (str or Path): Checkpoint file
        expect (NetworkSpec, optional): Network the caller will use the
            parameters with; every one of its parameter shapes must match

    Returns:
        Checkpoint: Spec, parameters and metadata
    """
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise TruncatedCheckpointError(f"{path}: file shorter than the checkpoint preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"{path}: not a convadapt checkpoint")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    start = _PREAMBLE.size
    if len(raw) < start + header_len:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
        spec = spec_from_dict(header["spec"])
        table = header["params"]
        metadata = header.get("metadata", {})
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CorruptHeaderError(f"{path}: unreadable header ({e})") from e

    expected_table = [[lid, name, list(shape)] for (lid, name), shape in spec.param_addresses()]
    if table != expected_table:
        raise CorruptHeaderError(f"{path}: parameter table disagrees with the stored spec")

    offset = start + header_len
    params = ParamSet()
    for layer_id, name, shape in table:
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise TruncatedCheckpointError(f"{path}: data of parameter ({layer_id}, {name}) is truncated")
        params[(layer_id, name)] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CorruptHeaderError(f"{path}: {len(raw) - offset} trailing bytes after parameter data")

    if expect is not None:
        for key, shape in expect.param_addresses():
            if key in params and params[key].shape != tuple(shape):
                raise IncompatibleCheckpointError(
                    f"{path}: parameter {key} has shape {params[key].shape}, expected {tuple(shape)}"
                )
        if spec.input_shape != expect.input_shape:
            raise IncompatibleCheckpointError(
                f"{path}: checkpoint input shape {spec.input_shape} differs from expected {expect.input_shape}"
            )
    return Checkpoint(spec=spec, params=ParamSet({k: v.copy() for k, v in params.items()}), metadata=metadata)
