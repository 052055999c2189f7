"""
Adaptation strategies: how a target network's starting parameters (and loss)
are derived from a prior model.

    RESET      fresh initialisation, prior ignored
    RESET_PRF  fresh initialisation plus prior regularisation on the
               convolutional kernels
    REUSE_ALL  every prior parameter except the output layer
    REUSE_CF   only the convolutional kernels (all convolution stages)

Every strategy starts from the same ``init_params(target_spec, seed)`` draw and
overwrites addresses from the prior, so parameters a strategy does not copy
are bit-identical across strategies of one run.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Optional

import numpy as np

from errors import ConfigError, TransferError
from model import PriorBinding, Task, convert_spec, init_params

logger = logging.getLogger(__name__)


class StrategyKind(str, Enum):
    RESET = "RESET"
    RESET_PRF = "RESET_PRF"
    REUSE_ALL = "REUSE_ALL"
    REUSE_CF = "REUSE_CF"


@dataclass(frozen=True)
class AdaptationStrategy:
    """
    One adaptation strategy and the task its prior model was trained on.

    Attributes:
        kind (StrategyKind): Strategy
        prior_task (Task, optional): CL, AE or MT; None for RESET
        prf_lambda (float, optional): Prior regularisation coefficient (RESET_PRF only)
    """

    kind: StrategyKind
    prior_task: Optional[Task] = None
    prf_lambda: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.prior_task is not None:
            object.__setattr__(self, "prior_task", Task(self.prior_task))
        if self.kind is StrategyKind.RESET:
            object.__setattr__(self, "prior_task", None)
        elif self.prior_task is None:
            raise ConfigError(f"{self.kind.value} needs a prior task (CL, AE or MT)")
        if self.kind is StrategyKind.RESET_PRF and (self.prf_lambda is None or self.prf_lambda <= 0):
            raise ConfigError(f"RESET_PRF needs prf_lambda > 0, got {self.prf_lambda}")

    @property
    def needs_prior(self):
        return self.kind is not StrategyKind.RESET

    @property
    def label(self):
        """Table label, e.g. ``REUSE_CF(CL)``."""
        if self.prior_task is None:
            return self.kind.value
        return f"{self.kind.value}({self.prior_task.value})"


@dataclass(frozen=True)
class PriorSnapshot:
    """Read-only convolutional kernels of a prior model, keyed by ``(layer_id, "kernels")``."""

    filters: MappingProxyType

    def __len__(self):
        return len(self.filters)


@dataclass
class TargetInit:
    params: object
    prior_binding: Optional[PriorBinding] = None


def extract_prior_filters(prior):
    """
    Snapshot the convolutional kernels of a prior checkpoint.

    Args:
        prior (model.Checkpoint): Prior model

    Returns:
        PriorSnapshot: Read-only copies of every encoder convolution's kernels
    """
    conv_ids = prior.spec.conv_ids
    if not conv_ids:
        raise TransferError("prior model has no convolutional layer to take filters from")
    filters = {}
    for layer_id in conv_ids:
        kernels = np.array(prior.params[(layer_id, "kernels")], copy=True)
        kernels.setflags(write=False)
        filters[(layer_id, "kernels")] = kernels
    return PriorSnapshot(filters=MappingProxyType(filters))


def _check_kernels(snapshot, target_spec):
    target_conv = target_spec.conv_ids
    shapes = dict(target_spec.param_addresses())
    if len(snapshot.filters) != len(target_conv):
        raise TransferError(
            f"prior has {len(snapshot.filters)} convolutional layers, target has {len(target_conv)}"
        )
    for layer_id in target_conv:
        key = (layer_id, "kernels")
        if key not in snapshot.filters:
            raise TransferError(f"layer {layer_id}: prior has no convolution at this position")
        if snapshot.filters[key].shape != tuple(shapes[key]):
            raise TransferError(
                f"layer {layer_id}: prior kernels {snapshot.filters[key].shape} do not fit target {tuple(shapes[key])}"
            )


def prepare_target(strategy, prior, target_spec, seed):
    """
    Starting parameters and loss augmentation of a target network.

    Args:
        strategy (AdaptationStrategy): Strategy to apply
        prior (model.Checkpoint or None): Prior model; required unless RESET
        target_spec (model.NetworkSpec): Target network
        seed (int): Initialisation seed shared by all strategies of a run

    Returns:
        TargetInit: Parameters and an optional ``PriorBinding``
    """
    if strategy.needs_prior and prior is None:
        raise ConfigError(f"{strategy.label} needs a prior checkpoint")
    params = init_params(target_spec, seed)
    if strategy.kind is StrategyKind.RESET:
        return TargetInit(params=params)

    snapshot = extract_prior_filters(prior)
    _check_kernels(snapshot, target_spec)

    if strategy.kind is StrategyKind.RESET_PRF:
        return TargetInit(params=params, prior_binding=PriorBinding(snapshot=snapshot.filters,
                                                                    lam=strategy.prf_lambda))

    if strategy.kind is StrategyKind.REUSE_CF:
        for key, kernels in snapshot.filters.items():
            params[key] = np.array(kernels, copy=True)
        return TargetInit(params=params)

    # REUSE_ALL: put the prior in the target's layout first; tied decoders own
    # nothing, so the conversion never has to invent parameters.
    converted = convert_spec(prior.spec, target_spec.task, target_spec.num_classes, target_spec.alpha_mt)
    if converted.encoder_ids != target_spec.encoder_ids:
        raise TransferError(
            f"prior encoder has {len(converted.encoder_ids)} layers, target has {len(target_spec.encoder_ids)}"
        )
    target_shapes = dict(target_spec.param_addresses())
    output_id = target_spec.head_id
    copied = 0
    for key, shape in converted.param_addresses():
        if key[0] == output_id or key not in prior.params or key not in target_shapes:
            continue
        if prior.params[key].shape != tuple(target_shapes[key]):
            raise TransferError(f"layer {key[0]}: prior '{key[1]}' {prior.params[key].shape} does not fit "
                                f"target {tuple(target_shapes[key])}")
        params[key] = np.array(prior.params[key], copy=True)
        copied += 1
    logger.debug("%s copied %d prior tensors", strategy.label, copied)
    return TargetInit(params=params)
