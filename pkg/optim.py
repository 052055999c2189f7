"""
RMSProp with Nesterov momentum, mini-batch epochs and early stopping.

Parameter collections are mappings from a parameter address
``(layer_id, name)`` to a tensor (``model.ParamSet`` or a plain dict).

Update rule, per parameter, with the RMS scaling applied before momentum::

    ms     <- rho * ms + (1 - rho) * g^2
    scaled <- g / sqrt(ms + eps)
    v      <- mu * v - lr * scaled
    theta  <- theta + mu * v - lr * scaled
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ConfigError, TrainingAbortedError

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-9


@dataclass(frozen=True)
class OptimHyper:
    learning_rate: float = 1e-5
    rms_decay: float = 0.9
    momentum: float = 0.5
    epsilon: float = 1e-8
    batch_size: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.rms_decay < 1.0:
            raise ConfigError(f"rms_decay must be in [0, 1), got {self.rms_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class OptimState:
    """
    Per-parameter RMSProp accumulators and momentum buffers.

    Attributes:
        mean_square (dict): Running mean of squared gradients, shaped like theta
        velocity (dict): Momentum buffer, shaped like theta
        hyper (OptimHyper): Optimiser constants
        steps (int): Number of updates applied so far
    """

    mean_square: dict
    velocity: dict
    hyper: OptimHyper
    steps: int = 0

    @classmethod
    def for_params(cls, theta, hyper):
        """Zero-initialised state congruent with ``theta``."""
        return cls(
            mean_square={key: np.zeros_like(value) for key, value in theta.items()},
            velocity={key: np.zeros_like(value) for key, value in theta.items()},
            hyper=hyper,
        )


def rmsprop_nesterov_step(state, theta, grad):
    """
    Apply one RMSProp + Nesterov update in place.

    Args:
        state (OptimState): Accumulators, updated in place
        theta (mapping): Parameters, updated in place
        grad (mapping): Gradients over the addresses of ``theta``; missing
            addresses are treated as zero gradient

    Returns:
        tuple: ``(state, theta)``
    """
    hyper = state.hyper
    rho, mu, lr, eps = hyper.rms_decay, hyper.momentum, hyper.learning_rate, hyper.epsilon
    for key, g in grad.items():
        if not np.all(np.isfinite(g)):
            layer, name = key if isinstance(key, tuple) else (key, "")
            raise TrainingAbortedError(f"non-finite gradient in layer {layer} parameter '{name}'")

    for key in theta.keys():
        g = grad.get(key)
        if g is None:
            g = np.zeros_like(theta[key])
        ms = state.mean_square[key]
        ms *= rho
        ms += (1.0 - rho) * g * g
        scaled = g / np.sqrt(ms + eps)
        velocity = state.velocity[key]
        velocity *= mu
        velocity -= lr * scaled
        theta[key] = theta[key] + mu * velocity - lr * scaled
    state.steps += 1
    return state, theta


@dataclass
class EpochMetrics:
    train_loss: float
    steps: int
    batch_sizes: list = field(default_factory=list)


def run_epoch(objective, theta, dataset, state, rng, dropout_rng=None):
    """
    Train over one shuffled pass of ``dataset``.

    Args:
        objective (callable): ``objective(theta, batch, rng) -> (loss, grads)``
            where ``batch`` is a ``data.Dataset`` slice
        theta (mapping): Parameters, updated in place
        dataset (data.Dataset): Training items
        state (OptimState): Optimiser state, updated in place
        rng (numpy.random.Generator): Epoch-seeded generator for the shuffle
        dropout_rng (numpy.random.Generator, optional): Generator for dropout
            masks; ``rng`` when omitted

    Returns:
        EpochMetrics: Item-weighted mean training loss and the batch layout
    """
    count = len(dataset)
    if count == 0:
        raise ConfigError("cannot run an epoch over an empty dataset")
    dropout_rng = dropout_rng if dropout_rng is not None else rng
    batch_size = state.hyper.batch_size
    order = rng.permutation(count)

    weighted_loss = 0.0
    sizes = []
    for start in range(0, count, batch_size):
        batch = dataset.subset(order[start:start + batch_size])
        loss, grads = objective(theta, batch, dropout_rng)
        rmsprop_nesterov_step(state, theta, grads)
        weighted_loss += loss * len(batch)
        sizes.append(len(batch))
    return EpochMetrics(train_loss=weighted_loss / count, steps=len(sizes), batch_sizes=sizes)


@dataclass
class EarlyStopState:
    """
    Best-so-far bookkeeping for early stopping.

    Attributes:
        patience (int): Epochs without improvement tolerated
        max_epochs (int): Hard epoch cap
        best_validation_loss (float): Lowest validation loss seen
        best_epoch (int): Epoch (1-based) of the lowest validation loss
        best_params (dict): Snapshot of the parameters at ``best_epoch``
    """

    patience: int = 200
    max_epochs: int = 2000
    best_validation_loss: float = float("inf")
    best_epoch: int = 0
    best_params: Optional[dict] = None


def early_stop_update(state, epoch, validation_loss, params):
    """
    Record one epoch's validation loss.

    A loss at least ``1e-9`` below the best resets the patience window and
    snapshots ``params``. Training halts once ``patience`` epochs have passed
    without improvement or the epoch cap is reached.

    Args:
        state (EarlyStopState): Updated in place
        epoch (int): 1-based epoch number
        validation_loss (float): Eval-mode validation loss
        params (mapping): Current parameters

    Returns:
        tuple: ``(state, halt)``
    """
    if not np.isfinite(validation_loss):
        raise TrainingAbortedError(f"validation loss is not finite at epoch {epoch}")
    if validation_loss < state.best_validation_loss - IMPROVEMENT_TOL:
        state.best_validation_loss = float(validation_loss)
        state.best_epoch = epoch
        state.best_params = {key: np.array(value, copy=True) for key, value in params.items()}
    halt = epoch - state.best_epoch >= state.patience or epoch >= state.max_epochs
    if halt:
        logger.debug("early stop at epoch %d (best epoch %d, loss %.6g)", epoch, state.best_epoch,
                     state.best_validation_loss)
    return state, halt
