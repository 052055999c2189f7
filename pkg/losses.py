"""
Task losses, the multi-task objective and the regularisers.

Every loss has a matching ``*_grad`` function returning the gradient with
respect to its tensor argument. Batch losses are means over the item axis, so
their magnitude does not depend on the batch size.
"""

from dataclasses import dataclass

import numpy as np

from errors import ConfigError, DimensionError
from tensor import as_tensor

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossTerm:
    """
    One named contribution to the total loss.

    Attributes:
        name (str): ``cce``, ``mse``, ``multitask``, ``l2``, ``prior`` or ``sparsity``
        value (float): Value of the term
        target (str): What its gradient flows into, ``"parameters"`` or ``"activations"``
    """

    name: str
    value: float
    target: str = "activations"


@dataclass(frozen=True)
class RegConfig:
    """
    Regulariser coefficients.

    Attributes:
        l2_lambda (float): Weight decay coefficient, ``>= 0``
        prior_lambda (float): Prior regularisation coefficient, ``>= 0``
        sparsity_coeff (float): Hoyer penalty coefficient, ``>= 0``
        sparsity_target (float): Target Hoyer sparseness in ``[0, 1]``
    """

    l2_lambda: float = 0.0
    prior_lambda: float = 0.0
    sparsity_coeff: float = 0.0
    sparsity_target: float = 0.0

    def __post_init__(self):
        for name in ("l2_lambda", "prior_lambda", "sparsity_coeff"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.sparsity_target <= 1.0:
            raise ConfigError(f"sparsity_target must be in [0, 1], got {self.sparsity_target}")


def total_loss(terms):
    """Sum of a list of ``LossTerm``."""
    return float(sum(term.value for term in terms))


def _check_same_shape(pred, target, what):
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: prediction shape {pred.shape} differs from target shape {target.shape}")


# ---------------------------------------------------------------- task losses


def cce(pred, target):
    """
    Categorical cross-entropy, ``-(1/N) sum_n sum_k t log y``.

    Probabilities are floored at ``1e-12`` inside the logarithm.

    Args:
        pred (Tensor): ``[N, K]`` rows of class probabilities
        target (Tensor): ``[N, K]`` one-hot rows

    Returns:
        float: Mean cross-entropy
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "cce")
    batch = pred.shape[0] if pred.ndim > 1 else 1
    return float(-np.sum(target * np.log(np.maximum(pred, LOG_FLOOR))) / batch)


def cce_grad(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "cce")
    batch = pred.shape[0] if pred.ndim > 1 else 1
    floored = pred > LOG_FLOOR
    return np.where(floored, -target / np.maximum(pred, LOG_FLOOR), 0.0) / batch


def mse(pred, target):
    """
    Mean squared error, ``(1/N) sum_n ||t_n - y_n||^2``.

    Args:
        pred (Tensor): ``[N, ...]`` batch
        target (Tensor): Same shape as ``pred``

    Returns:
        float: Squared error summed per item, averaged over items
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "mse")
    batch = pred.shape[0] if pred.ndim > 1 else 1
    return float(np.sum((target - pred) ** 2) / batch)


def mse_grad(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "mse")
    batch = pred.shape[0] if pred.ndim > 1 else 1
    return 2.0 * (pred - target) / batch


def multitask(l_cl, l_ae, alpha_mt):
    """
    Scalarised multi-task loss ``(1 - alpha) * L_CL + alpha * L_AE``.

    Args:
        l_cl (float): Classification loss
        l_ae (float): Reconstruction loss
        alpha_mt (float): Weight of the reconstruction loss, in ``[0, 1]``

    Returns:
        float: Combined loss
    """
    check_alpha(alpha_mt)
    return (1.0 - alpha_mt) * l_cl + alpha_mt * l_ae


def check_alpha(alpha_mt):
    if alpha_mt is None or not 0.0 <= alpha_mt <= 1.0:
        raise ConfigError(f"alpha_mt must be in [0, 1], got {alpha_mt}")


# ---------------------------------------------------------------- regularisers


def l2_penalty(weights, lam):
    """``(lam / 2) * sum ||W||^2`` over a list of weight tensors (biases excluded by the caller)."""
    return float(0.5 * lam * sum(np.sum(w * w) for w in weights))


def l2_grad(weight, lam):
    return lam * weight


def _pairs(theta, theta_old):
    if set(theta) != set(theta_old):
        raise ConfigError(
            f"prior regularisation covers different parameters: {sorted(theta)} vs {sorted(theta_old)}"
        )
    for key in theta:
        if np.shape(theta[key]) != np.shape(theta_old[key]):
            raise ConfigError(
                f"prior snapshot for {key} has shape {np.shape(theta_old[key])}, live parameter has {np.shape(theta[key])}"
            )
        yield key, as_tensor(theta[key]), as_tensor(theta_old[key])


def prior_reg(theta, theta_old, lam):
    """
    Prior regularisation ``(lam / 2) * ||theta_old - theta||^2``.

    Args:
        theta (dict): Live parameters, keyed by address
        theta_old (dict): Prior parameters over the same addresses
        lam (float): Coefficient

    Returns:
        float: Penalty value
    """
    return float(0.5 * lam * sum(np.sum((old - new) ** 2) for _, new, old in _pairs(theta, theta_old)))


def prior_reg_grad(theta, theta_old, lam):
    """Gradient ``lam * (theta - theta_old)`` per address."""
    return {key: lam * (new - old) for key, new, old in _pairs(theta, theta_old)}


def hoyer_sparseness(activations):
    """
    Hoyer's sparseness ``(sqrt(n) - ||a||_1 / ||a||_2) / (sqrt(n) - 1)``.

    An all-zero vector has sparseness 0. A single-element vector is treated as
    maximally sparse.

    Args:
        activations (Tensor): Any shape; measured over all elements

    Returns:
        float: Sparseness in ``[0, 1]``
    """
    a = as_tensor(activations).ravel()
    n = a.size
    l2 = np.sqrt(np.sum(a * a))
    if l2 == 0.0:
        return 0.0
    if n == 1:
        return 1.0
    root_n = np.sqrt(n)
    return float((root_n - np.sum(np.abs(a)) / l2) / (root_n - 1.0))


def _sparseness_grad(a):
    n = a.size
    l2 = np.sqrt(np.sum(a * a))
    if l2 == 0.0 or n == 1:
        return np.zeros_like(a)
    l1 = np.sum(np.abs(a))
    ratio_grad = np.sign(a) / l2 - l1 * a / l2**3
    return -ratio_grad / (np.sqrt(n) - 1.0)


def hoyer_penalty(activations, coeff, target):
    """
    Squared deviation of the Hoyer sparseness from a target.

    Single tensor form ``coeff * (target - s(a))^2``; for the batch form use
    ``batch_hoyer_penalty``.
    """
    return float(coeff * (target - hoyer_sparseness(activations)) ** 2)


def batch_hoyer_penalty(activations, coeff, target):
    """Hoyer penalty measured per item (first axis) and averaged over the batch."""
    activations = as_tensor(activations)
    per_item = [hoyer_penalty(item, coeff, target) for item in activations]
    return float(np.mean(per_item))


def batch_hoyer_grad(activations, coeff, target):
    """Gradient of ``batch_hoyer_penalty`` with respect to the activations."""
    activations = as_tensor(activations)
    batch = activations.shape[0]
    grad = np.empty_like(activations)
    for i, item in enumerate(activations):
        flat = item.ravel()
        s = hoyer_sparseness(flat)
        grad[i] = (2.0 * coeff * (s - target) * _sparseness_grad(flat) / batch).reshape(item.shape)
    return grad
