import os
from pathlib import Path

import numpy as np
import pytest

import layers as L
from data import synthetic_images
from losses import RegConfig
from model import NetworkSpec, Task, classifier_spec

FD_STEP = 1e-5


def numeric_grad(f, x, step=FD_STEP):
    """Central finite differences of scalar ``f()`` with respect to every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        plus = f()
        x[idx] = old - step
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2.0 * step)
        it.iternext()
    return grad


def rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cl_spec():
    """Conv(2, 3x3) -> pool -> dropout -> dense(5) -> softmax(3) on 1x8x8 items."""
    reg = RegConfig(l2_lambda=0.01, sparsity_coeff=0.1, sparsity_target=0.6)
    return classifier_spec((1, 8, 8), [(2, 3)], 5, 3, dropout_p=0.25, reg=reg)


@pytest.fixture
def two_stage_spec():
    stack = (L.Conv(2, 3, 3, L.ActivationKind.TANH), L.MaxPool(2, 2), L.Conv(3, 3, 3, L.ActivationKind.RELU),
             L.MaxPool(2, 2), L.Dense(4), L.Dense(2, L.ActivationKind.SOFTMAX))
    return NetworkSpec((2, 10, 10), stack, Task.CL, num_classes=2)


@pytest.fixture
def synthetic():
    return synthetic_images(600, num_classes=10, shape=(1, 28, 28), seed=3)


def real_data_dir(name):
    root = os.environ.get("CONVADAPT_DATA_ROOT")
    if not root or not (Path(root) / name).is_dir():
        pytest.skip(f"{name} data not available (set CONVADAPT_DATA_ROOT)")
    return Path(root) / name
