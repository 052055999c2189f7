import numpy as np
import pytest

from data import Dataset
from errors import ConfigError, TrainingAbortedError
from optim import EarlyStopState, OptimHyper, OptimState, early_stop_update, rmsprop_nesterov_step, run_epoch


def test_rmsprop_nesterov_minimises_quadratic():
    theta = {"x": np.array([1.0])}
    state = OptimState.for_params(theta, OptimHyper(learning_rate=0.01, rms_decay=0.9, momentum=0.5))
    for step in range(200):
        rmsprop_nesterov_step(state, theta, {"x": 2.0 * theta["x"]})
        if abs(theta["x"][0]) < 0.05:
            break
    assert abs(theta["x"][0]) < 0.05
    assert state.steps == step + 1


def test_first_step_matches_update_rule():
    theta = {"x": np.array([1.0])}
    hyper = OptimHyper(learning_rate=0.1, rms_decay=0.9, momentum=0.5, epsilon=1e-8)
    state = OptimState.for_params(theta, hyper)
    rmsprop_nesterov_step(state, theta, {"x": np.array([2.0])})
    ms = 0.1 * 4.0
    scaled = 2.0 / np.sqrt(ms + 1e-8)
    v = -0.1 * scaled
    assert theta["x"][0] == pytest.approx(1.0 + 0.5 * v - 0.1 * scaled)
    assert state.velocity["x"][0] == pytest.approx(v)


def test_missing_gradient_counts_as_zero():
    theta = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = OptimState.for_params(theta, OptimHyper(learning_rate=0.1))
    rmsprop_nesterov_step(state, theta, {"a": np.array([1.0])})
    assert theta["b"][0] == 1.0
    assert theta["a"][0] < 1.0


def test_non_finite_gradient_aborts_and_names_layer():
    theta = {(3, "kernels"): np.ones(2)}
    state = OptimState.for_params(theta, OptimHyper())
    with pytest.raises(TrainingAbortedError, match="layer 3"):
        rmsprop_nesterov_step(state, theta, {(3, "kernels"): np.array([np.nan, 1.0])})


def test_hyper_validation():
    with pytest.raises(ConfigError):
        OptimHyper(learning_rate=0.0)
    with pytest.raises(ConfigError):
        OptimHyper(momentum=1.0)
    with pytest.raises(ConfigError):
        OptimHyper(batch_size=0)


def _dataset(n):
    return Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.zeros(n, dtype=int), ("only",))


def test_run_epoch_keeps_short_final_batch_and_weights_loss():
    theta = {"w": np.zeros(1)}
    state = OptimState.for_params(theta, OptimHyper(batch_size=50))
    seen = []

    def objective(params, batch, rng):
        seen.extend(batch.items.ravel().tolist())
        return float(batch.items.mean()), {"w": np.zeros(1)}

    metrics = run_epoch(objective, theta, _dataset(120), state, np.random.default_rng(0))
    assert metrics.batch_sizes == [50, 50, 20]
    assert sorted(seen) == list(range(120))
    assert metrics.train_loss == pytest.approx(np.mean(np.arange(120)))


def test_run_epoch_empty_dataset():
    theta = {"w": np.zeros(1)}
    with pytest.raises(ConfigError):
        run_epoch(lambda *a: (0.0, {}), theta, _dataset(0), OptimState.for_params(theta, OptimHyper()),
                  np.random.default_rng(0))


def test_without_momentum_or_decay_step_is_normalised_gradient(rng):
    for _ in range(50):
        g = rng.normal(size=4)
        theta = {"x": rng.normal(size=4)}
        before = theta["x"].copy()
        state = OptimState.for_params(theta, OptimHyper(learning_rate=0.3, rms_decay=0.0, momentum=0.0))
        rmsprop_nesterov_step(state, theta, {"x": g})
        np.testing.assert_allclose(theta["x"] - before, -0.3 * g / np.sqrt(g * g + 1e-8), rtol=1e-12)


def test_single_step_hand_value():
    theta = {"x": np.array([1.0])}
    state = OptimState.for_params(theta, OptimHyper(learning_rate=1.0, rms_decay=0.9, momentum=0.0))
    rmsprop_nesterov_step(state, theta, {"x": np.array([1.0])})
    assert theta["x"][0] - 1.0 == pytest.approx(-3.1623, abs=1e-4)


def test_zero_gradient_leaves_parameters_unchanged():
    theta = {"x": np.array([0.7, -2.0])}
    state = OptimState.for_params(theta, OptimHyper(learning_rate=0.5))
    rmsprop_nesterov_step(state, theta, {"x": np.zeros(2)})
    np.testing.assert_array_equal(theta["x"], [0.7, -2.0])


def test_run_epoch_one_full_batch_is_one_step():
    theta = {"w": np.zeros(1)}
    state = OptimState.for_params(theta, OptimHyper(batch_size=50))
    metrics = run_epoch(lambda params, batch, rng: (0.0, {"w": np.zeros(1)}), theta, _dataset(50), state,
                        np.random.default_rng(0))
    assert metrics.steps == 1 and metrics.batch_sizes == [50]
    assert state.steps == 1


def test_early_stopping_halts_at_patience_expiry_on_flat_loss():
    state = EarlyStopState(patience=200, max_epochs=2000)
    params = {"w": np.array([0.0])}
    halted_at = None
    for epoch in range(1, 2001):
        params["w"][0] = epoch
        state, halt = early_stop_update(state, epoch, 1.0, params)
        if halt:
            halted_at = epoch
            break
    assert halted_at == 201
    assert state.best_epoch == 1
    assert state.best_params["w"][0] == 1.0


def test_early_stopping_tracks_best_snapshot():
    state = EarlyStopState(patience=3, max_epochs=100)
    losses = [5.0, 4.0, 3.0, 3.5, 3.2, 3.1]
    for epoch, loss in enumerate(losses, 1):
        state, halt = early_stop_update(state, epoch, loss, {"w": np.array([float(epoch)])})
    assert halt
    assert state.best_epoch == 3
    assert state.best_validation_loss == 3.0
    assert state.best_params["w"][0] == 3.0


def test_early_stopping_respects_epoch_cap():
    state = EarlyStopState(patience=50, max_epochs=4)
    for epoch in range(1, 5):
        state, halt = early_stop_update(state, epoch, 10.0 - epoch, {"w": np.zeros(1)})
    assert halt and state.best_epoch == 4


def test_non_finite_validation_loss_aborts():
    with pytest.raises(TrainingAbortedError):
        early_stop_update(EarlyStopState(), 1, float("nan"), {})
