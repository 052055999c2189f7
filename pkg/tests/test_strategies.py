import numpy as np
import numpy.testing as npt
import pytest

import layers as L
from data import Dataset
from errors import ConfigError, TransferError
from harness import make_objective
from model import (
    Checkpoint,
    NetworkSpec,
    PriorBinding,
    Task,
    build_cae_from_cnn,
    build_mt_from_cnn,
    classifier_spec,
    init_params,
    loss_and_grad,
)
from optim import OptimHyper, OptimState, run_epoch
from strategies import AdaptationStrategy, StrategyKind, extract_prior_filters, prepare_target


@pytest.fixture
def prior_cl(tiny_cl_spec):
    return Checkpoint(tiny_cl_spec, init_params(tiny_cl_spec, 100), {})


def _differing(a, b):
    return {key for key in a if not np.array_equal(a[key], b[key])}


def test_reuse_cf_differs_from_reset_only_at_kernels(tiny_cl_spec, prior_cl):
    reset = prepare_target(AdaptationStrategy(StrategyKind.RESET), None, tiny_cl_spec, 7)
    reuse = prepare_target(AdaptationStrategy(StrategyKind.REUSE_CF, Task.CL), prior_cl, tiny_cl_spec, 7)
    assert _differing(reset.params, reuse.params) == {(0, "kernels")}
    npt.assert_array_equal(reuse.params[(0, "kernels")], prior_cl.params[(0, "kernels")])
    assert reuse.prior_binding is None


def test_reuse_all_cl_to_cl_differs_from_prior_only_at_output(tiny_cl_spec, prior_cl):
    target = prepare_target(AdaptationStrategy(StrategyKind.REUSE_ALL, Task.CL), prior_cl, tiny_cl_spec, 7)
    head = tiny_cl_spec.head_id
    differing = _differing(target.params, prior_cl.params)
    assert differing <= {(head, "weights"), (head, "bias")}
    assert (head, "weights") in differing


@pytest.mark.parametrize("prior_task", [Task.AE, Task.MT])
def test_reuse_all_copies_encoder_across_tasks(tiny_cl_spec, prior_task):
    prior_spec = build_cae_from_cnn(tiny_cl_spec) if prior_task is Task.AE else build_mt_from_cnn(tiny_cl_spec, 0.01)
    prior = Checkpoint(prior_spec, init_params(prior_spec, 55), {})
    for target_spec in (tiny_cl_spec, build_cae_from_cnn(tiny_cl_spec)):
        target = prepare_target(AdaptationStrategy(StrategyKind.REUSE_ALL, prior_task), prior, target_spec, 7)
        for layer_id in target_spec.encoder_ids:
            for name, value in target.params.layer(layer_id).items():
                npt.assert_array_equal(value, prior.params[(layer_id, name)])


def test_reuse_all_with_different_class_count(tiny_cl_spec):
    prior_spec = classifier_spec((1, 8, 8), [(2, 3)], 5, 4, dropout_p=0.25, reg=tiny_cl_spec.reg)
    prior = Checkpoint(prior_spec, init_params(prior_spec, 9), {})
    target = prepare_target(AdaptationStrategy(StrategyKind.REUSE_ALL, Task.CL), prior, tiny_cl_spec, 7)
    assert target.params[(tiny_cl_spec.head_id, "weights")].shape == (5, 3)
    npt.assert_array_equal(target.params[(3, "weights")], prior.params[(3, "weights")])


def test_reset_prf_binds_kernels_and_is_zero_at_prior(tiny_cl_spec, prior_cl, rng):
    strategy = AdaptationStrategy(StrategyKind.RESET_PRF, Task.CL, prf_lambda=0.001)
    target = prepare_target(strategy, prior_cl, tiny_cl_spec, 7)
    reset = prepare_target(AdaptationStrategy(StrategyKind.RESET), None, tiny_cl_spec, 7)
    assert _differing(target.params, reset.params) == set()
    binding = target.prior_binding
    assert set(binding.snapshot) == {(0, "kernels")}
    assert binding.lam == 0.001

    x = rng.random((4, 1, 8, 8))
    t = np.eye(3)[[0, 1, 2, 0]]
    _, terms, _ = loss_and_grad(tiny_cl_spec, prior_cl.params, x, t, L.EVAL, prior=binding, compute_grad=False)
    assert {term.name: term.value for term in terms}["prior"] == 0.0


def test_prior_snapshot_is_read_only_and_prior_untouched(tiny_cl_spec, prior_cl):
    before = {key: value.copy() for key, value in prior_cl.params.items()}
    target = prepare_target(AdaptationStrategy(StrategyKind.REUSE_CF, Task.CL), prior_cl, tiny_cl_spec, 7)
    target.params[(0, "kernels")][...] = 0.0
    for key, value in before.items():
        npt.assert_array_equal(prior_cl.params[key], value)
    snapshot = extract_prior_filters(prior_cl)
    with pytest.raises(ValueError):
        snapshot.filters[(0, "kernels")][0, 0, 0, 0] = 1.0


def test_zero_lambda_prior_matches_reset_first_epoch(tiny_cl_spec, prior_cl, synthetic):
    items = Dataset(synthetic.raw[:60, :, :8, :8], synthetic.labels[:60] % 3, ("a", "b", "c"))
    hyper = OptimHyper(learning_rate=1e-3, batch_size=25)
    losses = []
    for prior in (None, PriorBinding(snapshot=extract_prior_filters(prior_cl).filters, lam=0.0)):
        params = init_params(tiny_cl_spec, 7)
        state = OptimState.for_params(params, hyper)
        metrics = run_epoch(make_objective(tiny_cl_spec, prior), params, items, state,
                            np.random.default_rng(1), np.random.default_rng(2))
        losses.append(metrics.train_loss)
    assert abs(losses[0] - losses[1]) < 1e-12


def test_strategy_validation(tiny_cl_spec):
    with pytest.raises(ConfigError):
        AdaptationStrategy(StrategyKind.RESET_PRF, Task.CL, prf_lambda=0.0)
    with pytest.raises(ConfigError):
        AdaptationStrategy(StrategyKind.REUSE_CF)
    with pytest.raises(ConfigError):
        prepare_target(AdaptationStrategy(StrategyKind.REUSE_CF, Task.CL), None, tiny_cl_spec, 0)
    assert AdaptationStrategy(StrategyKind.REUSE_ALL, "MT").label == "REUSE_ALL(MT)"
    assert AdaptationStrategy(StrategyKind.RESET, Task.CL).prior_task is None


def test_incompatible_priors(tiny_cl_spec):
    dense_only = NetworkSpec((1, 8, 8), (L.Dense(4), L.Dense(3, L.ActivationKind.SOFTMAX)), Task.CL, num_classes=3)
    prior = Checkpoint(dense_only, init_params(dense_only, 0), {})
    with pytest.raises(TransferError):
        prepare_target(AdaptationStrategy(StrategyKind.REUSE_CF, Task.CL), prior, tiny_cl_spec, 0)

    wider = classifier_spec((1, 8, 8), [(4, 3)], 5, 3)
    prior = Checkpoint(wider, init_params(wider, 0), {})
    with pytest.raises(TransferError, match="layer 0"):
        prepare_target(AdaptationStrategy(StrategyKind.REUSE_CF, Task.CL), prior, tiny_cl_spec, 0)
