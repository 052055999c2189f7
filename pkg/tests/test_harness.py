import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import db
import harness
from conftest import real_data_dir
from data import Dataset
from errors import ConfigError, TrainingAbortedError, UsageError
from losses import cce, mse
from main import main
from model import Task, build_cae_from_cnn, init_params, predict
from utils import cell_key


@pytest.fixture
def tiny_config(tmp_path):
    return harness.ExperimentConfig(
        dataset="synthetic", synthetic_items=600, out_dir=str(tmp_path / "run"), maps=2, hidden_units=8,
        k_per_class=2, source_limit=60, learning_rate=1e-3, max_epochs=3, patience=2, runs=1,
        prior_tasks=("CL", "AE"), target_tasks=("CL",), seed=5,
    )


def _record(strategy, run_id, epoch, value, metric="test_loss", prior="NONE"):
    return {"dataset": "mnist", "strategy": strategy, "prior_task": prior, "target_task": "CL", "run_id": run_id,
            "epoch": epoch, "metric": metric, "value": value}


# ---------------------------------------------------------------- configuration


def test_presets():
    assert harness.full_preset("cifar10").max_epochs == 3000
    composers = harness.full_preset("composers")
    assert composers.source_labels == (0, 1, 2, 3) and composers.target_labels == (4, 5)
    assert composers.learning_rate == 1e-6
    desk = harness.desk_preset("mnist")
    assert (desk.k_per_class, desk.maps, desk.max_epochs, desk.patience) == (10, 8, 150, 50)
    with pytest.raises(ConfigError):
        harness.full_preset("imagenet")


def test_config_file_round_trip(tmp_path):
    config = replace(harness.desk_preset("composers"), data_dir="/data/composers", seed=9)
    harness.dump_config(config, tmp_path / "config.txt")
    assert harness.load_config(tmp_path / "config.txt") == config


def test_config_file_errors(tmp_path):
    path = tmp_path / "config.txt"
    path.write_text("dataset = mnist\nlearning_rat = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rat"):
        harness.load_config(path)
    path.write_text("runs = two\n")
    with pytest.raises(ConfigError):
        harness.load_config(path)
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "missing.txt")
    with pytest.raises(ConfigError):
        harness.ExperimentConfig(strategies=("RESET", "FINETUNE"))


def test_parse_value_types():
    assert harness.parse_value("source_labels", "5, 6,7") == (5, 6, 7)
    assert harness.parse_value("prior_tasks", "cl,ae") == ("CL", "AE")
    assert harness.parse_value("source_limit", "none") is None
    assert harness.parse_value("maps", "8") == 8
    assert harness.parse_value("prf_lambda", "1e-4") == 1e-4


def test_default_grid_has_forty_cells():
    grid = harness.build_grid(harness.ExperimentConfig())
    assert len(grid) == 40
    keys = {cell.key("mnist") for cell in grid}
    assert len(keys) == 40
    assert "mnist-RESET-NONE-AE-run1" in keys
    assert sum(cell.strategy.kind.value == "RESET_PRF" for cell in grid) == 12


# ---------------------------------------------------------------- evaluation


def test_evaluate_classifier_matches_predictions(tiny_cl_spec, rng):
    params = init_params(tiny_cl_spec, 0)
    dataset = Dataset(rng.random((620, 1, 8, 8)), rng.integers(0, 3, 620), ("a", "b", "c"))
    probs = predict(tiny_cl_spec, params, dataset.items).probs
    metrics = harness.evaluate(tiny_cl_spec, params, dataset, Task.CL)
    assert metrics["loss"] == pytest.approx(cce(probs, dataset.one_hot()), rel=1e-10)
    assert metrics["accuracy"] == pytest.approx(np.mean(np.argmax(probs, axis=1) == dataset.labels))


def test_evaluate_autoencoder_and_mismatch(tiny_cl_spec, rng):
    spec = build_cae_from_cnn(tiny_cl_spec)
    params = init_params(spec, 0)
    dataset = Dataset(rng.random((10, 1, 8, 8)), np.zeros(10, dtype=int), ("a", "b", "c"))
    metrics = harness.evaluate(spec, params, dataset, Task.AE)
    assert set(metrics) == {"loss"}
    assert metrics["loss"] == pytest.approx(mse(predict(spec, params, dataset.items).recon, dataset.items))
    with pytest.raises(UsageError):
        harness.evaluate(spec, params, dataset, Task.CL)
    with pytest.raises(UsageError):
        harness.evaluate(tiny_cl_spec, init_params(tiny_cl_spec, 0), dataset, Task.AE)
    with pytest.raises(ConfigError):
        harness.evaluate(spec, params, dataset.subset([]), Task.AE)


# ---------------------------------------------------------------- averaging


def test_average_two_runs():
    averaged = harness.average_runs([_record("RESET", 0, 1, 0.4), _record("RESET", 1, 1, 0.6)])
    assert averaged["value"].tolist() == [pytest.approx(0.5)]
    assert averaged["runs"].tolist() == [2]


def test_average_single_run_is_identity():
    records = [_record("REUSE_CF", 0, e, v, prior="AE") for e, v in enumerate([0.9, 0.7, 0.6], 1)]
    averaged = harness.average_runs(records)
    assert averaged["value"].tolist() == [0.9, 0.7, 0.6]
    assert averaged["prior_task"].unique().tolist() == ["AE"]


def test_average_pads_halted_runs_with_last_value():
    records = [_record("RESET", 0, e, v) for e, v in enumerate([1.0, 2.0, 3.0], 1)]
    records += [_record("RESET", 1, e, v) for e, v in enumerate([3.0, 4.0], 1)]
    averaged = harness.average_runs(records)
    assert averaged["epoch"].tolist() == [1, 2, 3]
    assert averaged["value"].tolist() == pytest.approx([2.0, 3.0, 3.5])


def test_average_keeps_groups_apart():
    records = [_record("RESET", 0, 1, 1.0), _record("RESET", 0, 1, 0.5, metric="test_accuracy"),
               _record("REUSE_ALL", 0, 1, 2.0, prior="CL")]
    averaged = harness.average_runs(records)
    assert len(averaged) == 3
    assert set(averaged["metric"]) == {"test_loss", "test_accuracy"}


def test_average_empty_is_usage_error():
    with pytest.raises(UsageError):
        harness.average_runs([])


def test_averaged_csv_round_trip(tmp_path):
    averaged = harness.average_runs([_record("RESET", 0, 1, 0.25)])
    harness.write_averaged_csv(averaged, tmp_path / "avg.csv")
    assert (tmp_path / "avg.csv").read_text().startswith("#")
    back = harness.read_records_csv(tmp_path / "avg.csv")
    assert back["prior_task"].tolist() == ["NONE"]
    assert back["value"].tolist() == [0.25]


def test_compare_curves_signs():
    records = [_record("RESET", 0, e, v) for e, v in enumerate([1.0, 0.8], 1)]
    records += [_record("REUSE_CF", 0, e, v, prior="CL") for e, v in enumerate([0.9, 0.7], 1)]
    records += [_record("RESET", 0, e, v, metric="test_accuracy") for e, v in enumerate([0.5, 0.6], 1)]
    records += [_record("REUSE_CF", 0, e, v, metric="test_accuracy", prior="CL") for e, v in enumerate([0.6, 0.7], 1)]
    summary = harness.compare_curves(harness.average_runs(records)).set_index("metric")
    for metric in ("test_loss", "test_accuracy"):
        row = summary.loc[metric]
        assert row["strategy"] == "REUSE_CF"
        assert row["jumpstart"] == pytest.approx(0.1)
        assert row["asymptotic_gain"] == pytest.approx(0.1)
        assert row["area_gain"] == pytest.approx(0.1)


# ---------------------------------------------------------------- end to end


def test_missing_data_fails_before_training(tmp_path):
    config = harness.ExperimentConfig(dataset="mnist", data_dir=str(tmp_path / "nowhere"),
                                      out_dir=str(tmp_path / "out"))
    with pytest.raises(ConfigError):
        harness.run_experiment(config)
    assert not (tmp_path / "out").exists()


def test_data_root_environment(monkeypatch, tmp_path):
    monkeypatch.delenv(harness.DATA_ROOT_ENV, raising=False)
    with pytest.raises(ConfigError):
        harness.resolve_data_dir(harness.ExperimentConfig())
    monkeypatch.setenv(harness.DATA_ROOT_ENV, str(tmp_path))
    assert harness.resolve_data_dir(harness.ExperimentConfig(dataset="cifar10")) == tmp_path / "cifar10"


def test_experiment_is_deterministic_and_resumable(tiny_config, tmp_path):
    first = harness.run_experiment(tiny_config)
    assert first.failed == []
    assert first.completed == 7 + 2  # grid cells plus the two source models
    out = first.out_dir
    for name in ("config.txt", "ledger.sqlite", "metrics.csv", "metrics_averaged.csv", "transfer_summary.csv",
                 "MANIFEST", "checkpoints/source-CL.ckpt", "checkpoints/source-AE.ckpt"):
        assert (out / name).exists(), name

    raw = pd.read_csv(out / "metrics.csv", keep_default_na=False)
    assert set(raw["metric"]) == {"train_loss", "valid_loss", "test_loss", "test_accuracy"}
    assert raw["epoch"].min() == 1 and raw["epoch"].max() <= 3
    assert set(raw["strategy"]) == {"RESET", "RESET_PRF", "REUSE_ALL", "REUSE_CF"}

    second = harness.run_experiment(replace(tiny_config, out_dir=str(tmp_path / "again")))
    assert (second.out_dir / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()

    # Interrupt one cell and resume.
    key = cell_key("synthetic", "REUSE_CF", "AE", "CL", 0)
    ledger = db.open_ledger(second.out_dir)
    ledger.mark_cell(key, status="running")
    ledger.save_metrics(key, [])
    ledger.close()
    (second.out_dir / "metrics.csv").unlink()
    resumed = harness.run_experiment(replace(tiny_config, out_dir=str(tmp_path / "again")))
    assert resumed.completed == first.completed
    assert (resumed.out_dir / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
    assert (resumed.out_dir / "metrics_averaged.csv").read_bytes() == (out / "metrics_averaged.csv").read_bytes()


def test_evaluate_checkpoint_uses_recorded_labels(tiny_config):
    config = replace(tiny_config, strategies=("RESET",))
    harness.run_experiment(config)
    path = f"{config.out_dir}/checkpoints/{cell_key('synthetic', 'RESET', None, 'CL', 0)}.ckpt"
    metrics = harness.evaluate_checkpoint(path, config, Task.CL)
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_evaluate_checkpoint_rebuilds_recorded_synthetic_data(tiny_config, capsys):
    config = replace(tiny_config, strategies=("RESET",))
    harness.run_experiment(config)
    path = f"{config.out_dir}/checkpoints/{cell_key('synthetic', 'RESET', None, 'CL', 0)}.ckpt"
    expected = harness.evaluate_checkpoint(path, config, Task.CL)
    assert harness.evaluate_checkpoint(path, replace(config, seed=0, synthetic_items=2000), Task.CL) == expected
    assert main(["eval", "--checkpoint", path, "--dataset", "synthetic", "--task", "CL"]) == 0
    assert f"accuracy: {expected['accuracy']:.6f}" in capsys.readouterr().out


def test_every_run_draws_its_own_target_items(tiny_config, monkeypatch):
    config = replace(tiny_config, runs=2, strategies=("RESET",))
    dataset = harness.load_dataset(config)
    run0, run1 = harness.run_split(dataset, config, 0), harness.run_split(dataset, config, 1)
    assert set(run0.target_indices["train"]) != set(run1.target_indices["train"])
    np.testing.assert_array_equal(harness.run_split(dataset, config, 1).target_indices["train"],
                                  run1.target_indices["train"])

    picked = {}
    run_cell = harness.run_cell

    def recording_run_cell(config, split, cell, prior, checkpoint_path):
        picked[cell.run_id] = split.target_indices["train"]
        return run_cell(config, split, cell, prior, checkpoint_path)

    monkeypatch.setattr(harness, "run_cell", recording_run_cell)
    assert harness.run_experiment(config).failed == []
    np.testing.assert_array_equal(picked[0], run0.target_indices["train"])
    np.testing.assert_array_equal(picked[1], run1.target_indices["train"])


def test_unreadable_source_checkpoint_fails_only_its_cells(tiny_config):
    config = replace(tiny_config, strategies=("RESET", "REUSE_ALL"))
    assert harness.run_experiment(config).failed == []
    out = f"{config.out_dir}"
    reuse_cl = cell_key("synthetic", "REUSE_ALL", "CL", "CL", 0)
    reuse_ae = cell_key("synthetic", "REUSE_ALL", "AE", "CL", 0)
    with open(f"{out}/checkpoints/source-CL.ckpt", "wb") as f:
        f.write(b"garbage")
    ledger = db.open_ledger(out)
    for key in (reuse_cl, reuse_ae):
        ledger.mark_cell(key, status="pending")
    ledger.close()
    (Path(out) / "metrics.csv").unlink()

    result = harness.run_experiment(config)
    assert result.failed == [reuse_cl]
    ledger = db.open_ledger(out)
    row = ledger.get_cell(reuse_cl)
    assert row["status"] == "failed" and "TruncatedCheckpointError" in row["error"]
    assert ledger.get_cell(reuse_ae)["status"] == "complete"
    ledger.close()
    raw = pd.read_csv(f"{out}/metrics.csv", keep_default_na=False)
    assert "CL" not in set(raw.loc[raw["strategy"] == "REUSE_ALL", "prior_task"])


def test_source_training_failure_keeps_grid_running(tiny_config, monkeypatch):
    config = replace(tiny_config, strategies=("RESET", "REUSE_CF"))
    train_network = harness.train_network

    def aborting_on_ae_source(spec, params, train, valid, config, run_id, stream, *args, **kwargs):
        if stream == harness.SOURCE_STREAMS[Task.AE]:
            raise TrainingAbortedError("non-finite validation loss")
        return train_network(spec, params, train, valid, config, run_id, stream, *args, **kwargs)

    monkeypatch.setattr(harness, "train_network", aborting_on_ae_source)
    result = harness.run_experiment(config)
    reuse_ae = cell_key("synthetic", "REUSE_CF", "AE", "CL", 0)
    assert result.failed == [harness.source_key(config, Task.AE), reuse_ae]
    assert result.completed == 3  # RESET, REUSE_CF from CL and the CL source
    ledger = db.open_ledger(result.out_dir)
    assert ledger.get_cell(harness.source_key(config, Task.AE))["status"] == "failed"
    assert "TrainingAbortedError" in ledger.get_cell(reuse_ae)["error"]
    ledger.close()
    assert (result.out_dir / "metrics.csv").exists()
    assert (result.out_dir / "MANIFEST").exists()

    monkeypatch.undo()
    resumed = harness.run_experiment(config)
    assert resumed.failed == []
    assert resumed.completed == 5


def test_two_processes_write_identical_metrics(tiny_config, tmp_path):
    config_path = tmp_path / "config.txt"
    harness.dump_config(tiny_config, config_path)
    repo = Path(harness.__file__).parent
    outputs = []
    for attempt, hash_seed in enumerate(("1", "2")):
        out = tmp_path / f"process{attempt}"
        env = {**os.environ, "PYTHONHASHSEED": hash_seed}
        subprocess.run([sys.executable, "main.py", "--log-level", "WARNING", "run", "--config", str(config_path),
                        "--out", str(out)], cwd=repo, env=env, check=True)
        outputs.append((out / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1]


def _desk_wins(tmp_path, target_task, strategy, prior_task, metric, epoch):
    """Seed triples (base seeds 0, 1, 2; three runs each) where ``strategy`` beats RESET at ``epoch``."""
    wins = 0
    for seed in range(3):
        config = replace(harness.desk_preset("mnist"), data_dir=str(real_data_dir("mnist")), seed=seed,
                         out_dir=str(tmp_path / f"seed{seed}"), target_tasks=(target_task,),
                         prior_tasks=(prior_task,), strategies=("RESET", strategy))
        assert harness.run_experiment(config).failed == []
        averaged = harness.read_records_csv(tmp_path / f"seed{seed}" / "metrics_averaged.csv")
        at_epoch = averaged[(averaged["metric"] == metric) & (averaged["epoch"] == epoch)]
        curves = at_epoch.set_index("strategy")["value"]
        wins += curves[strategy] < curves["RESET"]
    return wins


@pytest.mark.slow
def test_desk_filter_reuse_lowers_classification_loss(tmp_path):
    assert _desk_wins(tmp_path, "CL", "REUSE_CF", "CL", "test_loss", 50) >= 2


@pytest.mark.slow
def test_desk_autoencoder_reuse_starts_lower(tmp_path):
    assert _desk_wins(tmp_path, "AE", "REUSE_ALL", "AE", "test_loss", 1) >= 2
