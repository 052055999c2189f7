"""
Experiment harness: source training, strategy grid, target training,
per-epoch evaluation, run averaging and CSV output.

One experiment on one dataset runs these steps:

1. split the dataset into a source and a few-shot target domain, drawing
   the target items separately for every run;
2. train the source models (CL, AE and MT) needed by the prior tasks;
3. for every target task x strategy x prior task x run, prepare the target
   network from the prior and train it with early stopping;
4. evaluate the target model after every epoch and record
   ``train_loss``, ``valid_loss``, ``test_loss`` and (CL) ``test_accuracy``.

Output directory layout::

    config.txt                 the full configuration (re-runnable)
    ledger.sqlite              grid cell state and raw metrics (resume source)
    checkpoints/source-*.ckpt  source models
    checkpoints/<cell>.ckpt    best target model of each grid cell
    metrics.csv                raw per-run records
    metrics_averaged.csv       mean over runs with last-value padding
    transfer_summary.csv       learning-curve comparison against RESET
    MANIFEST                   grid cell -> status, checkpoint
"""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

import db
from data import FewShotSpec, load_cifar10, load_mnist, load_pianoroll, split_domains, synthetic_images
from errors import ConfigError, ConvAdaptError, UsageError
from layers import EVAL, TRAIN
from losses import RegConfig, cce, mse, multitask
from model import (
    ParamSet,
    Task,
    architecture_spec,
    build_cae_from_cnn,
    build_mt_from_cnn,
    forward_network,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    with_reg,
)
from optim import EarlyStopState, OptimHyper, OptimState, early_stop_update, run_epoch
from strategies import AdaptationStrategy, StrategyKind, prepare_target
from utils import cell_key, derive_rng, format_duration, get_status_level

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "CONVADAPT_DATA_ROOT"
METRICS = ("train_loss", "valid_loss", "test_loss", "test_accuracy")
RECORD_COLUMNS = ["dataset", "strategy", "prior_task", "target_task", "run_id", "epoch", "metric", "value"]
CURVE_KEYS = ["dataset", "strategy", "prior_task", "target_task", "metric"]
NO_PRIOR = "NONE"
EVAL_BATCH = 500
PADDING_NOTE = ("# mean over runs per (dataset, strategy, prior_task, target_task, metric, epoch); "
                "a run that halted early contributes its last recorded value to later epochs")

# Integer streams separating the shuffle/dropout randomness of source and target training.
TARGET_STREAM = 0
SOURCE_STREAMS = {Task.CL: 101, Task.AE: 102, Task.MT: 103}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything that determines an experiment.

    Defaults are the full-scale MNIST settings; ``full_preset`` and ``desk_preset``
    give the per-dataset values.
    """

    dataset: str = "mnist"
    data_dir: Optional[str] = None
    preset: str = "full"
    out_dir: str = "runs/mnist"
    source_labels: tuple = (0, 1, 2, 3, 4)
    target_labels: tuple = (5, 6, 7, 8, 9)
    k_per_class: int = 10
    source_limit: Optional[int] = None
    synthetic_items: int = 3000
    maps: Optional[int] = None
    hidden_units: Optional[int] = None
    learning_rate: float = 1e-5
    momentum: float = 0.5
    rms_decay: float = 0.9
    epsilon: float = 1e-8
    dropout_p: float = 0.5
    l2_lambda: float = 0.001
    sparsity_coeff: float = 1e-4
    sparsity_target: float = 0.9
    batch_size: int = 50
    alpha_mt: float = 0.01
    max_epochs: int = 2000
    source_max_epochs: Optional[int] = None
    patience: int = 200
    prf_lambda: float = 0.001
    strategies: tuple = ("RESET", "RESET_PRF", "REUSE_ALL", "REUSE_CF")
    prior_tasks: tuple = ("CL", "AE", "MT")
    target_tasks: tuple = ("CL", "AE")
    runs: int = 2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        try:
            for name in self.strategies:
                StrategyKind(name)
            for name in self.prior_tasks + self.target_tasks:
                Task(name)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if set(self.target_tasks) - {"CL", "AE"}:
            raise ConfigError(f"target tasks must be CL or AE, got {self.target_tasks}")
        if self.preset not in ("full", "desk"):
            raise ConfigError(f"preset must be 'full' or 'desk', got {self.preset!r}")

    @property
    def hyper(self):
        return OptimHyper(self.learning_rate, self.rms_decay, self.momentum, self.epsilon, self.batch_size)

    @property
    def reg(self):
        return RegConfig(l2_lambda=self.l2_lambda, sparsity_coeff=self.sparsity_coeff,
                         sparsity_target=self.sparsity_target)


def full_preset(dataset):
    """Published per-dataset settings."""
    base = {"dataset": dataset, "preset": "full", "out_dir": f"runs/{dataset}"}
    if dataset == "cifar10":
        return ExperimentConfig(**base, max_epochs=3000)
    if dataset == "composers":
        return ExperimentConfig(**base, source_labels=(0, 1, 2, 3), target_labels=(4, 5), learning_rate=1e-6,
                                sparsity_target=0.5)
    if dataset in ("mnist", "synthetic"):
        return ExperimentConfig(**base)
    raise ConfigError(f"unknown dataset {dataset!r}")


def desk_preset(dataset):
    """Scaled-down settings that finish on one CPU core in minutes."""
    full = full_preset(dataset)
    return replace(full, preset="desk", maps=8, source_limit=2000, k_per_class=10, max_epochs=150, patience=50,
                   runs=3, learning_rate=1e-3, out_dir=f"runs/{dataset}-desk")


def preset_config(dataset, preset="full"):
    return desk_preset(dataset) if preset == "desk" else full_preset(dataset)


# ---------------------------------------------------------------- config files


def _field_types():
    return {f.name: f for f in fields(ExperimentConfig)}


def parse_value(name, text):
    """Parse a config value to the type of field ``name``."""
    spec = _field_types().get(name)
    if spec is None:
        raise ConfigError(f"unknown config key {name!r}")
    text = str(text).strip()
    default = spec.default
    if text.lower() in ("none", "") and name in ("data_dir", "source_limit", "maps", "hidden_units",
                                                "source_max_epochs"):
        return None
    try:
        if isinstance(default, tuple):
            items = [item.strip() for item in text.split(",") if item.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(item) for item in items)
            return tuple(item.upper() for item in items)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int) or name in ("source_limit", "maps", "hidden_units", "source_max_epochs"):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {text!r}") from e
    return text


def load_config(path, base=None):
    """
    Read a flat ``key = value`` config file on top of ``base``.

    When ``base`` is omitted the preset named by the file's ``dataset`` and
    ``preset`` keys is used.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    values = {}
    for number, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, value)
    if base is None:
        base = preset_config(values.get("dataset", "mnist"), values.get("preset", "full"))
    return replace(base, **values)


def dump_config(config, path):
    lines = ["# convadapt experiment configuration"]
    for name, value in asdict(config).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {'none' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- data


def resolve_data_dir(config):
    if config.data_dir:
        return Path(config.data_dir)
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no data_dir given and {DATA_ROOT_ENV} is not set")
    return Path(root) / config.dataset


def load_dataset(config):
    """Load the configured dataset; fails before any training when it is missing."""
    if config.dataset == "synthetic":
        return synthetic_images(config.synthetic_items, num_classes=10, shape=(1, 28, 28), seed=config.seed)
    directory = resolve_data_dir(config)
    if config.dataset == "mnist":
        return load_mnist(directory)
    if config.dataset == "cifar10":
        return load_cifar10(directory)
    if config.dataset == "composers":
        manifest = directory if directory.suffix == ".csv" else directory / "manifest.csv"
        return load_pianoroll(manifest, seed=config.seed)
    raise ConfigError(f"unknown dataset {config.dataset!r}")


def architecture_name(config):
    return "mnist" if config.dataset == "synthetic" else config.dataset


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class MetricsRecord:
    dataset: str
    strategy: str
    prior_task: str
    target_task: str
    run_id: int
    epoch: int
    metric: str
    value: float


def evaluate(spec, params, dataset, task):
    """
    Eval-mode loss (and accuracy for classification) over a dataset.

    Args:
        spec (NetworkSpec): Network
        params (ParamSet): Its parameters
        dataset (data.Dataset): Items to evaluate
        task (Task): ``CL`` (CCE and accuracy), ``AE`` (MSE) or ``MT`` (scalarised loss)

    Returns:
        dict: ``{"loss": ..., "accuracy": ...}`` (accuracy for CL and MT only)
    """
    task = Task(task)
    if task in (Task.CL, Task.MT) and spec.head_id is None:
        raise UsageError(f"cannot evaluate {task.value} on a network without a classifier layer")
    if task in (Task.AE, Task.MT) and not spec.decoder_ids:
        raise UsageError(f"cannot evaluate {task.value} on a network without a decoder")
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    totals = {"cce": 0.0, "mse": 0.0, "correct": 0}
    for start in range(0, len(dataset), EVAL_BATCH):
        batch = dataset.subset(np.arange(start, min(start + EVAL_BATCH, len(dataset))))
        inputs = batch.items
        out = forward_network(spec, params, inputs, mode=EVAL)
        if task in (Task.CL, Task.MT):
            totals["cce"] += cce(out.probs, batch.one_hot(spec.num_classes)) * len(batch)
            totals["correct"] += int(np.sum(np.argmax(out.probs, axis=1) == batch.labels))
        if task in (Task.AE, Task.MT):
            totals["mse"] += mse(out.recon, inputs) * len(batch)
    n = len(dataset)
    if task is Task.CL:
        return {"loss": totals["cce"] / n, "accuracy": totals["correct"] / n}
    if task is Task.AE:
        return {"loss": totals["mse"] / n}
    return {"loss": multitask(totals["cce"] / n, totals["mse"] / n, spec.alpha_mt),
            "accuracy": totals["correct"] / n}


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ParamSet
    best_epoch: int
    halt_epoch: int
    best_validation_loss: float
    history: list = field(default_factory=list)


def make_objective(spec, prior=None):
    """``objective(theta, batch, rng) -> (loss, grads)`` for ``run_epoch``."""
    needs_labels = spec.task in (Task.CL, Task.MT)

    def objective(theta, batch, rng):
        targets = batch.one_hot(spec.num_classes) if needs_labels else None
        total, _, grads = loss_and_grad(spec, theta, batch.items, targets, TRAIN, rng, prior)
        return total, grads

    return objective


def train_network(spec, params, train, valid, config, run_id, stream, prior=None, on_epoch=None):
    """
    Train with RMSProp + Nesterov and early stopping on the validation loss.

    Args:
        spec (NetworkSpec): Network
        params (ParamSet): Starting parameters, updated in place
        train (data.Dataset): Training items
        valid (data.Dataset): Validation items
        config (ExperimentConfig): Hyperparameters and seed
        run_id (int): Run index for the seed scheme
        stream (int): Separates the randomness of different trainings of a run
        prior (PriorBinding, optional): Prior regularisation
        on_epoch (callable, optional): ``on_epoch(epoch, train_loss, valid_loss, params)`` after each epoch

    Returns:
        TrainResult: The best-validation snapshot and the stopping point
    """
    max_epochs = config.max_epochs if stream == TARGET_STREAM else (config.source_max_epochs or config.max_epochs)
    state = OptimState.for_params(params, config.hyper)
    early = EarlyStopState(patience=config.patience, max_epochs=max_epochs)
    objective = make_objective(spec, prior)
    history = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        shuffle_rng = derive_rng(config.seed, run_id, "shuffle", stream, epoch)
        dropout_rng = derive_rng(config.seed, run_id, "dropout", stream, epoch)
        metrics = run_epoch(objective, params, train, state, shuffle_rng, dropout_rng)
        valid_loss = evaluate(spec, params, valid, spec.task)["loss"]
        history.append((epoch, metrics.train_loss, valid_loss))
        if on_epoch is not None:
            on_epoch(epoch, metrics.train_loss, valid_loss, params)
        early, halt = early_stop_update(early, epoch, valid_loss, params)
        if halt:
            break
    return TrainResult(params=ParamSet(early.best_params), best_epoch=early.best_epoch, halt_epoch=epoch,
                       best_validation_loss=early.best_validation_loss, history=history)


# ---------------------------------------------------------------- specs


def source_spec(config, split, task):
    cl = architecture_spec(architecture_name(config), len(split.source_labels), config.reg, config.dropout_p,
                           config.maps, config.hidden_units)
    if Task(task) is Task.CL:
        return cl
    if Task(task) is Task.AE:
        return build_cae_from_cnn(cl)
    return build_mt_from_cnn(cl, config.alpha_mt)


def target_spec(config, split, task):
    cl = architecture_spec(architecture_name(config), len(split.target_labels), config.reg, config.dropout_p,
                           config.maps, config.hidden_units)
    return cl if Task(task) is Task.CL else build_cae_from_cnn(cl)


# ---------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridCell:
    strategy: AdaptationStrategy
    target_task: Task
    run_id: int

    def key(self, dataset):
        prior = self.strategy.prior_task.value if self.strategy.prior_task else None
        return cell_key(dataset, self.strategy.kind.value, prior, self.target_task.value, self.run_id)


def build_grid(config):
    """All (target task, strategy, prior task, run) cells in a fixed order."""
    cells = []
    for target in config.target_tasks:
        for name in config.strategies:
            kind = StrategyKind(name)
            priors = [None] if kind is StrategyKind.RESET else list(config.prior_tasks)
            for prior in priors:
                strategy = AdaptationStrategy(kind, prior, config.prf_lambda if kind is StrategyKind.RESET_PRF else None)
                for run_id in range(config.runs):
                    cells.append(GridCell(strategy, Task(target), run_id))
    return cells


def required_source_tasks(config):
    if all(StrategyKind(name) is StrategyKind.RESET for name in config.strategies):
        return []
    return [Task(t) for t in config.prior_tasks]


def _cell_row(config, cell, key):
    return {
        "key": key,
        "dataset": config.dataset,
        "strategy": cell.strategy.kind.value,
        "prior_task": cell.strategy.prior_task.value if cell.strategy.prior_task else NO_PRIOR,
        "target_task": cell.target_task.value,
        "run_id": cell.run_id,
        "status": "pending",
    }


def run_cell(config, split, cell, prior_checkpoint, checkpoint_path):
    """
    Train one target model and return its per-epoch metric records.

    Returns:
        tuple: ``(records, TrainResult)``
    """
    spec = target_spec(config, split, cell.target_task)
    strategy = cell.strategy
    if strategy.kind is StrategyKind.RESET_PRF:
        spec = with_reg(spec, replace(spec.reg, prior_lambda=strategy.prf_lambda))
    init_seed = derive_rng(config.seed, cell.run_id, "init").integers(0, 2**63 - 1)
    start = prepare_target(strategy, prior_checkpoint, spec, int(init_seed))

    base = {
        "dataset": config.dataset,
        "strategy": strategy.kind.value,
        "prior_task": strategy.prior_task.value if strategy.prior_task else NO_PRIOR,
        "target_task": cell.target_task.value,
        "run_id": cell.run_id,
    }
    records = []

    def on_epoch(epoch, train_loss, valid_loss, params):
        test = evaluate(spec, params, split.target.test, cell.target_task)
        values = {"train_loss": train_loss, "valid_loss": valid_loss, "test_loss": test["loss"]}
        if "accuracy" in test:
            values["test_accuracy"] = test["accuracy"]
        for metric in METRICS:
            if metric in values:
                records.append({**base, "epoch": epoch, "metric": metric, "value": float(values[metric])})
        logger.debug("%s epoch %d: %s", strategy.label, epoch, values)

    result = train_network(spec, start.params, split.target.train, split.target.valid, config, cell.run_id,
                           TARGET_STREAM, start.prior_binding, on_epoch)
    save_checkpoint(checkpoint_path, spec, result.params, {
        "strategy": strategy.label,
        "target_task": cell.target_task.value,
        "run_id": cell.run_id,
        "seed": config.seed,
        "synthetic_items": config.synthetic_items,
        "labels": list(split.target_labels),
        "best_epoch": result.best_epoch,
        "halt_epoch": result.halt_epoch,
    })
    return records, result


def _run_cell_job(args):
    config, split, cell, prior_path, checkpoint_path = args
    try:
        prior = load_checkpoint(prior_path) if prior_path else None
        records, result = run_cell(config, split, cell, prior, checkpoint_path)
        return records, result.best_epoch, result.halt_epoch, None
    except (ConvAdaptError, OSError) as e:
        return [], None, None, f"{type(e).__name__}: {e}"


def source_key(config, task):
    return f"{config.dataset}-source-{Task(task).value}"


def run_split(dataset, config, run_id):
    """Domain split of one run; the target few-shot draw is seeded by ``run_id``."""
    seed = int(derive_rng(config.seed, run_id, "fewshot").integers(2**31))
    return split_domains(dataset, config.source_labels, config.target_labels,
                         FewShotSpec(config.k_per_class, seed), source_limit=config.source_limit)


def train_sources(config, split, ledger, checkpoint_dir):
    """
    Train (or reload) the source models.

    A source whose training fails is marked failed in the ledger and left out
    of the result; the cells that need it fail without aborting the grid.

    Returns:
        dict: ``{Task: checkpoint path}`` of the available source models
    """
    paths = {}
    for task in required_source_tasks(config):
        key = source_key(config, task)
        path = checkpoint_dir / f"source-{task.value}.ckpt"
        cell = ledger.get_cell(key)
        if cell and cell["status"] == "complete" and path.exists():
            logger.info("reusing source %s model from %s", task.value, path)
            paths[task] = path
            continue
        ledger.save_cell({"key": key, "dataset": config.dataset, "strategy": "SOURCE", "prior_task": NO_PRIOR,
                          "target_task": task.value, "run_id": 0, "status": "running"})
        started = time.time()
        try:
            spec = source_spec(config, split, task)
            params = init_params(spec, derive_rng(config.seed, 0, "source", SOURCE_STREAMS[task]))
            result = train_network(spec, params, split.source.train, split.source.valid, config, 0,
                                   SOURCE_STREAMS[task])
            save_checkpoint(path, spec, result.params, {"task": task.value, "seed": config.seed,
                                                        "synthetic_items": config.synthetic_items,
                                                        "labels": list(split.source_labels),
                                                        "best_epoch": result.best_epoch,
                                                        "halt_epoch": result.halt_epoch})
        except (ConvAdaptError, OSError) as e:
            error = f"{type(e).__name__}: {e}"
            ledger.mark_cell(key, status="failed", error=error)
            logger.error("source %s training failed: %s", task.value, error)
            continue
        ledger.mark_cell(key, status="complete", checkpoint=str(path), best_epoch=result.best_epoch,
                         halt_epoch=result.halt_epoch, error=None)
        logger.info("source %s trained in %s: best epoch %d, valid loss %.5g", task.value,
                    format_duration(time.time() - started), result.best_epoch, result.best_validation_loss)
        paths[task] = path
    return paths


@dataclass
class ExperimentResult:
    out_dir: Path
    failed: list
    completed: int


def run_experiment(config):
    """
    Run the full source-to-target experiment described by ``config``.

    Cells already complete in the output directory's ledger are not rerun, so
    an interrupted experiment resumes where it stopped. Source models are
    trained once on run 0's source split; every run draws its own few-shot
    target split. A failing cell or source model is recorded and the rest of
    the grid still runs.

    Args:
        config (ExperimentConfig): Experiment description

    Returns:
        ExperimentResult: Output directory, failed cell keys and completed cell count
    """
    dataset = load_dataset(config)
    out_dir = Path(config.out_dir)
    checkpoint_dir = out_dir / "checkpoints"
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config.txt")
    ledger = db.open_ledger(out_dir)
    started = time.time()
    logger.info("experiment %s (%s preset) -> %s", config.dataset, config.preset, out_dir)

    try:
        splits = {run_id: run_split(dataset, config, run_id) for run_id in range(config.runs)}
        first = splits[0]
        logger.info("source %d/%d/%d, target %d/%d/%d items", len(first.source.train), len(first.source.valid),
                    len(first.source.test), len(first.target.train), len(first.target.valid),
                    len(first.target.test))
        sources = train_sources(config, first, ledger, checkpoint_dir)
        failed = [source_key(config, task) for task in required_source_tasks(config) if task not in sources]

        jobs = []
        for cell in build_grid(config):
            key = cell.key(config.dataset)
            existing = ledger.get_cell(key)
            if existing and existing["status"] == "complete":
                continue
            ledger.save_cell(_cell_row(config, cell, key))
            prior_task = cell.strategy.prior_task
            if cell.strategy.needs_prior and prior_task not in sources:
                source = ledger.get_cell(source_key(config, prior_task))
                error = f"source {prior_task.value} model unavailable: {(source or {}).get('error') or 'not trained'}"
                ledger.save_metrics(key, [])
                ledger.mark_cell(key, status="failed", error=error)
                logger.error("cell %s failed: %s", key, error)
                failed.append(key)
                continue
            prior_path = sources[prior_task] if cell.strategy.needs_prior else None
            jobs.append((key, (config, splits[cell.run_id], cell, prior_path, checkpoint_dir / f"{key}.ckpt")))

        for key, outcome in _execute(jobs, config.workers):
            records, best_epoch, halt_epoch, error = outcome
            if error is None and ledger.save_metrics(key, records):
                ledger.mark_cell(key, status="complete", checkpoint=str(checkpoint_dir / f"{key}.ckpt"),
                                 best_epoch=best_epoch, halt_epoch=halt_epoch, error=None)
                status = "complete"
            else:
                ledger.save_metrics(key, [])
                ledger.mark_cell(key, status="failed", error=error or "metrics not stored")
                failed.append(key)
                status = "failed"
            logger.log(get_status_level(status), "cell %s %s%s", key, status, f": {error}" if error else "")

        write_outputs(ledger, out_dir)
        completed = len(ledger.get_cells(status="complete"))
    finally:
        ledger.close()
    logger.info("experiment finished in %s: %d cells complete, %d failed", format_duration(time.time() - started),
                completed, len(failed))
    return ExperimentResult(out_dir=out_dir, failed=failed, completed=completed)


def _execute(jobs, workers):
    if workers <= 1:
        for key, args in jobs:
            yield key, _run_cell_job(args)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for (key, _), outcome in zip(jobs, pool.map(_run_cell_job, [args for _, args in jobs])):
            yield key, outcome


# ---------------------------------------------------------------- CSV output


def records_frame(records):
    frame = pd.DataFrame(list(records), columns=RECORD_COLUMNS)
    frame["prior_task"] = frame["prior_task"].fillna(NO_PRIOR)
    return frame.sort_values(["dataset", "strategy", "prior_task", "target_task", "metric", "run_id", "epoch"],
                             kind="mergesort").reset_index(drop=True)


def average_runs(records):
    """
    Mean curve over runs per (dataset, strategy, prior, target task, metric, epoch).

    A run that halted before the last epoch of its group contributes its last
    recorded value to the later epochs.

    Args:
        records (pandas.DataFrame or iterable of dict): Raw records

    Returns:
        pandas.DataFrame: Columns ``CURVE_KEYS + [epoch, value, runs]``
    """
    frame = records if isinstance(records, pd.DataFrame) else records_frame(records)
    if frame.empty:
        raise UsageError("average_runs needs at least one record")
    frame = frame.assign(prior_task=frame["prior_task"].fillna(NO_PRIOR))
    pieces = []
    for group_key, group in frame.groupby(CURVE_KEYS, sort=True):
        table = group.pivot(index="epoch", columns="run_id", values="value").sort_index(axis=1)
        epochs = range(int(table.index.min()), int(table.index.max()) + 1)
        table = table.reindex(epochs).ffill()
        piece = pd.DataFrame({"epoch": list(epochs), "value": table.mean(axis=1).to_numpy(),
                              "runs": table.notna().sum(axis=1).to_numpy()})
        for name, value in zip(CURVE_KEYS, group_key):
            piece[name] = value
        pieces.append(piece)
    averaged = pd.concat(pieces, ignore_index=True)
    return averaged[CURVE_KEYS + ["epoch", "value", "runs"]]


def compare_curves(averaged, baseline="RESET"):
    """
    Learning-curve comparison of every strategy against a baseline strategy.

    ``jumpstart`` compares the first epoch, ``asymptotic_gain`` the last and
    ``area_gain`` the mean over the baseline's epochs. Positive values mean the
    strategy is better than the baseline (lower loss, higher accuracy).

    Args:
        averaged (pandas.DataFrame): Output of ``average_runs``
        baseline (str): Baseline strategy name

    Returns:
        pandas.DataFrame: One row per (dataset, strategy, prior_task, target_task, metric)
    """
    rows = []
    for (dataset, target, metric), group in averaged.groupby(["dataset", "target_task", "metric"], sort=True):
        base = group[group["strategy"] == baseline].set_index("epoch")["value"]
        if base.empty:
            continue
        sign = -1.0 if metric.endswith("accuracy") else 1.0
        for (strategy, prior), curve in group.groupby(["strategy", "prior_task"], sort=True):
            if strategy == baseline:
                continue
            values = curve.set_index("epoch")["value"]
            aligned = values.reindex(base.index).ffill()
            rows.append({
                "dataset": dataset, "strategy": strategy, "prior_task": prior, "target_task": target,
                "metric": metric,
                "jumpstart": sign * (base.iloc[0] - values.iloc[0]),
                "asymptotic_gain": sign * (base.iloc[-1] - values.iloc[-1]),
                "area_gain": sign * float(np.mean(base.to_numpy() - aligned.to_numpy())),
            })
    return pd.DataFrame(rows, columns=["dataset", "strategy", "prior_task", "target_task", "metric", "jumpstart",
                                       "asymptotic_gain", "area_gain"])


def write_averaged_csv(averaged, path):
    with open(path, "w", newline="") as f:
        f.write(PADDING_NOTE + "\n")
        averaged.to_csv(f, index=False)


def read_records_csv(path):
    return pd.read_csv(path, comment="#", keep_default_na=False)


def write_outputs(ledger, out_dir):
    """Export raw metrics, averaged curves, the curve comparison and the manifest."""
    out_dir = Path(out_dir)
    ledger.export_manifest(out_dir / "MANIFEST")
    records = ledger.get_all_metrics()
    if not records:
        logger.warning("no completed cells; metrics CSVs not written")
        return
    frame = records_frame(records)
    frame.to_csv(out_dir / "metrics.csv", index=False)
    averaged = average_runs(frame)
    write_averaged_csv(averaged, out_dir / "metrics_averaged.csv")
    compare_curves(averaged).to_csv(out_dir / "transfer_summary.csv", index=False)


def evaluate_checkpoint(path, config, task):
    """
    Evaluate a saved model on the test partition of the classes it was trained on.

    The dataset is rebuilt with the seed and synthetic size recorded in the
    checkpoint, so synthetic data matches what the model was trained on.

    Args:
        path (str or Path): Checkpoint written by the harness
        config (ExperimentConfig): Locates the dataset
        task (Task): Task to evaluate

    Returns:
        dict: ``evaluate`` metrics
    """
    checkpoint = load_checkpoint(path)
    labels = checkpoint.metadata.get("labels")
    if not labels:
        raise UsageError(f"{path} does not record the labels it was trained on")
    recorded = {name: checkpoint.metadata[name] for name in ("seed", "synthetic_items") if name in checkpoint.metadata}
    dataset = load_dataset(replace(config, **recorded))
    test = dataset.partition("test")
    test = test.subset(np.flatnonzero(np.isin(test.labels, labels)))
    test = test.relabel({old: new for new, old in enumerate(labels)},
                        [dataset.class_names[c] for c in labels])
    return evaluate(checkpoint.spec, checkpoint.params, test, task)
