"""
Command-line entry point.

    python main.py run --dataset mnist --preset desk --out runs/mnist-desk
    python main.py run --config runs/mnist-desk/config.txt
    python main.py average runs/mnist-desk/metrics.csv averaged.csv
    python main.py eval --checkpoint runs/mnist-desk/checkpoints/source-CL.ckpt --dataset mnist --task CL

Exit status: 0 on success, 1 when grid cells failed, 2 on configuration or
usage errors.
"""

import argparse
import logging
import sys
from dataclasses import fields, replace

import harness
from errors import ConvAdaptError

logger = logging.getLogger(__name__)

# Fields with dedicated flags above the generic per-field overrides.
_FIXED_FLAGS = {"dataset", "out_dir", "runs", "seed", "preset"}


def build_parser():
    parser = argparse.ArgumentParser(prog="convadapt", description="Convolutional transfer-learning experiments")
    parser.add_argument("--log-level", default="INFO", help="Logging level (DEBUG, INFO, WARNING, ...)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a source-to-target experiment")
    run.add_argument("--config", help="Flat key = value config file")
    run.add_argument("--dataset", choices=["mnist", "cifar10", "composers", "synthetic"])
    run.add_argument("--out", dest="out_dir", help="Output directory")
    run.add_argument("--runs", type=int, help="Runs averaged per grid cell")
    run.add_argument("--seed", type=int, help="Base seed")
    run.add_argument("--preset", choices=["full", "desk"])
    overrides = run.add_argument_group("hyperparameter overrides")
    for spec in fields(harness.ExperimentConfig):
        if spec.name not in _FIXED_FLAGS:
            overrides.add_argument(f"--{spec.name.replace('_', '-')}", dest=spec.name, metavar="VALUE")

    average = commands.add_parser("average", help="Average a raw metrics CSV over runs")
    average.add_argument("input", help="Raw metrics CSV")
    average.add_argument("output", help="Averaged CSV to write")

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint on its classes' test partition")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True, choices=["mnist", "cifar10", "composers", "synthetic"])
    evaluate.add_argument("--data-dir", dest="data_dir")
    evaluate.add_argument("--task", required=True, choices=["CL", "AE", "MT"])
    return parser


def config_from_args(args):
    """Preset, then config file, then command-line flags."""
    if args.config:
        config = harness.load_config(args.config)
        if args.dataset or args.preset:
            base = harness.preset_config(args.dataset or config.dataset, args.preset or config.preset)
            config = harness.load_config(args.config, base=base)
    else:
        config = harness.preset_config(args.dataset or "mnist", args.preset or "full")
    values = {}
    for spec in fields(harness.ExperimentConfig):
        value = getattr(args, spec.name, None)
        if value is None:
            continue
        values[spec.name] = value if spec.name in ("dataset", "preset") else harness.parse_value(spec.name, value)
    return replace(config, **values)


def cmd_run(args):
    config = config_from_args(args)
    result = harness.run_experiment(config)
    if result.failed:
        logger.error("%d grid cells failed: %s", len(result.failed), ", ".join(result.failed))
        return 1
    print(f"Results written to {result.out_dir}")
    return 0


def cmd_average(args):
    records = harness.read_records_csv(args.input)
    harness.write_averaged_csv(harness.average_runs(records), args.output)
    print(f"Averaged curves written to {args.output}")
    return 0


def cmd_eval(args):
    config = replace(harness.full_preset(args.dataset), data_dir=args.data_dir)
    metrics = harness.evaluate_checkpoint(args.checkpoint, config, args.task)
    for name, value in metrics.items():
        print(f"{name}: {value:.6f}")
    return 0


COMMANDS = {"run": cmd_run, "average": cmd_average, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConvAdaptError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2
    except FileNotFoundError as e:
        logger.error("File not found: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
