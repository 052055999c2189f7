"""
Plot averaged learning curves.

    python plot_curves.py runs/mnist-desk/metrics_averaged.csv --metric test_loss --out curves.png

One panel per target task, one line per strategy/prior combination.
"""

import argparse
import logging
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)


def curve_label(strategy, prior_task):
    return strategy if prior_task in ("NONE", "", None) else f"{strategy}({prior_task})"


def plot_curves(averaged, metric, out_path, every=1):
    """
    Draw one panel per target task.

    Args:
        averaged (pandas.DataFrame): Averaged curves as written by the harness
        metric (str): Metric to plot
        out_path (str): Image file to write
        every (int): Plot every ``every``-th epoch

    Returns:
        int: Number of curves drawn
    """
    frame = averaged[averaged["metric"] == metric]
    if frame.empty:
        logger.warning("no %s records to plot", metric)
        return 0
    tasks = sorted(frame["target_task"].unique())
    fig, axes = plt.subplots(1, len(tasks), figsize=(7 * len(tasks), 5), squeeze=False)
    drawn = 0
    for ax, task in zip(axes[0], tasks):
        for (strategy, prior), curve in frame[frame["target_task"] == task].groupby(["strategy", "prior_task"]):
            curve = curve.sort_values("epoch").iloc[::every]
            linestyle = "--" if strategy == "RESET" else "-"
            ax.plot(curve["epoch"], curve["value"], linestyle, label=curve_label(strategy, prior))
            drawn += 1
        ax.set_title(f"target {task}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
    plt.tight_layout()
    plt.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return drawn


def main(argv=None):
    parser = argparse.ArgumentParser(description="Plot averaged learning curves")
    parser.add_argument("csv", help="metrics_averaged.csv")
    parser.add_argument("--metric", default="test_loss")
    parser.add_argument("--out", default="curves.png")
    parser.add_argument("--every", type=int, default=1, help="Plot every n-th epoch")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    averaged = pd.read_csv(args.csv, comment="#", keep_default_na=False)
    drawn = plot_curves(averaged, args.metric, args.out, max(args.every, 1))
    if not drawn:
        return 1
    print(f"{drawn} curves written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
