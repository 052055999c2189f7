import logging

import numpy as np

# Stable integer codes for the purposes a run draws randomness for.
SEED_PURPOSES = {
    "init": 1,
    "shuffle": 2,
    "dropout": 3,
    "fewshot": 4,
    "source": 5,
}


def derive_rng(base_seed, run_id, purpose, *extra):
    """
    Build the random generator for one purpose of one run.

    Every random draw in an experiment goes through here, so a run is fully
    determined by ``base_seed + run_id``. The generator is seeded from
    ``SeedSequence([base_seed, run_id, purpose_code, *extra])``.

    Args:
        base_seed (int): Experiment-wide seed
        run_id (int): Index of the run being averaged over
        purpose (str): One of the keys of ``SEED_PURPOSES``
        *extra (int): Further integers, e.g. the epoch number

    Returns:
        numpy.random.Generator: A PCG64 generator
    """
    if purpose not in SEED_PURPOSES:
        raise KeyError(f"Unknown seed purpose: {purpose}")
    entropy = [int(base_seed), int(run_id), SEED_PURPOSES[purpose], *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def cell_key(dataset, strategy, prior_task, target_task, run_id):
    """Canonical key of one grid cell, also used in checkpoint file names."""
    prior = prior_task or "NONE"
    return f"{dataset}-{strategy}-{prior}-{target_task}-run{run_id}"


def get_status_level(status):
    """
    Return the logging level used to report a grid cell status

    Args:
        status (str): Cell status value

    Returns:
        int: ``logging`` level
    """
    if status == "complete":
        return logging.INFO
    elif status in ("pending", "running"):
        return logging.DEBUG
    elif status == "failed":
        return logging.ERROR
    else:
        return logging.WARNING


def format_duration(seconds):
    """
    Format an elapsed time for log lines

    Args:
        seconds (float): Elapsed seconds

    Returns:
        str: Human readable duration
    """
    if seconds is None:
        return "N/A"

    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        minutes, secs = divmod(int(seconds), 60)
        return f"{minutes}m{secs:02d}s"
    else:
        hours, rest = divmod(int(seconds), 3600)
        return f"{hours}h{rest // 60:02d}m"
