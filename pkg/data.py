"""
Dataset loading, domain splitting and few-shot subsampling.

File formats read here:

MNIST (IDX, big-endian)::

    images: uint32 magic 0x00000803 | uint32 count | uint32 rows | uint32 cols | uint8 pixels...
    labels: uint32 magic 0x00000801 | uint32 count | uint8 labels...

    Files ``train-images-idx3-ubyte``, ``train-labels-idx1-ubyte``,
    ``t10k-images-idx3-ubyte``, ``t10k-labels-idx1-ubyte`` (optionally ``.gz``).
    The last 10,000 training images form the validation partition.

CIFAR-10 (binary batches ``data_batch_1.bin`` ... ``data_batch_5.bin``, ``test_batch.bin``)::

    repeated 3073-byte records: uint8 label | 1024 red | 1024 green | 1024 blue (row-major 32x32)

    The last 12,500 training records form the validation partition.

Piano-roll manifest (text, one item per line, ``#`` starts a comment)::

    path,label,piece_id[,partition]

    ``path`` is relative to the manifest's directory. A raster is either a raw
    row-major byte grid of 68 pitch rows x 400 time columns holding 0/1, or a
    grayscale PNG of that size (pixels above 127 count as 1). ``label`` is a
    class name or index; ``partition`` is ``train``, ``valid`` or ``test``.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from PIL import Image

from errors import ConfigError, FormatError, LeakageError

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "valid", "test")

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_VALIDATION_SIZE = 10_000

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
CIFAR10_RECORD = 3073
CIFAR10_VALIDATION_SIZE = 12_500

PIANO_PITCHES = 68
STEPS_PER_QUARTER = 8
EXCERPT_QUARTERS = 50
HOP_QUARTERS = 10
PIANO_STEPS = EXCERPT_QUARTERS * STEPS_PER_QUARTER

COMPOSER_CLASSES = (
    "telemann_cantatas",
    "bach_cantatas",
    "handel_concerti_grossi",
    "handel_trio_sonatas",
    "haydn",
    "mozart",
)
# Piece-level split proportions used when a manifest carries no partition column.
PIECE_SPLIT = (0.46, 0.31, 0.23)


@dataclass
class Dataset:
    """
    Labelled images, stored raw and scaled to ``[0, 1]`` on access.

    Attributes:
        raw (numpy.ndarray): ``[N, C, H, W]`` stored values
        labels (numpy.ndarray): ``[N]`` integer class ids
        class_names (tuple): Name of each class id
        divisor (float): ``items = raw / divisor``
        partitions (numpy.ndarray, optional): ``[N]`` partition name per item
        piece_ids (numpy.ndarray, optional): ``[N]`` piece id per item (piano-rolls)
    """

    raw: np.ndarray
    labels: np.ndarray
    class_names: tuple
    divisor: float = 1.0
    partitions: Optional[np.ndarray] = None
    piece_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.raw) != len(self.labels):
            raise FormatError(f"{len(self.raw)} items but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise FormatError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return len(self.labels)

    @property
    def items(self):
        return self.raw.astype(np.float64) / self.divisor

    @property
    def item_shape(self):
        return tuple(self.raw.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            raw=self.raw[indices],
            labels=self.labels[indices],
            class_names=self.class_names,
            divisor=self.divisor,
            partitions=None if self.partitions is None else self.partitions[indices],
            piece_ids=None if self.piece_ids is None else self.piece_ids[indices],
        )

    def partition(self, name):
        if self.partitions is None:
            raise ConfigError("dataset carries no train/valid/test partition")
        return self.subset(np.flatnonzero(self.partitions == name))

    def one_hot(self, num_classes=None):
        num_classes = num_classes or len(self.class_names)
        out = np.zeros((len(self), num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def relabel(self, label_map, class_names):
        """Copy with labels mapped through ``label_map`` (old id -> new id)."""
        mapped = np.array([label_map[int(label)] for label in self.labels], dtype=np.int64)
        return Dataset(self.raw, mapped, tuple(class_names), self.divisor, self.partitions, self.piece_ids)

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.class_names))


@dataclass
class DomainData:
    train: Dataset
    valid: Dataset
    test: Dataset


@dataclass
class DomainSplit:
    """
    A dataset divided into a source and a target domain by label.

    Labels in each domain are re-indexed to ``0..k-1``; ``source_labels`` and
    ``target_labels`` hold the original label of each new index.
    """

    source: DomainData
    target: DomainData
    source_labels: tuple
    target_labels: tuple
    source_indices: dict = field(default_factory=dict)
    target_indices: dict = field(default_factory=dict)

    @property
    def target_map(self):
        return {new: old for new, old in enumerate(self.target_labels)}


@dataclass(frozen=True)
class FewShotSpec:
    k_per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.k_per_class < 1:
            raise ConfigError(f"k_per_class must be >= 1, got {self.k_per_class}")


# ---------------------------------------------------------------- MNIST


def _open_maybe_gz(directory, name):
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            opener = gzip.open if candidate.suffix == ".gz" else open
            with opener(candidate, "rb") as f:
                return f.read()
    raise ConfigError(f"MNIST file {name} not found in {directory}")


def parse_idx_images(blob, source="images"):
    if len(blob) < 16:
        raise FormatError(f"{source}: IDX header truncated")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise FormatError(f"{source}: bad IDX image magic 0x{magic:08x}")
    expected = count * rows * cols
    if len(blob) - 16 != expected:
        raise FormatError(f"{source}: header declares {expected} pixel bytes, payload has {len(blob) - 16}")
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)


def parse_idx_labels(blob, source="labels"):
    if len(blob) < 8:
        raise FormatError(f"{source}: IDX header truncated")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != MNIST_LABEL_MAGIC:
        raise FormatError(f"{source}: bad IDX label magic 0x{magic:08x}")
    if len(blob) - 8 != count:
        raise FormatError(f"{source}: header declares {count} labels, payload has {len(blob) - 8}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist(directory, validation_size=MNIST_VALIDATION_SIZE):
    """
    Load MNIST train and test files into one partitioned dataset.

    Args:
        directory (str or Path): Folder holding the four IDX files
        validation_size (int): Trailing training images used for validation

    Returns:
        Dataset: 1x28x28 items scaled by 1/255 with train/valid/test partitions
    """
    directory = Path(directory)
    parts = []
    for prefix in ("train", "t10k"):
        images = parse_idx_images(_open_maybe_gz(directory, f"{prefix}-images-idx3-ubyte"), f"{prefix} images")
        labels = parse_idx_labels(_open_maybe_gz(directory, f"{prefix}-labels-idx1-ubyte"), f"{prefix} labels")
        if len(images) != len(labels):
            raise FormatError(f"{prefix}: {len(images)} images but {len(labels)} labels")
        parts.append((images, labels))
    (train_x, train_y), (test_x, test_y) = parts
    partitions = np.array(["train"] * (len(train_y) - validation_size) + ["valid"] * validation_size
                          + ["test"] * len(test_y))
    logger.info("loaded MNIST from %s: %d items", directory, len(partitions))
    return Dataset(
        raw=np.concatenate([train_x, test_x]),
        labels=np.concatenate([train_y, test_y]),
        class_names=tuple(str(d) for d in range(10)),
        divisor=255.0,
        partitions=partitions,
    )


# ---------------------------------------------------------------- CIFAR-10


def parse_cifar_batch(blob, source="batch"):
    if len(blob) % CIFAR10_RECORD:
        raise FormatError(f"{source}: {len(blob)} bytes is not a whole number of {CIFAR10_RECORD}-byte records")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= len(CIFAR10_CLASSES):
        raise FormatError(f"{source}: label {labels.max()} out of range")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, validation_size=CIFAR10_VALIDATION_SIZE):
    """
    Load the six CIFAR-10 binary batches into one partitioned dataset.

    Args:
        directory (str or Path): Folder holding ``data_batch_*.bin`` and ``test_batch.bin``
        validation_size (int): Trailing training records used for validation

    Returns:
        Dataset: 3x32x32 items scaled by 1/255
    """
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    images, labels = [], []
    for name in names:
        path = directory / name
        if not path.exists():
            raise ConfigError(f"CIFAR-10 batch {name} not found in {directory}")
        x, y = parse_cifar_batch(path.read_bytes(), name)
        images.append(x)
        labels.append(y)
    n_train = sum(len(y) for y in labels[:-1])
    partitions = np.array(["train"] * (n_train - validation_size) + ["valid"] * validation_size
                          + ["test"] * len(labels[-1]))
    logger.info("loaded CIFAR-10 from %s: %d items", directory, len(partitions))
    return Dataset(np.concatenate(images), np.concatenate(labels), CIFAR10_CLASSES, 255.0, partitions)


# ---------------------------------------------------------------- piano-rolls


def read_raster(path, shape=(PIANO_PITCHES, PIANO_STEPS)):
    path = Path(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as image:
            grid = (np.asarray(image.convert("L")) > 127).astype(np.uint8)
    else:
        blob = path.read_bytes()
        if len(blob) != shape[0] * shape[1]:
            raise FormatError(f"{path}: {len(blob)} bytes, a {shape[0]}x{shape[1]} raster needs {shape[0] * shape[1]}")
        grid = np.frombuffer(blob, dtype=np.uint8).reshape(shape)
    if grid.shape != tuple(shape):
        raise FormatError(f"{path}: raster is {grid.shape}, expected {tuple(shape)}")
    if grid.max(initial=0) > 1:
        raise FormatError(f"{path}: raster values must be 0 or 1")
    return grid


def _assign_pieces(piece_ids, seed):
    pieces = np.array(sorted(set(piece_ids)))
    order = np.random.default_rng(seed).permutation(len(pieces))
    bounds = np.cumsum(PIECE_SPLIT)[:-1] * len(pieces)
    assignment = {}
    for rank, index in enumerate(order):
        assignment[pieces[index]] = PARTITIONS[int(np.searchsorted(bounds, rank, side="right"))]
    return np.array([assignment[p] for p in piece_ids])


def check_piece_separation(piece_ids, partitions):
    """Raise ``LeakageError`` when a piece id occurs in more than one partition."""
    frame = pd.DataFrame({"piece": piece_ids, "partition": partitions})
    spread = frame.groupby("piece")["partition"].nunique()
    leaking = sorted(spread[spread > 1].index.tolist())
    if leaking:
        raise LeakageError(f"pieces appear in more than one partition: {leaking[:5]}")


def load_pianoroll(manifest, class_names=COMPOSER_CLASSES, seed=0, shape=(PIANO_PITCHES, PIANO_STEPS)):
    """
    Load piano-roll excerpts listed in a manifest.

    Args:
        manifest (str or Path): Manifest file (see module docstring)
        class_names (tuple): Class name of each label index
        seed (int): Seed of the piece-level split when no partition column is given
        shape (tuple): Raster shape ``(pitches, steps)``

    Returns:
        Dataset: 1x68x400 binary items with piece ids and partitions
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise ConfigError(f"piano-roll manifest {manifest} not found")
    table = pd.read_csv(manifest, header=None, comment="#", skipinitialspace=True, dtype=str,
                        names=["path", "label", "piece_id", "partition"])
    if table.empty:
        raise FormatError(f"{manifest}: no items")
    lookup = {name: i for i, name in enumerate(class_names)}
    labels = []
    for value in table["label"]:
        if value in lookup:
            labels.append(lookup[value])
        elif isinstance(value, str) and value.isdigit() and int(value) < len(class_names):
            labels.append(int(value))
        else:
            raise FormatError(f"{manifest}: unknown composer class {value!r}")
    rasters = np.stack([read_raster(manifest.parent / p, shape) for p in table["path"]])[:, None]
    piece_ids = table["piece_id"].to_numpy(dtype=str)
    if table["partition"].notna().all():
        partitions = table["partition"].to_numpy(dtype=str)
        unknown = set(partitions) - set(PARTITIONS)
        if unknown:
            raise FormatError(f"{manifest}: unknown partitions {sorted(unknown)}")
    else:
        partitions = _assign_pieces(piece_ids, seed)
    check_piece_separation(piece_ids, partitions)
    logger.info("loaded %d piano-roll excerpts from %s", len(labels), manifest)
    return Dataset(rasters, np.array(labels), tuple(class_names), 1.0, partitions, piece_ids)


def rasterise_notes(notes, n_steps, n_pitches=PIANO_PITCHES):
    """
    Piano-roll of a list of notes.

    Each note fills its pitch row from its onset for its duration, except the
    last 32nd step, which stays blank so repeated notes remain distinguishable.

    Args:
        notes (iterable): ``(pitch_row, onset, duration)`` in 32nd-note steps
        n_steps (int): Time columns
        n_pitches (int): Pitch rows

    Returns:
        numpy.ndarray: ``[1, n_pitches, n_steps]`` uint8 raster
    """
    roll = np.zeros((1, n_pitches, n_steps), dtype=np.uint8)
    for pitch, onset, duration in notes:
        if not 0 <= pitch < n_pitches:
            raise FormatError(f"pitch row {pitch} outside the {n_pitches}-note range")
        end = min(onset + duration - 1, n_steps)
        if end > onset:
            roll[0, pitch, max(onset, 0):end] = 1
    return roll


def excerpt_windows(roll, length=PIANO_STEPS, hop=HOP_QUARTERS * STEPS_PER_QUARTER):
    """Fixed-length excerpts of a piano-roll; a trailing partial window is dropped."""
    steps = roll.shape[-1]
    return [roll[..., start:start + length] for start in range(0, steps - length + 1, hop)]


def write_pianoroll_manifest(directory, rasters, labels, piece_ids, partitions=None):
    """
    Write rasters as raw byte grids plus a manifest.

    Args:
        directory (str or Path): Output folder
        rasters (iterable): ``[1, pitches, steps]`` or ``[pitches, steps]`` 0/1 arrays
        labels (iterable): Class names or indices
        piece_ids (iterable): Piece id per raster
        partitions (iterable, optional): Partition per raster

    Returns:
        Path: The manifest file
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# path,label,piece_id,partition"]
    partitions = list(partitions) if partitions is not None else [None] * len(labels)
    for i, (raster, label, piece, part) in enumerate(zip(rasters, labels, piece_ids, partitions)):
        name = f"roll_{i:05d}.raw"
        (directory / name).write_bytes(np.asarray(raster, dtype=np.uint8).reshape(-1).tobytes())
        lines.append(",".join(str(v) for v in (name, label, piece, part) if v is not None))
    manifest = directory / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def synthetic_pianoroll(directory, pieces_per_class=4, excerpts_per_piece=3, class_names=COMPOSER_CLASSES,
                        seed=0, n_steps=PIANO_STEPS):
    """
    Write a small random piano-roll corpus with a class-dependent pitch register.

    Returns:
        Path: The manifest file
    """
    rng = np.random.default_rng(seed)
    rasters, labels, pieces = [], [], []
    for label, name in enumerate(class_names):
        centre = 10 + label * (PIANO_PITCHES - 20) // max(len(class_names) - 1, 1)
        for piece in range(pieces_per_class):
            for _ in range(excerpts_per_piece):
                notes = []
                onset = 0
                while onset < n_steps:
                    duration = int(rng.choice([2, 4, 8]))
                    pitch = int(np.clip(centre + rng.integers(-6, 7), 0, PIANO_PITCHES - 1))
                    notes.append((pitch, onset, duration))
                    onset += duration
                rasters.append(rasterise_notes(notes, n_steps))
                labels.append(name)
                pieces.append(f"{name}-{piece}")
    return write_pianoroll_manifest(directory, rasters, labels, pieces)


def synthetic_images(n, num_classes=10, shape=(1, 28, 28), seed=0, noise=0.1, partitions=(0.7, 0.15, 0.15)):
    """
    Class-dependent stroke images in ``[0, 1]`` for tests and offline demos.

    Each class draws a bar at its own angle and offset; noise is added on top.

    Args:
        n (int): Items
        num_classes (int): Classes
        shape (tuple): Item shape ``(C, H, W)``
        seed (int): Generator seed
        noise (float): Uniform noise amplitude
        partitions (tuple): Fractions of train/valid/test items

    Returns:
        Dataset: Partitioned synthetic dataset
    """
    rng = np.random.default_rng(seed)
    channels, height, width = shape
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    rows, cols = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    images = np.empty((n, channels, height, width))
    for i, label in enumerate(labels):
        angle = np.pi * label / num_classes + rng.normal(0.0, 0.05)
        offset = (label % 3 - 1) * height / 6.0 + rng.normal(0.0, 0.5)
        distance = np.abs((rows - cy) * np.cos(angle) - (cols - cx) * np.sin(angle) - offset)
        stroke = np.exp(-(distance**2) / 2.0)
        images[i] = np.clip(stroke + noise * rng.random((channels, height, width)), 0.0, 1.0)
    n_train = int(round(partitions[0] * n))
    n_valid = int(round(partitions[1] * n))
    parts = np.array(["train"] * n_train + ["valid"] * n_valid + ["test"] * (n - n_train - n_valid))
    return Dataset(images, labels, tuple(str(c) for c in range(num_classes)), 1.0, parts)


# ---------------------------------------------------------------- splitting


def _few_shot(dataset, labels, k, rng, partition):
    chosen = []
    for label in labels:
        candidates = np.flatnonzero(dataset.labels == label)
        if len(candidates) < k:
            raise ConfigError(
                f"{partition}: class {label} has {len(candidates)} items, cannot draw {k} per class"
            )
        chosen.append(rng.choice(candidates, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


def split_domains(dataset, source_labels, target_labels, few_shot, source_limit=None):
    """
    Divide a partitioned dataset into source and target domains.

    The source domain keeps all of its train/valid/test items (train and valid
    optionally capped at ``source_limit`` items each); the target domain gets
    ``k`` items per class in train and in valid and every target test item.

    Args:
        dataset (Dataset): Dataset with train/valid/test partitions
        source_labels (iterable): Source classes (original ids)
        target_labels (iterable): Target classes (original ids)
        few_shot (FewShotSpec): Target subsampling
        source_limit (int, optional): Cap on source train and valid sizes

    Returns:
        DomainSplit: Re-indexed domains
    """
    if dataset.partitions is None:
        raise ConfigError("split_domains needs a dataset with train/valid/test partitions")
    source_labels = tuple(int(c) for c in source_labels)
    target_labels = tuple(int(c) for c in target_labels)
    if set(source_labels) & set(target_labels):
        raise ConfigError(f"source and target labels overlap: {sorted(set(source_labels) & set(target_labels))}")
    n_classes = len(dataset.class_names)
    for label in source_labels + target_labels:
        if not 0 <= label < n_classes:
            raise ConfigError(f"label {label} does not exist (dataset has {n_classes} classes)")
    if not source_labels or not target_labels:
        raise ConfigError("both domains need at least one label")

    rng = np.random.default_rng(few_shot.seed)
    source_indices, target_indices = {}, {}
    for part in PARTITIONS:
        in_part = dataset.partitions == part
        source_indices[part] = np.flatnonzero(in_part & np.isin(dataset.labels, source_labels))
        target_pool = np.flatnonzero(in_part & np.isin(dataset.labels, target_labels))
        if part == "test":
            target_indices[part] = target_pool
        else:
            picked = _few_shot(dataset.subset(target_pool), target_labels, few_shot.k_per_class, rng, part)
            target_indices[part] = target_pool[picked]
        if source_limit is not None and part != "test" and len(source_indices[part]) > source_limit:
            keep = rng.choice(len(source_indices[part]), size=source_limit, replace=False)
            source_indices[part] = np.sort(source_indices[part][keep])

    source_names = [dataset.class_names[c] for c in source_labels]
    target_names = [dataset.class_names[c] for c in target_labels]
    source_map = {old: new for new, old in enumerate(source_labels)}
    target_map = {old: new for new, old in enumerate(target_labels)}

    def domain(indices, label_map, names):
        return DomainData(*(dataset.subset(indices[p]).relabel(label_map, names) for p in PARTITIONS))

    return DomainSplit(
        source=domain(source_indices, source_map, source_names),
        target=domain(target_indices, target_map, target_names),
        source_labels=source_labels,
        target_labels=target_labels,
        source_indices=source_indices,
        target_indices=target_indices,
    )
