"""
Dataset loading, splitting and the built-in synthetic generators.

Formats
-------
csv         header row, numeric cells, last column is the target
timeseries  wide CSV: one column per time step, last column is the target
image       binary tensor: b"EVIM", u32 n, c, h, w (little endian),
            n*c*h*w u8 pixels, n u8 labels
"""

import os
import re
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .exceptions import DataError
from .network import Task
from .rng import make_rng

FORMATS = ("csv", "timeseries", "image")
IMAGE_MAGIC = b"EVIM"
DEFAULT_SPLIT = (0.7, 0.15, 0.15)

BUILTIN_DATASETS = ("two_gaussians", "image_blobs", "autoregressive")


@dataclass
class Dataset:
    """Features, targets, disjoint split indices and train-fit normalization stats."""

    features: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    task: Task
    num_classes: int = 0
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    name: str = ""

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def x_train(self) -> np.ndarray:
        return self.features[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.targets[self.train_idx]

    @property
    def x_val(self) -> np.ndarray:
        return self.features[self.val_idx]

    @property
    def y_val(self) -> np.ndarray:
        return self.targets[self.val_idx]

    @property
    def x_test(self) -> np.ndarray:
        return self.features[self.test_idx]

    @property
    def y_test(self) -> np.ndarray:
        return self.targets[self.test_idx]

    def __len__(self) -> int:
        return len(self.targets)


def split_indices(n: int, seed: int = 0, fractions: Sequence[float] = DEFAULT_SPLIT
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Seeded shuffle split.

    Train and validation sizes are ``floor(fraction * n)``; test takes the
    rest.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"Split fractions must be three non-negative values summing to 1, got {fractions}")
    order = make_rng(seed, "split").permutation(n)
    n_train = int(np.floor(fractions[0] * n + 1e-9))
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    return (np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]),
            np.sort(order[n_train + n_val:]))


def infer_task(targets: np.ndarray) -> Tuple[Task, int]:
    values = np.unique(targets)
    if np.all(values == np.round(values)) and values.min() >= 0:
        if len(values) == 2 and set(values.tolist()) <= {0, 1}:
            return Task.BINARY, 2
        if 2 < len(values) <= 256:
            return Task.MULTICLASS, int(values.max()) + 1
    return Task.REGRESSION, 0


def dataset_from_arrays(features: np.ndarray, targets: np.ndarray, task=None, seed: int = 0,
                        fractions: Sequence[float] = DEFAULT_SPLIT, normalize: str = "zscore",
                        name: str = "") -> Dataset:
    """
    Split and normalize in-memory arrays.

    Features stay float64; networks cast on input. ``normalize`` is
    ``zscore`` (per column, fit on the train split, zero
    std treated as 1), ``scale255`` (images) or ``none``.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(features) != len(targets):
        raise DataError(f"{len(features)} feature rows but {len(targets)} targets")
    if len(features) < 3:
        raise DataError("Dataset needs at least three rows to split")
    if task is None:
        task, num_classes = infer_task(targets)
    else:
        task = Task(task)
        num_classes = int(targets.max()) + 1 if task != Task.REGRESSION else 0
    if task != Task.REGRESSION:
        targets = targets.astype(np.int64)
    train_idx, val_idx, test_idx = split_indices(len(targets), seed, fractions)
    mean = std = None
    if normalize == "zscore":
        mean = features[train_idx].mean(axis=0)
        std = features[train_idx].std(axis=0)
        std = np.where(std == 0, 1.0, std)
        features = (features - mean) / std
    elif normalize == "scale255":
        features = features / 255.0
    elif normalize != "none":
        raise ValueError(f"Unknown normalization: {normalize}")
    return Dataset(features, targets, train_idx, val_idx, test_idx, task,
                   num_classes=num_classes, mean=mean, std=std, name=name)


def _read_numeric_csv(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, on_bad_lines="error", skipinitialspace=True)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataError(f"malformed row in {path}: {e}",
                        line=int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path} is empty") from e
    if frame.shape[1] < 2:
        raise DataError(f"{path} needs at least one feature column and a target column")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy() | ~np.isfinite(numeric.to_numpy(dtype=np.float64))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        # header is line 1
        raise DataError(f"missing, non-numeric or NaN value in column '{frame.columns[col]}' of {path}",
                        line=int(row) + 2)
    return numeric


def read_image_tensor(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read ``(pixels uint8 (n, c, h, w), labels uint8 (n,))`` from the binary image format."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != IMAGE_MAGIC:
        raise DataError(f"{path}: bad image tensor magic {raw[:4]!r}")
    if len(raw) < 20:
        raise DataError(f"{path}: truncated image tensor header")
    n, c, h, w = struct.unpack_from("<4I", raw, 4)
    expected = 20 + n * c * h * w + n
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {n}x{c}x{h}x{w}, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * c * h * w, offset=20).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=20 + n * c * h * w)
    return pixels.copy(), labels.copy()


def write_image_tensor(path: str, pixels: np.ndarray, labels: np.ndarray) -> str:
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, c, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack("<4I", n, c, h, w))
        f.write(pixels.tobytes())
        f.write(labels.tobytes())
    return path


def write_csv(path: str, features: np.ndarray, targets: np.ndarray,
              prefix: str = "x") -> str:
    frame = pd.DataFrame(np.asarray(features), columns=[f"{prefix}{i}" for i in range(features.shape[1])])
    frame["target"] = np.asarray(targets)
    frame.to_csv(path, index=False)
    return path


def load_dataset(path: str, fmt: str = "csv", task=None, seed: int = 0,
                 fractions: Sequence[float] = DEFAULT_SPLIT) -> Dataset:
    """
    Load a dataset file and split it.

    Parameters
    ----------
    path : str
        Dataset file.
    fmt : str
        ``csv`` (``tabular`` is accepted too), ``timeseries`` or ``image``.
    task : Task or str, optional
        Override the task inferred from the targets.
    seed : int
        Split seed.

    Raises
    ------
    DataError
        Malformed rows (with the line number), NaN cells, bad image header.
    """
    if not os.path.exists(path):
        raise DataError(f"Dataset not found: {path}")
    fmt = "csv" if fmt == "tabular" else fmt
    name = os.path.splitext(os.path.basename(path))[0]
    if fmt in ("csv", "timeseries"):
        frame = _read_numeric_csv(path)
        values = frame.to_numpy(dtype=np.float64)
        if fmt == "timeseries" and task is None:
            task = Task.REGRESSION
        return dataset_from_arrays(values[:, :-1], values[:, -1], task=task, seed=seed,
                                   fractions=fractions, normalize="zscore", name=name)
    if fmt == "image":
        pixels, labels = read_image_tensor(path)
        return dataset_from_arrays(pixels, labels, task=task, seed=seed, fractions=fractions,
                                   normalize="scale255", name=name)
    raise DataError(f"Unknown dataset format: {fmt}")


# ---- synthetic generators --------------------------------------------------------------
def make_two_gaussians(n: int = 600, dim: int = 8, separation: float = 4.0,
                       seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit-variance Gaussian classes whose means are ``separation`` apart."""
    rng = make_rng(seed, "two_gaussians")
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    direction = np.ones(dim) / np.sqrt(dim)
    offsets = (labels[:, None] * 2 - 1) * (separation / 2) * direction
    return rng.standard_normal((n, dim)) + offsets, labels


def make_image_blobs(n: int = 500, classes: int = 10, size: int = 16,
                     seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Single-channel uint8 images with one Gaussian blob at a class-specific position."""
    rng = make_rng(seed, "image_blobs")
    labels = rng.integers(0, classes, n)
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = size / 4
    centers = np.stack([size / 2 + radius * np.cos(angles), size / 2 + radius * np.sin(angles)], 1)
    yy, xx = np.mgrid[0:size, 0:size]
    jitter = rng.normal(0, 0.7, (n, 2))
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    blobs = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / 4.0)
    noise = rng.normal(0, 0.1, (n, size, size))
    pixels = np.clip((blobs + noise) * 200 + 20, 0, 255).astype(np.uint8)
    return pixels[:, None, :, :], labels.astype(np.uint8)


def make_autoregressive(n: int = 500, length: int = 24, seed: int = 0
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """AR(2) windows: ``length`` past values as features, the next value as target."""
    rng = make_rng(seed, "autoregressive")
    total = length + 1
    series = np.zeros((n, total + 20))
    noise = rng.normal(0, 1, series.shape)
    for t in range(2, series.shape[1]):
        series[:, t] = 0.6 * series[:, t - 1] - 0.2 * series[:, t - 2] + noise[:, t]
    window = series[:, -total:]
    return window[:, :-1], window[:, -1]


def builtin_dataset(name: str, seed: int = 0, n: Optional[int] = None,
                    fractions: Sequence[float] = DEFAULT_SPLIT) -> Dataset:
    """One of :data:`BUILTIN_DATASETS`, generated and split with ``seed``."""
    if name == "two_gaussians":
        x, y = make_two_gaussians(n or 600, seed=seed)
        return dataset_from_arrays(x, y, Task.BINARY, seed, fractions, "zscore", name)
    if name == "image_blobs":
        x, y = make_image_blobs(n or 500, seed=seed)
        return dataset_from_arrays(x, y, Task.MULTICLASS, seed, fractions, "scale255", name)
    if name == "autoregressive":
        x, y = make_autoregressive(n or 500, seed=seed)
        return dataset_from_arrays(x, y, Task.REGRESSION, seed, fractions, "zscore", name)
    raise DataError(f"Unknown built-in dataset: {name}")
