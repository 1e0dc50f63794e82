"""
Tests for dataset loading, splitting and normalization.
"""

import numpy as np
import pytest

from evocompress.datasets import (
    builtin_dataset,
    dataset_from_arrays,
    infer_task,
    load_dataset,
    make_image_blobs,
    split_indices,
    write_csv,
    write_image_tensor,
)
from evocompress.exceptions import DataError
from evocompress.network import Task
from evocompress.rng import make_rng


@pytest.fixture
def csv_100(tmp_path):
    r = make_rng(0, "csv")
    features = r.normal(5.0, 3.0, (100, 4))
    targets = (features[:, 0] > 5.0).astype(int)
    return write_csv(str(tmp_path / "table.csv"), features, targets)


def _write(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    return str(path)


def test_split_sizes(csv_100):
    """Test the 70/15/15 split of 100 rows."""
    data = load_dataset(csv_100)

    assert (len(data.train_idx), len(data.val_idx), len(data.test_idx)) == (70, 15, 15)
    assert data.task == Task.BINARY
    assert data.input_shape == (4,)


def test_split_is_disjoint_and_seeded():
    """Test that the split covers every row once and depends on the seed."""
    a = split_indices(50, seed=1)
    b = split_indices(50, seed=1)
    c = split_indices(50, seed=2)

    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])
    assert np.array_equal(np.sort(np.concatenate(a)), np.arange(50))


def test_bad_split_fractions():
    """Test that fractions must sum to one."""
    with pytest.raises(ValueError):
        split_indices(10, fractions=(0.5, 0.5, 0.5))


def test_zscore_uses_train_statistics(csv_100):
    """Test zero mean and unit std on the train split."""
    data = load_dataset(csv_100)

    assert np.all(np.abs(data.x_train.mean(axis=0)) < 1e-9)
    assert np.allclose(data.x_train.std(axis=0), 1.0)
    assert data.mean.shape == (4,)


def test_constant_column_is_not_scaled():
    """Test that a zero-variance column keeps std 1."""
    features = np.column_stack([np.ones(20), np.arange(20.0)])
    data = dataset_from_arrays(features, np.arange(20) % 2)

    assert data.std[0] == 1.0
    assert np.all(data.features[:, 0] == 0.0)


def test_short_row_reports_line(tmp_path):
    """Test that a missing field is reported at its file line."""
    path = _write(tmp_path, "a,b,target\n1,2,0\n3,4\n5,6,1\n")
    with pytest.raises(DataError) as info:
        load_dataset(path)

    assert info.value.line == 3
    assert str(info.value).startswith("line 3:")


def test_extra_field_reports_line(tmp_path):
    """Test that a row with too many fields is reported at its file line."""
    path = _write(tmp_path, "a,b,target\n1,2,0\n3,4,1,9\n5,6,1\n")
    with pytest.raises(DataError) as info:
        load_dataset(path)

    assert info.value.line == 3


@pytest.mark.parametrize("cell", ["nan", "abc"])
def test_nan_and_text_cells(tmp_path, cell):
    """Test that NaN and non-numeric cells are rejected with their line."""
    path = _write(tmp_path, f"a,b,target\n1,2,0\n3,4,1\n5,{cell},1\n")
    with pytest.raises(DataError) as info:
        load_dataset(path)

    assert info.value.line == 4
    assert "'b'" in str(info.value)


def test_missing_file(tmp_path):
    """Test that a missing dataset raises DataError."""
    with pytest.raises(DataError, match="not found"):
        load_dataset(str(tmp_path / "absent.csv"))


def test_timeseries_is_regression(csv_100):
    """Test that the timeseries format always means regression."""
    data = load_dataset(csv_100, fmt="timeseries")
    assert data.task == Task.REGRESSION
    assert data.targets.dtype == np.float64


def test_image_tensor(tmp_path):
    """Test the binary image format end to end."""
    pixels, labels = make_image_blobs(n=40, classes=4, size=6, seed=1)
    path = write_image_tensor(str(tmp_path / "blobs.evim"), pixels, labels)

    data = load_dataset(path, fmt="image")

    assert data.input_shape == (1, 6, 6)
    assert data.task == Task.MULTICLASS
    assert data.num_classes == 4
    assert data.features.max() <= 1.0


def test_image_tensor_errors(tmp_path):
    """Test bad magic and truncated image files."""
    pixels, labels = make_image_blobs(n=5, classes=2, size=4, seed=2)
    path = tmp_path / "blobs.evim"
    write_image_tensor(str(path), pixels, labels)
    raw = path.read_bytes()

    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        load_dataset(str(path), fmt="image")

    path.write_bytes(raw[:-1])
    with pytest.raises(DataError, match="expected"):
        load_dataset(str(path), fmt="image")


def test_infer_task():
    """Test task inference from target values."""
    assert infer_task(np.array([0, 1, 1, 0])) == (Task.BINARY, 2)
    assert infer_task(np.array([0, 1, 2, 2])) == (Task.MULTICLASS, 3)
    assert infer_task(np.array([0.5, 1.25, 3.0]))[0] == Task.REGRESSION


def test_builtin_datasets():
    """Test the shapes and tasks of the synthetic datasets."""
    blobs = builtin_dataset("image_blobs", seed=0, n=50)
    series = builtin_dataset("autoregressive", seed=0, n=50)

    assert blobs.input_shape == (1, 16, 16) and blobs.task == Task.MULTICLASS
    assert series.input_shape == (24,) and series.task == Task.REGRESSION
    with pytest.raises(DataError):
        builtin_dataset("mnist")


def test_builtin_is_deterministic():
    """Test that a seed fixes the generated data and split."""
    a = builtin_dataset("two_gaussians", seed=5, n=60)
    b = builtin_dataset("two_gaussians", seed=5, n=60)

    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.train_idx, b.train_idx)
