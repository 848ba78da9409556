"""Datasets: seeded synthetic generators and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rng import stream


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.x_train) + len(self.x_test), self.n_features)


def split(x: np.ndarray, y: np.ndarray, test_fraction: float, seed: int,
          n_classes: int | None = None) -> Dataset:
    n = len(x)
    order = stream(seed, 0x5917).permutation(n)
    n_test = int(round(n * test_fraction))
    test, train = order[:n_test], order[n_test:]
    k = int(n_classes if n_classes is not None else (y.max() + 1 if n else 0))
    return Dataset(x[train], y[train], x[test], y[test], k)


def standardize(ds: Dataset) -> Dataset:
    """Center and scale columns with train-split statistics; a zero-variance
    column keeps std 1 so it ends up all zeros."""
    mean = ds.x_train.mean(axis=0) if len(ds.x_train) else np.zeros(ds.n_features)
    std = ds.x_train.std(axis=0) if len(ds.x_train) else np.ones(ds.n_features)
    std = np.where(std > 0, std, 1.0)
    return Dataset((ds.x_train - mean) / std, ds.y_train, (ds.x_test - mean) / std, ds.y_test, ds.n_classes)


def synth_dataset(kind: str, n: int, classes: int, noise: float, seed: int,
                  test_fraction: float = 0.25) -> Dataset:
    """``blobs``: gaussian clusters centred on a circle of radius 3.
    ``spirals``: one arm per class, radius growing over 1.5 turns, with
    angular noise of standard deviation ``noise`` radians."""
    if n < classes:
        raise DatasetError(f"need n >= classes, got n={n}, classes={classes}")
    rng = stream(seed, 0xDA7A)
    y = np.arange(n) % classes
    if kind == "blobs":
        angles = 2 * np.pi * y / classes
        centers = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        x = centers + noise * rng.standard_normal((n, 2))
    elif kind == "spirals":
        t = np.sqrt(rng.random(n))
        theta = 3 * np.pi * t + 2 * np.pi * y / classes + noise * rng.standard_normal(n)
        x = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
    else:
        raise DatasetError(f"unknown synthetic dataset {kind!r}")
    return standardize(split(x, y.astype(np.int64), test_fraction, seed, classes))


def load_csv(path, label_column: str, test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Read a headed UTF-8 CSV of numeric features plus an integer label column."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DatasetError(f"{path}: missing label column {label_column!r}")
        li = header.index(label_column)
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            values = []
            for ci, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {row_no}, column {header[ci]!r}: non-numeric cell {cell!r}") from None
            label = values.pop(li)
            if label != int(label) or label < 0:
                raise DatasetError(f"{path}: row {row_no}: label {label!r} is not a class index")
            feats.append(values)
            labels.append(int(label))
    x = np.array(feats, dtype=np.float64).reshape(len(feats), len(header) - 1)
    y = np.array(labels, dtype=np.int64)
    return standardize(split(x, y, test_fraction, seed))
