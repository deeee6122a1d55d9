"""Datasets and the two on-disk formats (CSV and IDX)."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer class labels.

    Arrays are copied to float64 / int64 and made read-only so a dataset can
    be shared between threads.
    """

    features: np.ndarray
    labels: np.ndarray
    c: int = field(default=0)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise DataFormatError(
                f"labels shape {y.shape} does not match {x.shape[0]} feature rows"
            )
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataFormatError("dataset needs at least one example")
        if not np.all(np.isfinite(x)):
            row = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise DataFormatError(f"non-finite feature at row {row}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataFormatError("labels must be integers")
        y = y.astype(np.int64, copy=True)
        c = int(self.c) if self.c else int(y.max()) + 1
        bad = np.flatnonzero((y < 0) | (y >= c))
        if bad.size:
            raise DataFormatError(f"label out of range at row {int(bad[0])}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def example(self, i: int) -> tuple[np.ndarray, int]:
        return self.features[i], int(self.labels[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.c)


def load_dataset(path, format: str = "csv", n_classes: int | None = None) -> Dataset:
    """Load a dataset from disk.

    Parameters
    ----------
    path
        A CSV path, or for ``format="idx"`` a pair ``(images, labels)``
        (a single string ``"images+labels"`` is also accepted).
    format
        ``"csv"`` or ``"idx"`` (alias ``"idx-images+idx-labels"``).
    n_classes
        Number of classes. Inferred from the labels when omitted.
    """
    if format == "csv":
        return _load_csv(os.fspath(path), n_classes)
    if format in ("idx", "idx-images+idx-labels"):
        if isinstance(path, (str, os.PathLike)):
            parts = os.fspath(path).split("+")
            if len(parts) != 2:
                raise DataFormatError("idx format needs 'images+labels' paths")
            path = parts
        images, labels = path
        y = read_idx(labels, IDX_LABELS_MAGIC)
        raw = read_idx(images, IDX_IMAGES_MAGIC)
        x = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
        if x.shape[0] != y.shape[0]:
            raise DataFormatError(
                f"idx image count {x.shape[0]} != label count {y.shape[0]}"
            )
        return Dataset(x, y.astype(np.int64), n_classes or 0)
    raise DataFormatError(f"unknown dataset format {format!r}")


def _load_csv(path: str, n_classes: int | None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        expected = ["label"] + [f"f{j}" for j in range(len(header) - 1)]
        if len(header) < 2 or header != expected:
            raise DataFormatError(
                f"{path}: malformed header, expected 'label,f0,f1,...'"
            )
        width = len(header)
        labels, rows = [], []
        for k, row in enumerate(reader):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(f"{path}: row {k} has {len(row)} fields")
            try:
                labels.append(int(row[0], 10))
            except ValueError:
                raise DataFormatError(f"{path}: non-integer label at row {k}") from None
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataFormatError(f"{path}: non-numeric feature at row {k}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if n_classes is not None:
        bad = np.flatnonzero((y < 0) | (y >= n_classes))
        if bad.size:
            raise DataFormatError(f"label out of range at row {int(bad[0])}")
    return Dataset(np.array(rows, dtype=np.float64), y, n_classes or 0)


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read a big-endian unsigned-byte IDX file."""
    with _open(path) as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise DataFormatError(f"{path}: bad magic (file too short)")
        (magic,) = struct.unpack(">I", head)
        if magic != expected_magic:
            raise DataFormatError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DataFormatError(f"{path}: truncated payload")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX1 (1-d) or IDX3 (3-d)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("only 1-d labels and 3-d images are supported")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def write_csv(path, dataset: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.d)])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x])
