"""
Dataset types and every external data format capesynth reads or writes:
IDX image/label files, CSV tables, the binary synthetic-dataset format and
a Gaussian-blob generator for desk-scale runs.
"""

import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_blobs as _sk_make_blobs
from sklearn.model_selection import train_test_split

from .errors import ConfigurationError, ContractError, DataFormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTHETIC_MAGIC = b"FDPC"
SYNTHETIC_VERSION = 1
_SYNTHETIC_HEADER = struct.Struct("<4sIIII")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Dataset:
    """
    Labelled real data: N feature rows of d_x float64 values and N integer
    labels in {0..K-1}. Arrays are copied and made read-only on construction.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, copy=True)
        if features.ndim != 2:
            raise ConfigurationError(f"features must be a 2-D matrix, got shape {features.shape}")
        if features.shape[1] < 1:
            raise ConfigurationError("features need at least one column (d_x >= 1)")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ConfigurationError(
                f"labels length {labels.shape} does not match {features.shape[0]} feature rows"
            )
        if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ConfigurationError("labels must be integers")
        labels = labels.astype(np.int64)
        if int(self.num_classes) < 1:
            raise ConfigurationError(f"num_classes must be positive, got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes - 1}]")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def require_all_classes(self, owner: str = "dataset") -> None:
        """Synthesis needs every class present at least once"""
        missing = np.flatnonzero(self.class_counts() == 0)
        if missing.size:
            raise ContractError(f"{owner} has no samples of classes {missing.tolist()}")


@dataclass(frozen=True)
class SyntheticRecord:
    """One mixed feature vector with its soft (real-valued) K-dim label"""

    features: np.ndarray
    soft_label: np.ndarray


@dataclass(frozen=True)
class SyntheticDataset:
    """
    Released (or client-local) synthetic data, stored row-wise as a T x d_x
    feature matrix and a T x K soft-label matrix.
    """

    features: np.ndarray
    soft_labels: np.ndarray
    decoded_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        soft_labels = np.array(self.soft_labels, dtype=np.float64, copy=True)
        if features.ndim != 2 or soft_labels.ndim != 2:
            raise ConfigurationError("synthetic features and soft labels must be 2-D")
        if features.shape[0] != soft_labels.shape[0]:
            raise ConfigurationError(
                f"{features.shape[0]} feature rows but {soft_labels.shape[0]} soft labels"
            )
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "soft_labels", _frozen(soft_labels))
        if self.decoded_labels is not None:
            decoded = np.array(self.decoded_labels, dtype=np.int64, copy=True)
            if decoded.shape != (features.shape[0],):
                raise ConfigurationError(
                    f"decoded_labels has {decoded.shape[0]} entries for {features.shape[0]} records"
                )
            object.__setattr__(self, "decoded_labels", _frozen(decoded))

    @classmethod
    def from_records(cls, records: Sequence[SyntheticRecord], num_features: int, num_classes: int,
                     decoded_labels: Optional[Sequence[int]] = None) -> "SyntheticDataset":
        if records:
            features = np.vstack([r.features for r in records])
            soft_labels = np.vstack([r.soft_label for r in records])
        else:
            features = np.zeros((0, num_features))
            soft_labels = np.zeros((0, num_classes))
        return cls(features, soft_labels, decoded_labels)

    @property
    def records(self) -> List[SyntheticRecord]:
        return [SyntheticRecord(f, y) for f, y in zip(self.features, self.soft_labels)]

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.soft_labels.shape[1]

    def as_dataset(self) -> Dataset:
        """Decoded view used for classifier training"""
        if self.decoded_labels is None:
            raise ConfigurationError("synthetic dataset has no decoded labels")
        return Dataset(self.features, self.decoded_labels, self.num_classes)


@contextmanager
def atomic_write(path: Union[str, Path]) -> Iterator[Path]:
    """
    Yield a temporary path next to ``path``; it replaces ``path`` only if the
    block finishes without raising.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, target)
    finally:
        if tmp.exists():
            tmp.unlink()


# ---------------------------------------------------------------- IDX

def _read_bytes(path: Union[str, Path]) -> bytes:
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "rb") as handle:
        return handle.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> tuple:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header at byte offset {len(raw)} (need 4 magic bytes)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(
            f"{path}: truncated IDX dimension header at byte offset {len(raw)} (need {header_end} bytes)"
        )
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    payload = 1
    for axis, size in enumerate(dims):
        payload *= size
        if payload > len(raw):
            raise DataFormatError(
                f"{path}: IDX dimension {axis} at byte offset {4 + 4 * axis} overflows the file "
                f"({payload} payload bytes, file has {len(raw)})"
            )
    if len(raw) - header_end != payload:
        raise DataFormatError(
            f"{path}: IDX payload at byte offset {header_end} has {len(raw) - header_end} bytes, "
            f"dimensions {dims} require {payload}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_end, count=payload)
    return dims, data


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    """
    Read an IDX image file (magic 0x00000803).

    Args:
        path: Path to the uncompressed IDX file

    Returns:
        rows x (product of remaining dims) float64 matrix with raw pixel values in [0, 255]
    """
    raw = _read_bytes(path)
    dims, data = _parse_idx(raw, IDX_IMAGES_MAGIC, path)
    rows = dims[0]
    width = int(np.prod(dims[1:], dtype=np.int64))
    images = data.astype(np.float64).reshape(rows, width)
    logger.info(f"🖼️  Read {rows} images of {width} pixels from {path}")
    return images


def read_idx_labels(path: Union[str, Path]) -> List[int]:
    """
    Read an IDX label file (magic 0x00000801).

    Returns:
        One integer per byte record
    """
    raw = _read_bytes(path)
    dims, data = _parse_idx(raw, IDX_LABELS_MAGIC, path)
    labels = data.astype(np.int64).tolist()
    logger.info(f"🏷️  Read {dims[0]} labels from {path}")
    return labels


def load_idx_dataset(images_path, labels_path, num_classes: int = 10,
                     limit: Optional[int] = None, seed: int = 42) -> Dataset:
    """
    Pair an IDX image file with its label file.

    Args:
        images_path: IDX images file
        labels_path: IDX labels file
        num_classes: K
        limit: optional size of a class-stratified random subset
        seed: subset selection seed

    Returns:
        Dataset of raw pixels and labels
    """
    features = read_idx_images(images_path)
    labels = np.asarray(read_idx_labels(labels_path), dtype=np.int64)
    if features.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path} has {features.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"{labels_path}: label {labels.max()} >= num_classes {num_classes}")
    dataset = Dataset(features, labels, num_classes)
    if limit is not None and limit < len(dataset):
        dataset = stratified_subset(dataset, limit, seed)
    return dataset


def stratified_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Class-stratified random subset of ``size`` rows"""
    keep, _ = train_test_split(
        np.arange(len(dataset)), train_size=size, stratify=dataset.labels, random_state=seed
    )
    return dataset.subset(np.sort(keep))


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple:
    """Stratified train/test split returning two Datasets"""
    train_idx, test_idx = train_test_split(
        np.arange(len(dataset)), test_size=test_fraction, stratify=dataset.labels, random_state=seed
    )
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


# ---------------------------------------------------------------- CSV

def _label_column_name(columns: Sequence[str], label_column: Union[int, str], path) -> str:
    if isinstance(label_column, int) or (isinstance(label_column, str) and label_column.isdigit()):
        index = int(label_column)
        if not 0 <= index < len(columns):
            raise DataFormatError(f"{path}: label column {index} out of range for {len(columns)} columns")
        return columns[index]
    if label_column not in columns:
        raise DataFormatError(f"{path}: no column named {label_column!r}")
    return label_column


def _parse_float(cell, row: int, column: str, path) -> float:
    if not isinstance(cell, str) or cell.strip() == "":
        raise DataFormatError(f"{path}: row {row}: missing value in column {column!r}")
    try:
        return float(cell)
    except ValueError:
        raise DataFormatError(f"{path}: row {row}: non-numeric value {cell!r} in column {column!r}")


def read_csv_dataset(path: Union[str, Path], label_column: Union[int, str],
                     num_classes: Optional[int] = None) -> Dataset:
    """
    Read a rectangular numeric CSV with a header row.

    Args:
        path: CSV file ('.' decimals, ',' delimiter)
        label_column: index or header name of the integer label column
        num_classes: K; inferred as max label + 1 when omitted

    Returns:
        Dataset with every other column as a feature
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{path}: empty CSV (header row required)")
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path}: ragged CSV: {e}")

    columns = [str(c) for c in frame.columns]
    label_name = _label_column_name(columns, label_column, path)
    feature_names = [c for c in columns if c != label_name]
    if not feature_names:
        raise DataFormatError(f"{path}: no feature columns besides {label_name!r}")

    cells = frame.to_numpy(dtype=object)
    label_pos = columns.index(label_name)
    feature_pos = [columns.index(c) for c in feature_names]
    features = np.empty((cells.shape[0], len(feature_pos)), dtype=np.float64)
    labels = np.empty(cells.shape[0], dtype=np.int64)
    for i, row in enumerate(cells, start=1):
        for j, pos in enumerate(feature_pos):
            features[i - 1, j] = _parse_float(row[pos], i, columns[pos], path)
        value = _parse_float(row[label_pos], i, label_name, path)
        if not value.is_integer() or value < 0:
            raise DataFormatError(f"{path}: row {i}: label {row[label_pos]!r} is not a non-negative integer")
        labels[i - 1] = int(value)

    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        row = int(bad[0]) + 1
        raise DataFormatError(f"{path}: row {row}: label {labels[bad[0]]} >= num_classes {num_classes}")

    logger.info(f"📄 Read {len(labels)} rows x {features.shape[1]} features from {path}")
    return Dataset(features, labels, num_classes)


def write_csv_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write features f0..f{d-1} followed by the label column, 17 significant digits"""
    frame = pd.DataFrame(dataset.features, columns=[f"f{j}" for j in range(dataset.num_features)])
    frame["label"] = dataset.labels
    with atomic_write(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.17g")
    logger.info(f"💾 Wrote {len(dataset)} rows to {path}")


# ---------------------------------------------------------------- binary synthetic format

def _record_dtype(num_features: int, num_classes: int) -> np.dtype:
    return np.dtype([
        ("features", "<f8", (num_features,)),
        ("soft_label", "<f8", (num_classes,)),
        ("label", "<u4"),
    ])


def write_binary_synthetic(dataset: SyntheticDataset, path: Union[str, Path]) -> None:
    """
    Write the FDPC binary format: header (magic, version, rows, d_x, K) then
    one little-endian record per row.
    """
    if dataset.decoded_labels is None:
        raise ConfigurationError("decoded_labels are required to write the binary synthetic format")
    rows, num_features, num_classes = len(dataset), dataset.num_features, dataset.num_classes
    table = np.zeros(rows, dtype=_record_dtype(num_features, num_classes))
    table["features"] = dataset.features
    table["soft_label"] = dataset.soft_labels
    table["label"] = dataset.decoded_labels
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as handle:
            handle.write(_SYNTHETIC_HEADER.pack(SYNTHETIC_MAGIC, SYNTHETIC_VERSION, rows, num_features, num_classes))
            handle.write(table.tobytes())
    logger.info(f"💾 Wrote {rows} synthetic records to {path}")


def read_binary_synthetic(path: Union[str, Path]) -> SyntheticDataset:
    """Read a file written by write_binary_synthetic; bit-exact"""
    raw = _read_bytes(path)
    if len(raw) < _SYNTHETIC_HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} of {_SYNTHETIC_HEADER.size} bytes)")
    magic, version, rows, num_features, num_classes = _SYNTHETIC_HEADER.unpack_from(raw, 0)
    if magic != SYNTHETIC_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {SYNTHETIC_MAGIC!r}")
    if version != SYNTHETIC_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}, expected {SYNTHETIC_VERSION}")
    dtype = _record_dtype(num_features, num_classes)
    expected = _SYNTHETIC_HEADER.size + rows * dtype.itemsize
    if len(raw) != expected:
        raise DataFormatError(f"{path}: file has {len(raw)} bytes, header promises {expected}")
    table = np.frombuffer(raw, dtype=dtype, count=rows, offset=_SYNTHETIC_HEADER.size)
    features = table["features"].reshape(rows, num_features)
    soft_labels = table["soft_label"].reshape(rows, num_classes)
    return SyntheticDataset(features, soft_labels, table["label"].astype(np.int64))


# ---------------------------------------------------------------- blobs

def make_blobs(num_classes: int = 10, per_class: int = 500, num_features: int = 20,
               cluster_spread: float = 0.5, center_scale: float = 5.0, seed: int = 42) -> Dataset:
    """
    K isotropic Gaussian clusters with centers uniform in [-center_scale, center_scale]^d_x.

    Args:
        num_classes: K
        per_class: samples drawn around each center
        num_features: d_x
        cluster_spread: per-coordinate standard deviation (0 puts every sample on its center)
        center_scale: half-width of the center box
        seed: generator seed; the result is a pure function of all arguments

    Returns:
        Dataset with per_class samples of every class
    """
    for name, value in (("num_classes", num_classes), ("per_class", per_class),
                        ("num_features", num_features), ("center_scale", center_scale)):
        if value <= 0:
            raise ConfigurationError(f"{name} must be positive, got {value}")
    if cluster_spread < 0:
        raise ConfigurationError(f"cluster_spread must be non-negative, got {cluster_spread}")
    features, labels = _sk_make_blobs(
        n_samples=[per_class] * num_classes,
        n_features=num_features,
        cluster_std=cluster_spread,
        center_box=(-center_scale, center_scale),
        shuffle=True,
        random_state=seed,
    )
    return Dataset(features, labels, num_classes)
