"""Dataset ingestion, synthetic generators and pool bookkeeping.

A Pool is an immutable-by-convention bundle of a feature matrix, optional
labels, disjoint labeled/unlabeled index sets and a separately held test
split. Loaders never leak test statistics: normalization is fit on the
training rows only.
"""
from __future__ import annotations

import csv as csvlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .numerics import ShapeError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
VARIANCE_FLOOR = 1e-12


class ParseError(ValueError):
    """Malformed input file."""


@dataclass
class Pool:
    features: np.ndarray
    labels: np.ndarray | None
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    test_features: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    origin: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labeled_idx = np.asarray(self.labeled_idx, dtype=np.int64)
        self.unlabeled_idx = np.asarray(self.unlabeled_idx, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError("features must be 2-D")
        n = len(self.features)
        both = np.concatenate([self.labeled_idx, self.unlabeled_idx])
        if len(both) and (both.min() < 0 or both.max() >= n):
            raise ValueError("index sets reference rows outside the pool")
        if len(np.unique(both)) != len(both):
            raise ValueError("labeled and unlabeled index sets must be disjoint")
        if self.labels is None and len(self.labeled_idx):
            raise ValueError("labeled indices exist but the pool has no labels")
        if self.labels is not None and len(self.labels) != n:
            raise ShapeError("labels length does not match the feature matrix")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_x(self) -> np.ndarray:
        return self.features[self.labeled_idx]

    @property
    def labeled_y(self) -> np.ndarray:
        return self.labels[self.labeled_idx]

    @property
    def unlabeled_x(self) -> np.ndarray:
        return self.features[self.unlabeled_idx]

    @property
    def is_classification(self) -> bool:
        return self.labels is not None and np.issubdtype(self.labels.dtype, np.integer)


@dataclass
class DatasetSpec:
    """Recipe for building a Pool; fields depend on the source."""

    source: str
    rng_seed: int = 0
    normalization: str = "none"
    # idx_files
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None
    # csv
    csv_path: str | None = None
    target_columns: tuple[str, ...] = ()
    feature_columns: tuple[str, ...] | None = None
    test_fraction: float = 0.2
    # synth_blobs
    n_per_class: int = 100
    n_classes: int = 4
    dim: int = 2
    spread: float = 0.5
    n_test_per_class: int = 50
    # synth_regression
    n_samples: int = 500
    noise: float = 0.1
    n_test: int = 200

    def __post_init__(self):
        if self.source not in ("idx_files", "csv", "synth_blobs", "synth_regression"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.normalization not in ("minmax", "zscore", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def _read_exact(f, count: int, what: str):
    data = f.read(count)
    if len(data) != count:
        raise ParseError(
            f"truncated file while reading {what}: wanted {count} bytes at "
            f"offset {f.tell() - len(data)}, got {len(data)}"
        )
    return data


def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "magic"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(f"bad image magic {magic} at byte offset 0 in {path}")
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image header"))
        raw = _read_exact(f, n * rows * cols, "pixel data")
        extra = f.read(1)
        if extra:
            raise ParseError(f"trailing bytes at offset {f.tell() - 1} in {path}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float64) / 255.0


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "magic"))[0]
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(f"bad label magic {magic} at byte offset 0 in {path}")
        n = struct.unpack(">I", _read_exact(f, 4, "label count"))[0]
        raw = _read_exact(f, n, "label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path: str, labels_path: str) -> Pool:
    """Big-endian IDX image/label pair; pixels scaled to [0, 1], all unlabeled."""
    features = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(features) != len(labels):
        raise ParseError(
            f"image count {len(features)} != label count {len(labels)}"
        )
    return Pool(features, labels, np.empty(0, dtype=np.int64), np.arange(len(features)))


def write_idx(images_path: str, labels_path: str, images: np.ndarray,
              labels: np.ndarray, image_shape: tuple[int, int]) -> None:
    """Inverse of load_idx. Float images in [0, 1] are quantized to bytes."""
    images = np.asarray(images)
    rows, cols = image_shape
    if images.ndim != 2 or images.shape[1] != rows * cols:
        raise ShapeError(f"images must be (n, {rows * cols})")
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    if len(labels) != len(images):
        raise ShapeError("one label per image is required")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(images), rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def _zscore_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = np.sqrt(np.maximum(x.var(axis=0), VARIANCE_FLOOR))
    return mean, std


def load_csv(
    path: str,
    target_columns,
    feature_columns=None,
    test_fraction: float = 0.0,
    rng_seed: int = 0,
) -> Pool:
    """Numeric CSV with a header row, z-scored features and targets.

    feature_columns defaults to every non-target column. Normalization
    statistics come from the training rows only; an optional test fraction
    is split off first with the given seed.
    """
    target_columns = list(target_columns)
    if not target_columns:
        raise ValueError("at least one target column is required")
    with open(path, newline="") as f:
        reader = csvlib.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    for name in target_columns:
        if name not in header:
            raise ValueError(f"target column {name!r} not found in header {header}")
    if feature_columns is None:
        feature_columns = [h for h in header if h not in target_columns]
    else:
        feature_columns = list(feature_columns)
        for name in feature_columns:
            if name not in header:
                raise ValueError(f"feature column {name!r} not found in header")
    col_idx = {name: header.index(name) for name in header}

    def parse_cell(row_i: int, name: str, raw: str) -> float:
        try:
            return float(raw)
        except ValueError:
            raise ParseError(
                f"non-numeric value {raw!r} at row {row_i + 2}, column {name!r}"
            ) from None

    features = np.array(
        [[parse_cell(i, c, row[col_idx[c]]) for c in feature_columns]
         for i, row in enumerate(rows)], dtype=np.float64,
    ).reshape(len(rows), len(feature_columns))
    targets = np.array(
        [[parse_cell(i, c, row[col_idx[c]]) for c in target_columns]
         for i, row in enumerate(rows)], dtype=np.float64,
    ).reshape(len(rows), len(target_columns))

    n = len(rows)
    if test_fraction > 0.0:
        rng = np.random.default_rng(rng_seed)
        n_test = int(round(test_fraction * n))
        test_idx = np.sort(rng.choice(n, size=n_test, replace=False))
        train_mask = np.ones(n, dtype=bool)
        train_mask[test_idx] = False
    else:
        train_mask = np.ones(n, dtype=bool)
        test_idx = np.empty(0, dtype=int)

    x_train, y_train = features[train_mask], targets[train_mask]
    fm, fs = _zscore_fit(x_train)
    tm, ts = _zscore_fit(y_train)
    x_train = (x_train - fm) / fs
    y_train = (y_train - tm) / ts
    pool = Pool(x_train, y_train, np.empty(0, dtype=np.int64), np.arange(len(x_train)))
    if len(test_idx):
        pool = replace(
            pool,
            test_features=(features[test_idx] - fm) / fs,
            test_labels=(targets[test_idx] - tm) / ts,
        )
    return pool


def blob_centers(n_classes: int, dim: int) -> np.ndarray:
    """Deterministic unit-separated centers along the coordinate axes."""
    centers = np.zeros((n_classes, dim))
    for k in range(n_classes):
        centers[k, k % dim] = 1.0 + k // dim
    return centers


def synth_blobs(
    n_per_class: int,
    n_classes: int,
    dim: int,
    spread: float,
    rng_seed: int,
    n_test_per_class: int = 0,
) -> Pool:
    """Gaussian blobs at deterministic centers with exact class balance."""
    if n_per_class < 1 or n_classes < 1 or dim < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(rng_seed)
    centers = blob_centers(n_classes, dim)
    xs, ys, txs, tys = [], [], [], []
    for k in range(n_classes):
        draw = centers[k] + spread * rng.normal(size=(n_per_class + n_test_per_class, dim))
        xs.append(draw[:n_per_class])
        ys.append(np.full(n_per_class, k, dtype=np.int64))
        if n_test_per_class:
            txs.append(draw[n_per_class:])
            tys.append(np.full(n_test_per_class, k, dtype=np.int64))
    features = np.concatenate(xs)
    labels = np.concatenate(ys)
    pool = Pool(features, labels, np.empty(0, dtype=np.int64), np.arange(len(features)))
    if n_test_per_class:
        pool = replace(pool, test_features=np.concatenate(txs),
                       test_labels=np.concatenate(tys))
    return pool


def synth_regression(
    n_samples: int, dim: int, noise: float, rng_seed: int, n_test: int = 0
) -> Pool:
    """Smooth nonlinear scalar target with additive Gaussian noise.

    Targets are standardized using training statistics only.
    """
    rng = np.random.default_rng(rng_seed)
    w = rng.normal(size=dim) / np.sqrt(dim)
    total = n_samples + n_test
    x = rng.normal(size=(total, dim))
    y = x @ w + 0.5 * np.sin(2.0 * x[:, 0]) + noise * rng.normal(size=total)
    y = y[:, None]
    y_train = y[:n_samples]
    tm, ts = _zscore_fit(y_train)
    y = (y - tm) / ts
    pool = Pool(x[:n_samples], y[:n_samples],
                np.empty(0, dtype=np.int64), np.arange(n_samples))
    if n_test:
        pool = replace(pool, test_features=x[n_samples:], test_labels=y[n_samples:])
    return pool


def clone_redundant(pool: Pool, factor: int) -> Pool:
    """Replicate every sample `factor` times, keeping provenance indices.

    The first copy of each row keeps its labeled/unlabeled membership; the
    extra copies are unlabeled, so every labeled sample gains identical
    twins in the unlabeled set.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        origin = pool.origin if pool.origin is not None else np.arange(pool.n)
        return replace(pool, origin=origin.copy())
    n = pool.n
    features = np.repeat(pool.features, factor, axis=0)
    labels = None if pool.labels is None else np.repeat(pool.labels, factor, axis=0)
    base_origin = pool.origin if pool.origin is not None else np.arange(n)
    origin = np.repeat(base_origin, factor)
    labeled = pool.labeled_idx * factor
    all_rows = np.arange(n * factor)
    mask = np.ones(n * factor, dtype=bool)
    mask[labeled] = False
    # rows whose originals were neither labeled nor unlabeled stay out
    absent = np.setdiff1d(np.arange(n),
                          np.concatenate([pool.labeled_idx, pool.unlabeled_idx]))
    for row in absent:
        mask[row * factor] = False
    unlabeled = all_rows[mask]
    return Pool(features, labels, labeled, unlabeled,
                pool.test_features, pool.test_labels, origin)


def split_initial(pool: Pool, n_initial: int, rng_seed: int) -> Pool:
    """Fresh uniform labeled/unlabeled partition over all pool rows."""
    if n_initial > pool.n:
        raise ValueError(f"n_initial {n_initial} exceeds pool size {pool.n}")
    if pool.labels is None and n_initial > 0:
        raise ValueError("cannot label samples in a pool without stored labels")
    rng = np.random.default_rng(rng_seed)
    labeled = np.sort(rng.choice(pool.n, size=n_initial, replace=False))
    mask = np.ones(pool.n, dtype=bool)
    mask[labeled] = False
    return replace(pool, labeled_idx=labeled, unlabeled_idx=np.flatnonzero(mask))


def move_to_labeled(pool: Pool, rows: np.ndarray) -> Pool:
    """Move the given pool rows from the unlabeled to the labeled set."""
    rows = np.asarray(rows, dtype=np.int64)
    if not np.isin(rows, pool.unlabeled_idx).all():
        raise ValueError("rows to label must currently be unlabeled")
    labeled = np.sort(np.concatenate([pool.labeled_idx, rows]))
    unlabeled = np.setdiff1d(pool.unlabeled_idx, rows)
    return replace(pool, labeled_idx=labeled, unlabeled_idx=unlabeled)


def apply_normalization(pool: Pool, kind: str) -> Pool:
    """Feature normalization fit on pool rows, applied to pool and test."""
    if kind == "none":
        return pool
    x = pool.features
    if kind == "zscore":
        mean, std = _zscore_fit(x)
        transform = lambda a: (a - mean) / std
    elif kind == "minmax":
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = np.maximum(hi - lo, np.sqrt(VARIANCE_FLOOR))
        transform = lambda a: (a - lo) / span
    else:
        raise ValueError(f"unknown normalization {kind!r}")
    test = None if pool.test_features is None else transform(pool.test_features)
    return replace(pool, features=transform(x), test_features=test)


def load_dataset(spec: DatasetSpec) -> Pool:
    """Build the pool a DatasetSpec describes (all samples unlabeled)."""
    if spec.source == "synth_blobs":
        return synth_blobs(spec.n_per_class, spec.n_classes, spec.dim,
                           spec.spread, spec.rng_seed, spec.n_test_per_class)
    if spec.source == "synth_regression":
        return synth_regression(spec.n_samples, spec.dim, spec.noise,
                                spec.rng_seed, spec.n_test)
    if spec.source == "csv":
        if spec.csv_path is None:
            raise ValueError("csv source requires csv_path")
        return load_csv(spec.csv_path, spec.target_columns, spec.feature_columns,
                        spec.test_fraction, spec.rng_seed)
    pool = load_idx(spec.images_path, spec.labels_path)
    if spec.test_images_path:
        test = load_idx(spec.test_images_path, spec.test_labels_path)
        pool = replace(pool, test_features=test.features, test_labels=test.labels)
    return apply_normalization(pool, spec.normalization)
