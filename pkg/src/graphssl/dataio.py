"""Datasets: synthetic generation, label subsampling and on-disk formats.

Binary feature file (little endian)::

    "GSS1" | version u32 | n u64 | d u64 | n*d f32 row-major

Binary label file::

    "GSL1" | version u32 | n u64 | C u32 | n i32   (-1 = unlabeled)

CSV variants are accepted by extension (``.csv``). Feature CSVs have a
header ``f0,f1,...`` followed by one row per point; label CSVs have a single
``label`` column with ``-1`` for unlabeled points.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"GSS1"
LABEL_MAGIC = b"GSL1"
FORMAT_VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIQQ")
_LABEL_HEADER = struct.Struct("<4sIQI")

# Geometry of the synthetic generator. Each class owns a random subspace of
# this dimension; its clusters sit along that subspace. With CLASS_SPREAD = 0
# every subspace passes through the origin, so classes touch near the origin
# and are separable mainly by which subspace a point lies on -- easy for a
# kNN graph, harder for a classifier trained on a few labels.
SUBSPACE_DIM = 3
CLASS_SPREAD = 0.0
CENTER_SPREAD = 1.0
WITHIN_SPREAD = 1.0


@dataclass(frozen=True, eq=False)
class DataSet:
    """Feature matrix with optional labels.

    Attributes:
        features: ``(n, d)`` float32 matrix.
        labels: ``(n,)`` int32 class indices, ``-1`` where unlabeled.
        num_classes: Number of classes ``C``.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    label_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ConfigError(f"features must be a nonempty 2-D matrix, got shape {feats.shape}", "dataio")
        if labels.shape != (feats.shape[0],):
            raise ConfigError(f"labels shape {labels.shape} does not match n={feats.shape[0]}", "dataio")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}", "dataio")
        bad = np.flatnonzero((labels < -1) | (labels >= self.num_classes))
        if bad.size:
            raise ConfigError(
                f"label {labels[bad[0]]} at row {bad[0]} outside [0, {self.num_classes})", "dataio"
            )
        feats.flags.writeable = False
        labels.flags.writeable = False
        mask = labels >= 0
        mask.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_mask", mask)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_labeled(self) -> int:
        return int(self.label_mask.sum())

    def subset(self, idx) -> "DataSet":
        idx = np.asarray(idx)
        return DataSet(self.features[idx], self.labels[idx], self.num_classes)

    def one_hot(self, idx=None) -> np.ndarray:
        """One-hot targets for ``idx`` (all points by default); unlabeled rows are zero."""
        labels = self.labels if idx is None else self.labels[np.asarray(idx)]
        out = np.zeros((labels.shape[0], self.num_classes))
        rows = np.flatnonzero(labels >= 0)
        out[rows, labels[rows]] = 1.0
        return out

    def equals(self, other: "DataSet") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def __eq__(self, other):
        if not isinstance(other, DataSet):
            return NotImplemented
        return self.equals(other)

    __hash__ = None


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    d: int
    C: int
    clusters_per_class: int = 1
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.C < 2:
            raise ConfigError(f"C must be >= 2, got {self.C}", "dataio")
        if self.n < self.C:
            raise ConfigError(f"n={self.n} is smaller than C={self.C}", "dataio")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}", "dataio")
        if self.clusters_per_class < 1:
            raise ConfigError("clusters_per_class must be >= 1", "dataio")
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be positive, got {self.noise_sigma}", "dataio")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits", "dataio")


def _balanced_counts(total: int, parts: int) -> np.ndarray:
    counts = np.full(parts, total // parts, dtype=np.int64)
    counts[: total % parts] += 1
    return counts


def generate_synthetic(spec: SyntheticSpec) -> DataSet:
    """Draw a fully labeled dataset of class-specific clustered subspaces.

    Class ``c`` owns a random ``SUBSPACE_DIM``-dimensional subspace through a
    random anchor; its ``clusters_per_class`` cluster centers lie on that
    subspace, and points scatter around the centers along the subspace plus
    isotropic noise of scale ``noise_sigma``. Class counts are balanced
    within one, and the point order is shuffled.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = min(SUBSPACE_DIM, spec.d)
    class_counts = _balanced_counts(spec.n, spec.C)
    feats = np.empty((spec.n, spec.d))
    labels = np.empty(spec.n, dtype=np.int32)
    start = 0
    for c in range(spec.C):
        basis, _ = np.linalg.qr(rng.standard_normal((spec.d, s)))
        anchor = rng.standard_normal(spec.d) * CLASS_SPREAD
        centers = anchor + rng.standard_normal((spec.clusters_per_class, s)) * CENTER_SPREAD @ basis.T
        nc = int(class_counts[c])
        which = np.arange(nc) % spec.clusters_per_class
        along = rng.standard_normal((nc, s)) * WITHIN_SPREAD
        noise = rng.standard_normal((nc, spec.d)) * spec.noise_sigma
        feats[start : start + nc] = centers[which] + along @ basis.T + noise
        labels[start : start + nc] = c
        start += nc
    order = rng.permutation(spec.n)
    return DataSet(feats[order], labels[order], spec.C)


def split_dataset(ds: DataSet, n_holdout: int, seed: int) -> tuple[DataSet, DataSet]:
    """Stratified split into ``(train, holdout)`` with ``n_holdout`` held-out points."""
    if not 0 < n_holdout < ds.n:
        raise ConfigError(f"n_holdout must be in (0, {ds.n}), got {n_holdout}", "dataio")
    rng = np.random.default_rng(seed)
    frac = n_holdout / ds.n
    hold = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        take = int(math.floor(frac * members.size + 0.5))
        hold.append(rng.permutation(members)[:take])
    hold = np.concatenate(hold)
    # top up / trim so the holdout has exactly n_holdout points
    rest = np.setdiff1d(np.arange(ds.n), hold)
    if hold.size < n_holdout:
        hold = np.concatenate([hold, rng.permutation(rest)[: n_holdout - hold.size]])
    elif hold.size > n_holdout:
        hold = rng.permutation(hold)[:n_holdout]
    hold = np.sort(hold)
    train = np.setdiff1d(np.arange(ds.n), hold)
    return ds.subset(train), ds.subset(hold)


def drop_labels(ds: DataSet, ratio: float, seed: int) -> DataSet:
    """Keep ``round(ratio * n_c)`` labels per class ``c``, at least one each.

    Features and ``n`` are untouched; only the label mask changes.
    """
    if not 0 < ratio <= 1:
        raise ConfigError(f"label ratio must be in (0, 1], got {ratio}", "dataio")
    if not ds.label_mask.all():
        raise ConfigError("drop_labels expects a fully labeled dataset", "dataio")
    rng = np.random.default_rng(seed)
    labels = np.full(ds.n, -1, dtype=np.int32)
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        keep = int(math.floor(ratio * members.size + 0.5))
        if keep == 0:
            logger.warning("class %d: ratio %.4g keeps no labels out of %d; keeping 1", c, ratio, members.size)
            keep = 1
        chosen = rng.choice(members, size=keep, replace=False)
        labels[chosen] = c
    return DataSet(ds.features, labels, ds.num_classes)


# --------------------------------------------------------------------------- IO


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _check_magic(buf: bytes, expected: bytes, path):
    if len(buf) < 4 or buf[:4] != expected:
        raise FormatError(
            f"{path}: bad magic {buf[:4]!r} at byte 0, expected {expected.decode()!r}", "dataio"
        )


def _unpack_header(header: struct.Struct, buf: bytes, path):
    if len(buf) < header.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} < {header.size} bytes)", "dataio")
    fields = header.unpack_from(buf, 0)
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {fields[1]} at byte 4", "dataio")
    return fields


def save_features(features: np.ndarray, path):
    feats = np.ascontiguousarray(features, dtype="<f4")
    n, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, n, d))
        fh.write(feats.tobytes())


def load_features(path) -> np.ndarray:
    if str(path).endswith(".csv"):
        return _load_features_csv(path)
    buf = _read_bytes(path)
    _check_magic(buf, FEATURE_MAGIC, path)
    _, _, n, d = _unpack_header(_FEATURE_HEADER, buf, path)
    off = _FEATURE_HEADER.size
    need = off + 4 * n * d
    if len(buf) < need:
        raise FormatError(f"{path}: truncated at byte {len(buf)}, expected {need} bytes", "dataio")
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes after byte {need}", "dataio")
    return np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)


def save_labels(labels: np.ndarray, num_classes: int, path):
    labels = np.ascontiguousarray(labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, labels.size, num_classes))
        fh.write(labels.tobytes())


def load_labels(path, num_classes: int | None = None) -> tuple[np.ndarray, int]:
    if str(path).endswith(".csv"):
        return _load_labels_csv(path, num_classes)
    buf = _read_bytes(path)
    _check_magic(buf, LABEL_MAGIC, path)
    _, _, n, C = _unpack_header(_LABEL_HEADER, buf, path)
    off = _LABEL_HEADER.size
    need = off + 4 * n
    if len(buf) < need:
        raise FormatError(f"{path}: truncated at byte {len(buf)}, expected {need} bytes", "dataio")
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off).astype(np.int32)
    bad = np.flatnonzero((labels < -1) | (labels >= C))
    if bad.size:
        row = int(bad[0])
        raise FormatError(
            f"{path}: label {labels[row]} in row {row} (byte {off + 4 * row}) outside [0, {C})", "dataio"
        )
    return labels, int(C)


def _load_features_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise FormatError(f"{path}: empty CSV", "dataio")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno} has {len(row)} columns, expected {len(header)}", "dataio")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}", "dataio") from None
    if not rows:
        raise FormatError(f"{path}: no data rows", "dataio")
    return np.asarray(rows, dtype=np.float32)


def _load_labels_csv(path, num_classes):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["label"]:
            raise FormatError(f"{path}: expected header 'label', got {header}", "dataio")
        labels = []
        for lineno, row in enumerate(reader, start=2):
            try:
                (value,) = row
                labels.append(int(value))
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: bad label row {row}", "dataio") from None
    labels = np.asarray(labels, dtype=np.int32)
    C = int(num_classes) if num_classes is not None else max(2, int(labels.max(initial=-1)) + 1)
    bad = np.flatnonzero((labels < -1) | (labels >= C))
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} in row {bad[0]} outside [0, {C})", "dataio")
    return labels, C


def save_dataset(ds: DataSet, features_path, labels_path=None):
    if str(features_path).endswith(".csv"):
        with open(features_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(ds.d)])
            w.writerows(ds.features.tolist())
    else:
        save_features(ds.features, features_path)
    if labels_path is not None:
        if str(labels_path).endswith(".csv"):
            with open(labels_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["label"])
                w.writerows([[int(v)] for v in ds.labels])
        else:
            save_labels(ds.labels, ds.num_classes, labels_path)


def load_dataset(features_path, labels_path=None, num_classes: int | None = None) -> DataSet:
    """Load features (and labels if given). Without labels every point is unlabeled."""
    feats = load_features(features_path)
    if labels_path is None:
        return DataSet(feats, np.full(feats.shape[0], -1, dtype=np.int32), num_classes or 2)
    labels, C = load_labels(labels_path, num_classes)
    if labels.size != feats.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.size} labels for {feats.shape[0]} feature rows", "dataio"
        )
    return DataSet(feats, labels, C)
