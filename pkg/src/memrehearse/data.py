"""Synthetic long-tail datasets, class-incremental task splits and the MRDS file format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

MAGIC = b"MRDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQII")

HEAD, TAIL = 0, 1


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    class_count: int
    provenance: np.ndarray = None  # 0 = head, 1 = tail

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = self.features.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        n = len(self.labels)
        if self.provenance is None:
            self.provenance = np.zeros(n, dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        if not (self.features.shape[0] == n == len(self.sample_ids) == len(self.provenance)):
            raise InputError("features, labels, sample_ids and provenance must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        if len(np.unique(self.sample_ids)) != n:
            raise InputError("sample_ids must be unique")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def take(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.features[index].reshape(len(index), self.feature_dim),
            self.labels[index],
            self.sample_ids[index],
            self.class_count,
            self.provenance[index],
        )

    def positions(self, sample_ids: Iterable[int]) -> np.ndarray:
        """Row positions of the given sample ids."""
        lookup = {int(s): i for i, s in enumerate(self.sample_ids)}
        try:
            return np.array([lookup[int(s)] for s in sample_ids], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"unknown sample_id {exc.args[0]}") from None

    def equals(self, other: "Dataset") -> bool:
        return (
            self.class_count == other.class_count
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.provenance, other.provenance)
        )


@dataclass
class TaskStream:
    tasks: list[Dataset]
    class_order: list[int]
    classes_per_task: int

    def __len__(self) -> int:
        return len(self.tasks)

    def task_classes(self, t: int) -> list[int]:
        k = self.classes_per_task
        return sorted(self.class_order[t * k:(t + 1) * k])


@dataclass
class LongTailSpec:
    """Per class: one broad head cluster plus a few small displaced tail clusters.

    Spreads are RMS distances from the cluster centre (per-coordinate std is
    ``spread / sqrt(feature_dim)``), so ``tail_offset`` is directly comparable
    to ``head_spread``. Class centres are drawn with RMS norm ``center_scale``.
    """

    class_count: int = 10
    head_samples_per_class: int = 114
    tail_clusters_per_class: int = 6
    tail_samples_per_cluster: int = 1
    feature_dim: int = 16
    head_spread: float = 1.0
    tail_offset: float = 4.0
    noise: float = 0.5
    center_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 1 or self.feature_dim < 1:
            raise ConfigurationError("class_count and feature_dim must be positive")
        if self.head_samples_per_class < 1:
            raise ConfigurationError("head_samples_per_class must be positive")
        if self.tail_clusters_per_class < 0 or self.tail_samples_per_cluster < 0:
            raise ConfigurationError("tail counts must be nonnegative")
        if self.tail_samples_per_cluster > 0.2 * self.head_samples_per_class:
            raise ConfigurationError(
                "tail_samples_per_cluster must be at most 20% of head_samples_per_class"
            )
        if min(self.head_spread, self.noise) <= 0 or self.tail_offset < 0 or self.center_scale < 0:
            raise ConfigurationError("spreads must be positive and offsets nonnegative")

    @property
    def samples_per_class(self) -> int:
        return self.head_samples_per_class + self.tail_clusters_per_class * self.tail_samples_per_cluster


def generate_longtail(spec: LongTailSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    scale = 1.0 / np.sqrt(d)
    centers = rng.normal(0.0, spec.center_scale * scale, size=(spec.class_count, d))
    feats, labels, prov = [], [], []
    for c in range(spec.class_count):
        head = centers[c] + rng.normal(0.0, spec.head_spread * scale, size=(spec.head_samples_per_class, d))
        feats.append(head)
        labels.append(np.full(spec.head_samples_per_class, c))
        prov.append(np.full(spec.head_samples_per_class, HEAD))
        for _ in range(spec.tail_clusters_per_class):
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            mean = centers[c] + spec.tail_offset * direction
            pts = mean + rng.normal(0.0, spec.noise * scale, size=(spec.tail_samples_per_cluster, d))
            feats.append(pts)
            labels.append(np.full(spec.tail_samples_per_cluster, c))
            prov.append(np.full(spec.tail_samples_per_cluster, TAIL))
    features = np.concatenate(feats)
    order = rng.permutation(len(features))
    return Dataset(
        features[order],
        np.concatenate(labels)[order],
        np.arange(len(features)),
        spec.class_count,
        np.concatenate(prov)[order],
    )


def split_tasks(dataset: Dataset, num_tasks: int, seed: int) -> TaskStream:
    c = dataset.class_count
    if num_tasks < 1 or c % num_tasks:
        raise ConfigurationError(f"class_count {c} is not divisible by num_tasks {num_tasks}")
    per_task = c // num_tasks
    class_order = [int(k) for k in np.random.default_rng(seed).permutation(c)]
    tasks = []
    for t in range(num_tasks):
        group = class_order[t * per_task:(t + 1) * per_task]
        tasks.append(dataset.take(np.flatnonzero(np.isin(dataset.labels, group))))
    return TaskStream(tasks, class_order, per_task)


def subset_classes(dataset: Dataset, class_ids: Iterable[int]) -> Dataset:
    ids = sorted({int(k) for k in class_ids})
    bad = [k for k in ids if not 0 <= k < dataset.class_count]
    if bad:
        raise InputError(f"unknown class ids {bad}")
    return dataset.take(np.flatnonzero(np.isin(dataset.labels, ids)))


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Per-class stratified sample of floor(fraction * class size) rows, original order kept."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction {fraction} outside (0, 1]")
    rng = np.random.default_rng(seed)
    keep = []
    for c in dataset.classes():
        rows = np.flatnonzero(dataset.labels == c)
        n_keep = int(np.floor(fraction * len(rows) + 1e-9))
        keep.append(rng.choice(rows, size=n_keep, replace=False))
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    return dataset.take(keep)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes round(test_fraction * size) test rows.

    Every class is split with its own generator derived from (seed, class id),
    so a class lands on the same side regardless of which task it belongs to.
    """
    test = []
    for c in dataset.classes():
        rows = np.flatnonzero(dataset.labels == c)
        rng = np.random.default_rng([seed, c])
        n_test = int(round(test_fraction * len(rows)))
        test.append(rng.choice(rows, size=n_test, replace=False))
    test = np.sort(np.concatenate(test)) if test else np.zeros(0, dtype=np.int64)
    train = np.setdiff1d(np.arange(len(dataset)), test)
    return dataset.take(train), dataset.take(test)


def concat(datasets: list[Dataset]) -> Dataset:
    first = datasets[0]
    return Dataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.sample_ids for d in datasets]),
        first.class_count,
        np.concatenate([d.provenance for d in datasets]),
    )


# -- on-disk format ----------------------------------------------------------


def dataset_to_bytes(dataset: Dataset) -> bytes:
    n = len(dataset)
    d = dataset.features.shape[1] if dataset.features.ndim == 2 else 0
    return b"".join([
        _HEADER.pack(MAGIC, FORMAT_VERSION, n, d, dataset.class_count),
        dataset.features.astype("<f8").tobytes(order="C"),
        dataset.labels.astype("<u4").tobytes(),
        dataset.sample_ids.astype("<u8").tobytes(),
        dataset.provenance.astype("u1").tobytes(),
    ])


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, n, d, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _HEADER.size + n * d * 8 + n * 4 + n * 8 + n
    if len(blob) != expected:
        raise FormatError(f"payload is {len(blob)} bytes, expected {expected}")
    off = _HEADER.size
    feats = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d)
    off += n * d * 8
    labels = np.frombuffer(blob, "<u4", n, off)
    off += n * 4
    ids = np.frombuffer(blob, "<u8", n, off)
    off += n * 8
    prov = np.frombuffer(blob, "u1", n, off)
    try:
        return Dataset(feats.copy(), labels.astype(np.int64), ids.astype(np.int64), c, prov.copy())
    except InputError as exc:
        raise FormatError(str(exc)) from None


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def export_csv(dataset: Dataset, path) -> None:
    d = dataset.features.shape[1] if dataset.features.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "provenance", *(f"x{j}" for j in range(d))])
        for i in range(len(dataset)):
            w.writerow([
                int(dataset.sample_ids[i]), int(dataset.labels[i]), int(dataset.provenance[i]),
                *(repr(float(v)) for v in dataset.features[i]),
            ])
