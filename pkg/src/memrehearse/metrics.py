"""Accuracy matrix, Acc / FM, memorized-subset curves, linear probes and correlation statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import InputError, NumericError, StateError
from .nn import ModelParams, predict

MEMORIZATION_THRESHOLDS = (0.25, 0.5, 0.75, 0.9)


def evaluate_accuracy(params: ModelParams, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise InputError("cannot evaluate accuracy on an empty dataset")
    return float((predict(params, dataset.features) == dataset.labels).mean())


class AccuracyMatrix:
    """Lower-triangular a[i][j]: accuracy on task j after training task i (j <= i)."""

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self._cells: dict[tuple[int, int], float] = {}

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                m.set(i, j, v)
        return m

    def set(self, checkpoint: int, task: int, value: float) -> None:
        if not 0 <= task <= checkpoint < self.num_tasks:
            raise InputError(f"cell ({checkpoint}, {task}) outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise InputError(f"accuracy {value} outside [0, 1]")
        self._cells[checkpoint, task] = float(value)

    def get(self, checkpoint: int, task: int) -> float | None:
        return self._cells.get((checkpoint, task))

    def row(self, checkpoint: int) -> list[float | None]:
        return [self.get(checkpoint, j) for j in range(checkpoint + 1)]

    def column(self, task: int) -> list[float]:
        return [self._cells[i, task] for i in range(task, self.num_tasks) if (i, task) in self._cells]

    def rows(self) -> list[list[float | None]]:
        return [self.row(i) for i in range(self.num_tasks)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", *(f"task_{j}" for j in range(self.num_tasks))])
            for i in range(self.num_tasks):
                cells = [self.get(i, j) for j in range(self.num_tasks)]
                w.writerow([i, *("" if c is None else repr(c) for c in cells)])


def final_avg_accuracy(matrix: AccuracyMatrix) -> float:
    last = matrix.row(matrix.num_tasks - 1)
    if any(v is None for v in last):
        raise StateError("last row of the accuracy matrix is incomplete")
    return float(sum(last) / len(last))


def forgetting_measure(matrix: AccuracyMatrix) -> float:
    """Mean over tasks 0..K-2 of (best accuracy ever reached) - (final accuracy)."""
    k = matrix.num_tasks
    if k < 2:
        raise StateError("forgetting needs at least two tasks")
    drops = []
    for j in range(k - 1):
        final = matrix.get(k - 1, j)
        col = matrix.column(j)
        if final is None or len(col) != k - j:
            raise StateError(f"column {j} is incomplete")
        drops.append(max(col) - final)
    return float(sum(drops) / len(drops))


@dataclass
class MetricsReport:
    acc: float
    fm: float | None
    matrix: AccuracyMatrix
    memorized_accuracy_curves: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, matrix: AccuracyMatrix) -> "MetricsReport":
        fm = forgetting_measure(matrix) if matrix.num_tasks >= 2 else None
        return cls(final_avg_accuracy(matrix), fm, matrix)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "fm": self.fm,
            "matrix": self.matrix.rows(),
            "memorized_accuracy_curves": self.memorized_accuracy_curves,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def memorized_subset_curves(run, scores, threshold: float = 0.25) -> dict:
    """Per task j and checkpoint i >= j: accuracy on task j's memorized train samples and test split.

    ``run`` provides ``checkpoints`` (params after each task) and ``splits``
    (per-task (train, test) datasets). ``scores`` is an offline
    :class:`MemScoreTable` covering the stream's training samples. A task
    whose memorized subset is empty gets ``memorized = None``.
    """
    lookup = scores.as_dict()
    curves = {}
    for j, (train, test) in enumerate(run.splits):
        mask = np.array([lookup.get(int(s), -math.inf) > threshold for s in train.sample_ids], dtype=bool)
        memorized = train.take(np.flatnonzero(mask))
        ckpts = run.checkpoints[j:]
        curves[j] = {
            "threshold": threshold,
            "memorized_n": len(memorized),
            "memorized": [evaluate_accuracy(p, memorized) for p in ckpts] if len(memorized) else None,
            "test": [evaluate_accuracy(p, test) for p in ckpts],
        }
    return curves


def curves_to_csv(curves: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "checkpoint", "threshold", "memorized_n", "memorized_acc", "test_acc"])
        for j, c in sorted(curves.items()):
            for off, test_acc in enumerate(c["test"]):
                mem = "" if c["memorized"] is None else repr(c["memorized"][off])
                w.writerow([j, j + off, c["threshold"], c["memorized_n"], mem, repr(test_acc)])


# -- linear probe ----------------------------------------------------------------


@dataclass
class ProbeParams:
    weights: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return self.classes[(z @ self.weights.T + self.bias).argmax(axis=1)]


def _stratified_holdout(labels: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    test = []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        test.append(rng.choice(rows, size=int(round(fraction * len(rows))), replace=False))
    test = np.sort(np.concatenate(test))
    return np.setdiff1d(np.arange(len(labels)), test), test


def train_linear_probe(
    features,
    labels,
    learning_rate: float = 0.5,
    max_epochs: int = 500,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[ProbeParams, float]:
    """Multinomial logistic regression by full-batch gradient descent.

    Trained on a stratified 80% split of standardized features; returns the
    probe and its accuracy on the held-out 20%.
    """
    x = np.asarray(features, dtype=np.float64)
    y_raw = np.asarray(labels)
    classes, y = np.unique(y_raw, return_inverse=True)
    if len(classes) < 2:
        raise InputError("linear probe needs at least two classes")
    train, test = _stratified_holdout(y, 0.2, np.random.default_rng(seed))
    mean = x[train].mean(axis=0)
    scale = x[train].std(axis=0)
    scale[scale == 0] = 1.0
    xt = (x[train] - mean) / scale
    yt = y[train]
    n, c = len(train), len(classes)
    w = np.zeros((c, x.shape[1]))
    b = np.zeros(c)
    onehot = np.eye(c)[yt]
    prev = math.inf
    for _ in range(max_epochs):
        logits = xt @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.log(p[np.arange(n), yt] + 1e-300).mean()
        if abs(prev - loss) < tol:
            break
        prev = loss
        g = (p - onehot) / n
        w -= learning_rate * g.T @ xt
        b -= learning_rate * g.sum(axis=0)
    probe = ProbeParams(w, b, classes, mean, scale)
    acc = float((probe.predict(x[test]) == y_raw[test]).mean()) if len(test) else float("nan")
    return probe, acc


# -- correlation -------------------------------------------------------------------


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise NumericError("correlation undefined for constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _kendall_tau_b(x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    n = len(x)
    s = n_tx = n_ty = 0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sx = np.sign(x[start:stop, None] - x[None, :])
        sy = np.sign(y[start:stop, None] - y[None, :])
        upper = np.arange(start, stop)[:, None] < np.arange(n)[None, :]
        s += int((sx * sy)[upper].sum())
        n_tx += int(((sx == 0) & upper).sum())
        n_ty += int(((sy == 0) & upper).sum())
    n0 = n * (n - 1) // 2
    denom = (n0 - n_tx) * (n0 - n_ty)
    if denom == 0:
        raise NumericError("kendall tau-b undefined for constant input")
    return max(-1.0, min(1.0, s / math.sqrt(denom)))


def correlate(x, y, method: str = "pearson") -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise InputError("correlate needs two equal-length vectors of length >= 2")
    if method == "pearson":
        return _pearson(x, y)
    if method == "spearman":
        return _pearson(average_ranks(x), average_ranks(y))
    if method == "kendall":
        return _kendall_tau_b(x, y)
    raise InputError(f"unknown correlation method {method!r}")


def mean_std(values) -> dict:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single value)."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if not len(v):
        return {"mean": None, "std": None, "n": 0}
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "n": int(len(v))}
