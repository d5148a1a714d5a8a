"""Memorization scores: leave-k-out estimator, training-iteration proxy, Mahalanobis proxy, sweeps."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import Dataset, subsample, subset_classes
from .errors import ConfigurationError, InputError, NumericError, RunError
from .nn import TrainConfig, init_network, train_epochs, train_many

DEFAULT_THRESHOLD = 0.25
INF = math.inf


class Trainer(Protocol):
    """Maps (dataset, training row indices, seed) to class probabilities on every row.

    Implementations may also provide ``fit_many(dataset, subsets, seeds)``
    returning an array of shape (u, n, classes); the estimator prefers it.
    """

    def __call__(self, dataset: Dataset, train_indices: np.ndarray, seed: int) -> np.ndarray: ...


class MLPTrainer:
    """Stationary SGD training of the default ReLU MLP."""

    def __init__(self, hidden: Sequence[int] = (64, 64), config: TrainConfig | None = None, chunk: int = 64):
        self.hidden = tuple(hidden)
        self.config = config or TrainConfig.stationary()
        self.chunk = chunk

    def _dims(self, dataset: Dataset) -> list[int]:
        return [dataset.feature_dim, *self.hidden, dataset.class_count]

    def __call__(self, dataset, train_indices, seed):
        idx = np.asarray(train_indices, dtype=np.int64)[None, :]
        return train_many(self._dims(dataset), dataset.features, dataset.labels, idx, [seed], self.config)[0]

    def fit_many(self, dataset, subsets, seeds):
        subsets = np.asarray(subsets)
        out = []
        for start in range(0, len(subsets), self.chunk):
            out.append(train_many(
                self._dims(dataset), dataset.features, dataset.labels,
                subsets[start:start + self.chunk], seeds[start:start + self.chunk], self.config,
            ))
        return np.concatenate(out)


# -- subset planning -----------------------------------------------------------


@dataclass(eq=False)
class SubsetPlan:
    n: int
    k: int
    u: int
    membership: np.ndarray  # (u, n) bool
    seed: int

    def include_counts(self) -> np.ndarray:
        return self.membership.sum(axis=0)

    def indices(self) -> np.ndarray:
        """Row indices of each subset, shape (u, k), ascending within a row."""
        return np.stack([np.flatnonzero(row) for row in self.membership])


def plan_subsets(n: int, k: int, u: int, seed: int) -> SubsetPlan:
    """Draw ``u`` uniform size-``k`` subsets of range(n).

    When ``u >= 20`` any sample that ends up always or never included forces a
    redraw of a randomly chosen row, conditioned on flipping that sample.
    """
    if not 0 < k < n:
        raise ConfigurationError(f"subset size k={k} must lie strictly between 0 and n={n}")
    if u < 1:
        raise ConfigurationError("u must be at least 1")
    if u >= 20 and (u * k < n or u * (n - k) < n):
        raise ConfigurationError(f"u={u} subsets of size k={k} cannot include and exclude each of n={n} samples")
    rng = np.random.default_rng(seed)
    membership = np.zeros((u, n), dtype=bool)
    for r in range(u):
        membership[r, rng.choice(n, size=k, replace=False)] = True
    if u >= 20:
        for _ in range(100 * n + 1000):
            counts = membership.sum(axis=0)
            bad = np.flatnonzero((counts == 0) | (counts == u))
            if not len(bad):
                break
            i = int(bad[0])
            r = int(rng.integers(u))
            others = np.delete(np.arange(n), i)
            row = np.zeros(n, dtype=bool)
            if counts[i] == 0:
                row[i] = True
                row[rng.choice(others, size=k - 1, replace=False)] = True
            else:
                row[rng.choice(others, size=k, replace=False)] = True
            membership[r] = row
        else:
            raise ConfigurationError("could not plan subsets with non-empty include/exclude groups")
    return SubsetPlan(n, k, u, membership, seed)


def subset_seed(plan_seed: int, index: int) -> int:
    """Independent per-subset trainer seed derived from (plan seed, subset index)."""
    ss = np.random.SeedSequence(entropy=plan_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


# -- leave-k-out estimator -----------------------------------------------------


@dataclass(eq=False)
class MemScoreTable:
    sample_ids: np.ndarray
    scores: np.ndarray
    include_count: np.ndarray
    exclude_count: np.ndarray
    k_fraction: float
    u: int

    def __len__(self) -> int:
        return len(self.sample_ids)

    def as_dict(self) -> dict[int, float]:
        return {int(s): float(v) for s, v in zip(self.sample_ids, self.scores)}

    def take_ids(self, ids: Iterable[int]) -> np.ndarray:
        lookup = self.as_dict()
        return np.array([lookup[int(i)] for i in ids])

    def equals(self, other: "MemScoreTable") -> bool:
        return (
            np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.scores, other.scores, equal_nan=True)
            and np.array_equal(self.include_count, other.include_count)
            and np.array_equal(self.exclude_count, other.exclude_count)
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "score", "include_count", "exclude_count"])
            for row in zip(self.sample_ids, self.scores, self.include_count, self.exclude_count):
                w.writerow([int(row[0]), repr(float(row[1])), int(row[2]), int(row[3])])

    @classmethod
    def from_csv(cls, path, k_fraction: float = float("nan")) -> "MemScoreTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        inc = np.array([int(r["include_count"]) for r in rows], dtype=np.int64)
        exc = np.array([int(r["exclude_count"]) for r in rows], dtype=np.int64)
        return cls(
            np.array([int(r["sample_id"]) for r in rows], dtype=np.int64),
            np.array([float(r["score"]) for r in rows]),
            inc, exc, k_fraction, int(inc[0] + exc[0]) if rows else 0,
        )


def _correctness(probs: np.ndarray, labels: np.ndarray, mode: str) -> np.ndarray:
    if mode == "argmax":
        return (probs.argmax(axis=-1) == labels).astype(np.float64)
    if mode == "softmax":
        return np.take_along_axis(probs, labels[:, None], axis=-1)[:, 0]
    raise ConfigurationError(f"unknown correctness mode {mode!r}")


def feldman_estimate(
    dataset: Dataset,
    trainer,
    plan: SubsetPlan,
    mode: str = "argmax",
    workers: int = 1,
) -> MemScoreTable:
    """Leave-k-out memorization estimate for every sample of ``dataset``.

    One predictor is trained per planned subset. Per sample, the score is the
    mean correctness over predictors whose subset contained it minus the mean
    over predictors whose subset did not. ``mode="argmax"`` uses the 0/1
    correctness of the top prediction, ``"softmax"`` the probability of the
    true label. Aggregation runs in subset-index order, so the result does not
    depend on the order in which trainings complete.
    """
    if plan.n != len(dataset):
        raise InputError(f"plan covers {plan.n} samples, dataset has {len(dataset)}")
    labels = dataset.labels
    subsets = plan.indices()
    seeds = [subset_seed(plan.seed, j) for j in range(plan.u)]
    correct = np.empty((plan.u, plan.n))

    if hasattr(trainer, "fit_many"):
        try:
            probs = trainer.fit_many(dataset, subsets, seeds)
        except Exception as exc:
            raise RunError(f"batched subset training failed: {exc}") from exc
        for j in range(plan.u):
            correct[j] = _correctness(probs[j], labels, mode)
    else:
        def run(j):
            try:
                return j, _correctness(np.asarray(trainer(dataset, subsets[j], seeds[j])), labels, mode)
            except Exception as exc:
                raise RunError(f"training on subset {j} failed: {exc}", index=j) from exc

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, range(plan.u)))
        else:
            results = [run(j) for j in range(plan.u)]
        for j, c in results:
            correct[j] = c

    member = plan.membership
    inc_count = member.sum(axis=0)
    exc_count = plan.u - inc_count
    inc_sum = np.zeros(plan.n)
    exc_sum = np.zeros(plan.n)
    for j in range(plan.u):
        inc_sum += np.where(member[j], correct[j], 0.0)
        exc_sum += np.where(member[j], 0.0, correct[j])
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = inc_sum / inc_count - exc_sum / exc_count
    return MemScoreTable(
        dataset.sample_ids.copy(), scores, inc_count.astype(np.int64), exc_count.astype(np.int64),
        plan.k / plan.n, plan.u,
    )


def select_memorized(table: MemScoreTable, threshold: float = DEFAULT_THRESHOLD) -> set[int]:
    return {int(s) for s, v in zip(table.sample_ids, table.scores) if v > threshold}


def memscore_histogram(scores, bin_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform bins over [-1, 1]; the last bin is closed on the right."""
    if bin_count < 1:
        raise ConfigurationError("bin_count must be at least 1")
    scores = np.asarray(scores, dtype=np.float64)
    counts, edges = np.histogram(scores[~np.isnan(scores)], bins=bin_count, range=(-1.0, 1.0))
    return edges, counts


# -- training-iteration proxy --------------------------------------------------


@dataclass(eq=False)
class ProxyScoreTable:
    """First iteration after which a sample stayed correctly classified (inf if it ends wrong).

    Updated in place by :func:`proxy_observe`.
    """

    sample_ids: np.ndarray
    v: np.ndarray
    total_iterations: int = 0
    _last_iteration: int = field(default=-1, repr=False)
    _pos: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self._pos = {int(s): i for i, s in enumerate(self.sample_ids)}

    @classmethod
    def fresh(cls, sample_ids) -> "ProxyScoreTable":
        ids = np.asarray(sample_ids, dtype=np.int64)
        return cls(ids, np.full(len(ids), INF))

    def as_dict(self) -> dict[int, float]:
        return {int(s): float(v) for s, v in zip(self.sample_ids, self.v)}

    def equals(self, other: "ProxyScoreTable") -> bool:
        return (
            np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.v, other.v)
            and self.total_iterations == other.total_iterations
        )

    def finite_values(self) -> np.ndarray:
        """v with the infinite sentinel replaced by ``total_iterations``."""
        return np.where(np.isinf(self.v), float(self.total_iterations), self.v)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "v", "is_infinite"])
            for s, v in zip(self.sample_ids, self.v):
                inf = bool(np.isinf(v))
                w.writerow([int(s), self.total_iterations if inf else int(v), int(inf)])

    @classmethod
    def from_csv(cls, path) -> "ProxyScoreTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = [int(r["sample_id"]) for r in rows]
        v = [INF if r["is_infinite"] == "1" else float(r["v"]) for r in rows]
        total = max((int(r["v"]) for r in rows if r["is_infinite"] == "1"), default=None)
        table = cls(ids, v)
        if total is not None:
            table.total_iterations = total
        else:
            table.total_iterations = int(max(v, default=-1)) + 1
        return table


def proxy_observe(table: ProxyScoreTable, iteration: int, sample_ids, correct) -> ProxyScoreTable:
    sample_ids = list(sample_ids)
    correct = list(correct)
    if len(sample_ids) != len(correct):
        raise InputError("sample_ids and correct must have equal length")
    if iteration < table._last_iteration:
        raise InputError(f"iteration {iteration} precedes {table._last_iteration}")
    try:
        rows = [table._pos[int(s)] for s in sample_ids]
    except KeyError as exc:
        raise InputError(f"unknown sample_id {exc.args[0]}") from None
    v = table.v
    for r, ok in zip(rows, correct):
        if ok and v[r] == INF:
            v[r] = iteration
        elif not ok and v[r] != INF:
            v[r] = INF
    table._last_iteration = iteration
    table.total_iterations = max(table.total_iterations, iteration + 1)
    return table


def stationary_proxy(
    dataset: Dataset,
    hidden: Sequence[int] = (64, 64),
    config: TrainConfig | None = None,
    seed: int = 0,
) -> ProxyScoreTable:
    """Proxy scores from one ordinary (non-incremental) training run on ``dataset``."""
    config = config or TrainConfig.stationary()
    ss = np.random.SeedSequence(seed).spawn(2)
    params = init_network([dataset.feature_dim, *hidden, dataset.class_count], int(ss[0].generate_state(1)[0]))
    table = ProxyScoreTable.fresh(dataset.sample_ids)

    def observe(iteration, idx, logits):
        proxy_observe(table, iteration, dataset.sample_ids[idx], logits.argmax(axis=1) == dataset.labels[idx])

    train_epochs(params, dataset.features, dataset.labels, config, np.random.default_rng(ss[1]), observer=observe)
    return table


# -- Mahalanobis proxy -----------------------------------------------------------


def mahalanobis_distance(x, mean, cov) -> np.ndarray:
    """Distances of rows of ``x`` to ``mean`` under ``cov`` (no regularization)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    try:
        chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    except np.linalg.LinAlgError:
        raise NumericError("covariance matrix is singular or not positive definite") from None
    z = np.linalg.solve(chol, (x - mean).T)
    return np.sqrt((z * z).sum(axis=0))


def mahalanobis_proxy(features, labels, regularize: bool = True) -> np.ndarray:
    """Per-sample distance to its own class mean under the class covariance.

    With ``regularize`` the covariance gets ``1e-6 * trace / d`` added on the
    diagonal, which keeps classes smaller than the feature dimension usable.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.zeros(len(labels))
    d = feats.shape[1]
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        x = feats[rows]
        mean = x.mean(axis=0)
        cov = np.cov(x, rowvar=False).reshape(d, d) if len(rows) > 1 else np.zeros((d, d))
        trace = float(np.trace(cov))
        if regularize:
            if trace == 0.0:
                out[rows] = 0.0  # every sample sits at the class mean
                continue
            cov = cov + (1e-6 * trace / d) * np.eye(d)
        out[rows] = mahalanobis_distance(x, mean, cov)
    return out


# -- sweeps ----------------------------------------------------------------------


@dataclass
class EstimatorConfig:
    k_fraction: float = 0.5
    u: int = 250
    mode: str = "argmax"
    seed: int = 0
    bins: int = 20

    def plan_for(self, n: int) -> SubsetPlan:
        k = int(round(self.k_fraction * n))
        return plan_subsets(n, k, self.u, self.seed)


def _summary(scores: np.ndarray, bins: int) -> dict:
    edges, counts = memscore_histogram(scores, bins)
    valid = scores[~np.isnan(scores)]
    return {
        "mean": float(valid.mean()) if len(valid) else float("nan"),
        "frac_above_0.25": float((valid > 0.25).mean()) if len(valid) else float("nan"),
        "frac_above_0.1": float((valid > 0.1).mean()) if len(valid) else float("nan"),
        "histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
    }


@dataclass
class SweepReport:
    kind: str
    entries: list[dict]
    tables: list[MemScoreTable] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "entries": self.entries}, indent=2, sort_keys=True)


def sweep_class_counts(
    dataset: Dataset,
    class_counts: Sequence[int],
    estimator: EstimatorConfig,
    trainer,
    workers: int = 1,
) -> SweepReport:
    """Estimate scores on the first ``count`` classes for each count.

    Summaries are restricted to the probe classes, the first ``min(class_counts)``
    classes, so every entry describes the same samples.
    """
    classes = dataset.classes()
    if not class_counts or max(class_counts) > len(classes) or min(class_counts) < 1:
        raise ConfigurationError(f"class counts {list(class_counts)} not achievable with {len(classes)} classes")
    probe = classes[:min(class_counts)]
    entries, tables = [], []
    for count in class_counts:
        sub = subset_classes(dataset, classes[:count])
        plan = estimator.plan_for(len(sub))
        table = feldman_estimate(sub, trainer, plan, estimator.mode, workers)
        probe_scores = table.scores[np.isin(sub.labels, probe)]
        entries.append({
            "class_count": int(count), "n": len(sub), "k": plan.k, "u": plan.u,
            "probe_classes": probe, "probe_n": int(len(probe_scores)),
            **_summary(probe_scores, estimator.bins),
        })
        tables.append(table)
    return SweepReport("sweep_classes", entries, tables)


def sweep_fractions(
    dataset: Dataset,
    fractions: Sequence[float],
    estimator: EstimatorConfig,
    trainer,
    workers: int = 1,
) -> SweepReport:
    entries, tables = [], []
    for f in fractions:
        sub = subsample(dataset, f, estimator.seed)
        plan = estimator.plan_for(len(sub))
        table = feldman_estimate(sub, trainer, plan, estimator.mode, workers)
        entries.append({
            "fraction": float(f), "n": len(sub), "k": plan.k, "u": plan.u,
            **_summary(table.scores, estimator.bins),
        })
        tables.append(table)
    return SweepReport("sweep_fractions", entries, tables)
