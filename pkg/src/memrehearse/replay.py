"""Rehearsal buffers, proxy-guided selectors and the memorization-aware replay training loop."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TaskStream, train_test_split
from .errors import ConfigurationError, InputError
from .memorization import INF, ProxyScoreTable, proxy_observe
from .metrics import AccuracyMatrix, MetricsReport, evaluate_accuracy
from .nn import (
    ModelParams,
    TrainConfig,
    _loss_and_backward,
    _sgd_update,
    init_network,
    lr_at,
)

BASELINE_POLICIES = ("reservoir", "balanced")
SELECTOR_POLICIES = ("bottom_k", "middle_k", "top_k", "mixed")
POLICIES = BASELINE_POLICIES + SELECTOR_POLICIES


@dataclass
class BufferEntry:
    sample_id: int
    features: np.ndarray
    label: int
    task_index: int
    provenance: str = "reservoir"


class MemoryBuffer:
    """Fixed-capacity rehearsal store; ``capacity=None`` keeps every distinct sample."""

    def __init__(self, capacity: int | None, balanced: bool = False, seed: int = 0):
        if capacity is not None and capacity < 0:
            raise ConfigurationError("buffer capacity must be nonnegative")
        self.capacity = capacity
        self.balanced = balanced
        self.entries: list[BufferEntry] = []
        self.seen_count = 0
        self.rng = np.random.default_rng(seed)
        self._class_counts: Counter = Counter()
        self._stored_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def infinite(self) -> bool:
        return self.capacity is None

    def class_counts(self) -> dict[int, int]:
        return {c: n for c, n in self._class_counts.items() if n > 0}

    def _put(self, slot: int | None, entry: BufferEntry) -> None:
        if slot is None:
            self.entries.append(entry)
        else:
            old = self.entries[slot]
            self._class_counts[old.label] -= 1
            self.entries[slot] = entry
        self._class_counts[entry.label] += 1

    def remove_where(self, predicate) -> int:
        kept = [e for e in self.entries if not predicate(e)]
        removed = len(self.entries) - len(kept)
        self.entries = kept
        self._class_counts = Counter(e.label for e in kept)
        return removed

    def evict_from_largest(self, exclude_tasks: frozenset = frozenset()) -> BufferEntry:
        """Remove a uniformly random entry of the largest class (ties broken uniformly)."""
        counts = Counter(e.label for e in self.entries if e.task_index not in exclude_tasks)
        top = max(counts.values())
        victim_class = sorted(c for c, n in counts.items() if n == top)
        victim_class = victim_class[int(self.rng.integers(len(victim_class)))]
        slots = [i for i, e in enumerate(self.entries)
                 if e.label == victim_class and e.task_index not in exclude_tasks]
        slot = slots[int(self.rng.integers(len(slots)))]
        entry = self.entries.pop(slot)
        self._class_counts[entry.label] -= 1
        return entry

    def snapshot(self) -> list[tuple[int, int, int, str]]:
        return [(e.sample_id, e.label, e.task_index, e.provenance) for e in self.entries]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "task_index", "provenance"])
            w.writerows(self.snapshot())


def reservoir_insert(buffer: MemoryBuffer, item: BufferEntry) -> MemoryBuffer:
    """Classic reservoir step; mutates and returns ``buffer``."""
    buffer.seen_count += 1
    if buffer.infinite:
        if item.sample_id not in buffer._stored_ids:
            buffer._stored_ids.add(item.sample_id)
            buffer._put(None, item)
        return buffer
    m = buffer.capacity
    if len(buffer.entries) < m:
        buffer._put(None, item)
    else:
        j = int(buffer.rng.integers(buffer.seen_count))
        if j < m:
            buffer._put(j, item)
    return buffer


def balanced_reservoir_insert(buffer: MemoryBuffer, item: BufferEntry) -> MemoryBuffer:
    """Reservoir acceptance; on a full buffer the victim comes from the largest class.

    If the incoming item's own class is among the largest, the victim is drawn
    from that class, so a full buffer's max-min class gap never grows.
    """
    if buffer.infinite:
        return reservoir_insert(buffer, item)
    buffer.seen_count += 1
    m = buffer.capacity
    if len(buffer.entries) < m:
        buffer._put(None, item)
        return buffer
    if m == 0 or int(buffer.rng.integers(buffer.seen_count)) >= m:
        return buffer
    counts = buffer._class_counts
    top = max(counts.values())
    if counts[item.label] == top:
        victim_class = item.label
    else:
        largest = sorted(c for c, n in counts.items() if n == top)
        victim_class = largest[int(buffer.rng.integers(len(largest)))]
    slots = [i for i, e in enumerate(buffer.entries) if e.label == victim_class]
    buffer._put(slots[int(buffer.rng.integers(len(slots)))], item)
    return buffer


@dataclass
class ReplayBatch:
    sample_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def sample_minibatch(buffer: MemoryBuffer, batch_size: int, rng: np.random.Generator) -> ReplayBatch:
    """Uniform draw without replacement; the whole buffer when it holds <= batch_size entries."""
    n = len(buffer.entries)
    if n == 0 or batch_size <= 0:
        return ReplayBatch(np.zeros(0, np.int64), np.zeros((0, 0)), np.zeros(0, np.int64))
    if batch_size >= n:
        picked = range(n)
    else:
        picked = rng.choice(n, size=batch_size, replace=False)
    entries = [buffer.entries[i] for i in picked]
    return ReplayBatch(
        np.array([e.sample_id for e in entries], dtype=np.int64),
        np.stack([e.features for e in entries]),
        np.array([e.label for e in entries], dtype=np.int64),
    )


# -- selectors -------------------------------------------------------------------


@dataclass(frozen=True)
class SelectorMode:
    kind: str
    top_fraction: float = 0.10
    base: str = "bottom_k"

    def __post_init__(self):
        if self.kind not in SELECTOR_POLICIES:
            raise ConfigurationError(f"unknown selector {self.kind!r}")
        if self.kind == "mixed":
            if self.base not in ("bottom_k", "middle_k"):
                raise ConfigurationError("mixed selector base must be bottom_k or middle_k")
            if not 0.0 <= self.top_fraction <= 1.0:
                raise ConfigurationError("top_fraction must lie in [0, 1]")


def _ranked(v_scores: dict) -> list[tuple[float, int]]:
    return sorted((float(v), int(s)) for s, v in v_scores.items() if not math.isinf(v))


def _select_base(ranked: list[tuple[float, int]], quota: int, kind: str) -> list[int]:
    if quota <= 0 or not ranked:
        return []
    if kind == "bottom_k":
        return [s for _, s in ranked[:quota]]
    if kind == "top_k":
        return [s for _, s in sorted(ranked, key=lambda t: (-t[0], t[1]))[:quota]]
    if kind == "middle_k":
        start = max(0, (len(ranked) - quota) // 2)
        return [s for _, s in ranked[start:start + quota]]
    raise ConfigurationError(f"unknown selector {kind!r}")


def select_quota(v_scores: dict, quota: int, mode: SelectorMode | str) -> list[int]:
    """Pick up to ``quota`` sample ids of one class by proxy value.

    Samples with an infinite proxy (never stably learned) are never picked;
    ties go to the smaller sample id.
    """
    if quota < 0:
        raise InputError("quota must be nonnegative")
    if isinstance(mode, str):
        mode = SelectorMode(mode)
    ranked = _ranked(v_scores)
    if mode.kind != "mixed":
        return _select_base(ranked, quota, mode.kind)
    n_top = min(quota, math.ceil(mode.top_fraction * quota))
    top = _select_base(ranked, n_top, "top_k")
    chosen = set(top)
    rest = [t for t in ranked if t[1] not in chosen]
    return top + _select_base(rest, quota - len(top), mode.base)


def class_quotas(capacity: int, tasks_seen: int, classes: list[int]) -> dict[int, int]:
    """floor(capacity / tasks_seen) slots for the current task, spread over its classes.

    The remainder goes one slot at a time to classes in ascending id order.
    """
    alloc = capacity // tasks_seen
    base, extra = divmod(alloc, len(classes))
    return {c: base + (1 if i < extra else 0) for i, c in enumerate(sorted(classes))}


def end_of_task_replace(
    buffer: MemoryBuffer,
    task_data: Dataset,
    proxy: ProxyScoreTable,
    mode: SelectorMode | str,
    task_index: int,
    tasks_seen: int,
) -> MemoryBuffer:
    """Swap the current task's reservoir entries for selector picks, per class quota.

    Old-task entries are evicted (largest class first) only when the picks
    would not otherwise fit.
    """
    if buffer.infinite:
        raise ConfigurationError("selector replacement needs a finite buffer")
    if tasks_seen < 1:
        raise InputError("tasks_seen must be at least 1")
    if isinstance(mode, str):
        mode = SelectorMode(mode)
    v = proxy.as_dict()
    quotas = class_quotas(buffer.capacity, tasks_seen, task_data.classes())
    picks: list[int] = []
    for c, q in quotas.items():
        ids = task_data.sample_ids[task_data.labels == c]
        picks.extend(select_quota({int(s): v.get(int(s), INF) for s in ids}, q, mode))
    rows = task_data.positions(picks)

    buffer.remove_where(lambda e: e.task_index == task_index)
    overflow = len(buffer.entries) + len(picks) - buffer.capacity
    for _ in range(max(0, overflow)):
        buffer.evict_from_largest()
    for sid, r in zip(picks, rows):
        buffer._put(None, BufferEntry(
            int(sid), task_data.features[r].copy(), int(task_data.labels[r]), task_index, "selector",
        ))
    return buffer


# -- incremental training ----------------------------------------------------------


@dataclass
class ReplayConfig:
    capacity: int | None = 500
    policy: str = "reservoir"
    top_fraction: float = 0.10
    mixed_base: str = "bottom_k"
    replay_batch_size: int | None = None
    replace_every_epoch: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.capacity is not None and self.capacity < 1:
            raise ConfigurationError("buffer capacity must be positive (or None for infinite)")
        if self.capacity is None and self.policy in SELECTOR_POLICIES:
            raise ConfigurationError(f"policy {self.policy!r} cannot be used with an infinite buffer")
        if self.policy in SELECTOR_POLICIES:
            self.selector()

    def selector(self) -> SelectorMode | None:
        if self.policy not in SELECTOR_POLICIES:
            return None
        return SelectorMode(self.policy, self.top_fraction, self.mixed_base)

    @property
    def balanced(self) -> bool:
        return self.policy != "reservoir"


@dataclass
class RunResult:
    params: ModelParams
    report: MetricsReport
    proxies: list[ProxyScoreTable]
    checkpoints: list[ModelParams]
    splits: list[tuple[Dataset, Dataset]]
    buffer: MemoryBuffer
    trace: list[tuple[int, int, np.ndarray, np.ndarray]] = field(default_factory=list)


def train_incremental(
    stream: TaskStream,
    config: TrainConfig,
    replay: ReplayConfig,
    hidden: tuple[int, ...] = (64, 64),
    test_fraction: float = 0.2,
    split_seed: int = 0,
    record_trace: bool = False,
) -> RunResult:
    """Memorization-aware experience replay over a class-incremental stream.

    Per minibatch: forward pass on the current batch, proxy update from its
    predictions, replay batch drawn from the buffer, SGD on the sum of both
    cross-entropies, then buffer insertion of the current batch. Selector
    policies rewrite the current task's share of the buffer when the task ends.
    Each task holds out ``test_fraction`` of every class as its test split,
    seeded by ``split_seed`` only (the same rows for every run seed).
    ``record_trace`` keeps (task, iteration, sample_ids, correct) per minibatch.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    order_rng = np.random.default_rng(seeds[1])
    replay_rng = np.random.default_rng(seeds[2])

    first = stream.tasks[0]
    params = init_network([first.feature_dim, *hidden, first.class_count], init_seed)
    state = (params.weights, params.biases, params.velocity_weights, params.velocity_biases)
    buffer = MemoryBuffer(replay.capacity, balanced=replay.balanced, seed=int(replay_rng.integers(2**63)))
    insert = balanced_reservoir_insert if replay.balanced else reservoir_insert
    selector = replay.selector()
    replay_bs = replay.replay_batch_size or config.batch_size

    splits = [train_test_split(task, test_fraction, split_seed) for task in stream.tasks]
    k = len(stream.tasks)
    matrix = AccuracyMatrix(k)
    proxies, checkpoints, trace = [], [], []

    for t, (train, _) in enumerate(splits):
        proxy = ProxyScoreTable.fresh(train.sample_ids)
        iteration = 0
        for epoch in range(config.epochs_per_task):
            lr = lr_at(config, epoch)
            order = order_rng.permutation(len(train))
            for start in range(0, len(train), config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y, ids = train.features[idx], train.labels[idx], train.sample_ids[idx]
                _, gw, gb, logits = _loss_and_backward(params.weights, params.biases, x, y)
                correct = logits.argmax(axis=1) == y
                proxy_observe(proxy, iteration, ids, correct)
                if record_trace:
                    trace.append((t, iteration, ids.copy(), correct.copy()))
                mem = sample_minibatch(buffer, replay_bs, replay_rng)
                if len(mem):
                    _, rw, rb, _ = _loss_and_backward(params.weights, params.biases, mem.features, mem.labels)
                    gw = [a + b for a, b in zip(gw, rw)]
                    gb = [a + b for a, b in zip(gb, rb)]
                _sgd_update(state, gw, gb, lr, config.momentum, config.weight_decay)
                for r in idx:
                    insert(buffer, BufferEntry(int(train.sample_ids[r]), train.features[r], int(train.labels[r]), t))
                iteration += 1
            if selector is not None and replay.replace_every_epoch:
                end_of_task_replace(buffer, train, proxy, selector, t, t + 1)
        if selector is not None and not replay.replace_every_epoch:
            end_of_task_replace(buffer, train, proxy, selector, t, t + 1)
        proxies.append(proxy)
        checkpoints.append(params.copy())
        for j in range(t + 1):
            matrix.set(t, j, evaluate_accuracy(params, splits[j][1]))

    report = MetricsReport.from_matrix(matrix)
    return RunResult(params, report, proxies, checkpoints, splits, buffer, trace)
