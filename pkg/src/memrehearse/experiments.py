"""Run orchestration: one experiment per seed, per-seed artifact directories, aggregate statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, TaskStream, concat, generate_longtail, load_dataset, split_tasks, train_test_split
from .errors import ConfigurationError, MemRehearseError
from .memorization import (
    MLPTrainer,
    MemScoreTable,
    feldman_estimate,
    memscore_histogram,
    select_memorized,
    stationary_proxy,
    sweep_class_counts,
    sweep_fractions,
)
from .metrics import (
    correlate,
    curves_to_csv,
    mean_std,
    memorized_subset_curves,
    train_linear_probe,
)
from .nn import forward
from .replay import RunResult, train_incremental

log = logging.getLogger(__name__)

THREADS_ENV = "MEMREHEARSE_THREADS"
STD_LABEL = "sample (ddof=1)"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


# -- building blocks -----------------------------------------------------------


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset.path:
        return load_dataset(cfg.dataset.path)
    return generate_longtail(cfg.dataset.spec())


def build_stream(cfg: ExperimentConfig, dataset: Dataset | None = None) -> TaskStream:
    dataset = dataset if dataset is not None else build_dataset(cfg)
    return split_tasks(dataset, cfg.stream.tasks, cfg.stream.split_seed)


def stream_training_data(cfg: ExperimentConfig, stream: TaskStream) -> Dataset:
    """Union of every task's training split, the data the offline scores are computed on."""
    return concat([train_test_split(t, cfg.stream.test_fraction, cfg.stream.split_seed)[0] for t in stream.tasks])


def stationary_trainer(cfg: ExperimentConfig, seed: int = 0) -> MLPTrainer:
    return MLPTrainer(cfg.trainer.hidden, cfg.stationary_trainer.train_config(seed))


def offline_scores(cfg: ExperimentConfig, stream: TaskStream) -> MemScoreTable:
    data = stream_training_data(cfg, stream)
    est = cfg.estimator.estimator()
    return feldman_estimate(data, stationary_trainer(cfg), est.plan_for(len(data)), est.mode, worker_count())


def incremental_run(cfg: ExperimentConfig, seed: int, stream: TaskStream | None = None, record_trace: bool = False) -> RunResult:
    stream = stream if stream is not None else build_stream(cfg)
    return train_incremental(
        stream,
        cfg.trainer.train_config(seed),
        cfg.buffer.replay_config(),
        hidden=tuple(cfg.trainer.hidden),
        test_fraction=cfg.stream.test_fraction,
        split_seed=cfg.stream.split_seed,
        record_trace=record_trace,
    )


def _thresholds(values) -> list[float]:
    return sorted({float(t) for t in values})


# -- per-kind runners ----------------------------------------------------------
# Each returns (metrics dict, scalar summary dict) and writes extra artifacts into ``out``.


def _run_incremental(cfg: ExperimentConfig, seed: int, out: Path, shared: dict):
    run = incremental_run(cfg, seed, shared["stream"])
    run.report.matrix.to_csv(out / "accuracy_matrix.csv")
    for t, proxy in enumerate(run.proxies):
        proxy.to_csv(out / f"proxy_task_{t}.csv")
    run.buffer.to_csv(out / "buffer.csv")
    metrics = run.report.to_dict()
    if cfg.curves.enabled:
        curves = {}
        for thr in _thresholds(cfg.curves.thresholds):
            c = memorized_subset_curves(run, shared["scores"], thr)
            curves_to_csv(c, out / f"curves_{thr:g}.csv")
            curves[f"{thr:g}"] = c
        metrics["memorized_accuracy_curves"] = curves
    summary = {"acc": run.report.acc, "fm": run.report.fm}
    return metrics, summary


def _run_memscore(cfg: ExperimentConfig, seed: int, out: Path, shared: dict):
    data = shared["dataset"]
    est = cfg.estimator.estimator(seed)
    table = feldman_estimate(data, stationary_trainer(cfg), est.plan_for(len(data)), est.mode, worker_count())
    table.to_csv(out / "memscores.csv")
    edges, counts = memscore_histogram(table.scores, est.bins)
    valid = table.scores[~np.isnan(table.scores)]
    tail = data.provenance == 1
    metrics = {
        "n": len(data), "k": int(round(est.k_fraction * len(data))), "u": est.u, "mode": est.mode,
        "threshold": cfg.estimator.threshold,
        "memorized_count": len(select_memorized(table, cfg.estimator.threshold)),
        "mean_score": float(valid.mean()) if len(valid) else None,
        "mean_score_head": float(np.nanmean(table.scores[~tail])) if (~tail).any() else None,
        "mean_score_tail": float(np.nanmean(table.scores[tail])) if tail.any() else None,
        "histogram": {"edges": edges, "counts": counts},
    }
    summary = {k: metrics[k] for k in ("memorized_count", "mean_score", "mean_score_head", "mean_score_tail")}
    return metrics, summary


def _run_sweep(cfg: ExperimentConfig, seed: int, out: Path, shared: dict):
    est = cfg.estimator.estimator(seed)
    trainer = stationary_trainer(cfg)
    if cfg.kind == "sweep_classes":
        report = sweep_class_counts(shared["dataset"], cfg.sweep.class_counts, est, trainer, worker_count())
        key = "class_count"
    else:
        report = sweep_fractions(shared["dataset"], cfg.sweep.fractions, est, trainer, worker_count())
        key = "fraction"
    for entry, table in zip(report.entries, report.tables):
        table.to_csv(out / f"memscores_{key}_{entry[key]:g}.csv")
    summary = {}
    for entry in report.entries:
        tag = f"{key}_{entry[key]:g}"
        summary[f"{tag}.mean"] = entry["mean"]
        summary[f"{tag}.frac_above_0.25"] = entry["frac_above_0.25"]
    return {"kind": report.kind, "entries": report.entries}, summary


def _run_proxy_correlate(cfg: ExperimentConfig, seed: int, out: Path, shared: dict):
    data = shared["dataset"]
    est = cfg.estimator.estimator(seed)
    table = feldman_estimate(data, stationary_trainer(cfg), est.plan_for(len(data)), est.mode, worker_count())
    proxy = stationary_proxy(data, cfg.trainer.hidden, cfg.stationary_trainer.train_config(seed), seed)
    table.to_csv(out / "memscores.csv")
    proxy.to_csv(out / "proxy.csv")
    scores = table.take_ids(proxy.sample_ids)
    v = proxy.finite_values()
    keep = ~np.isnan(scores)
    metrics = {"n": int(keep.sum()), "u": est.u, "k_fraction": est.k_fraction}
    for method in ("pearson", "spearman", "kendall"):
        metrics[method] = correlate(v[keep], scores[keep], method)
    summary = {m: metrics[m] for m in ("pearson", "spearman", "kendall")}
    return metrics, summary


def _run_probe(cfg: ExperimentConfig, seed: int, out: Path, shared: dict):
    """Linear probes on the probe task's data, fitted on frozen features after every checkpoint.

    The probe trains on the task's training samples whose offline score does
    not exceed the lowest threshold; it is evaluated on the task's test split
    and on each memorized subset (score > threshold), none of which it saw.
    """
    run = incremental_run(cfg, seed, shared["stream"])
    k = len(run.splits)
    task = cfg.probe.task % k
    train, test = run.splits[task]
    lookup = shared["scores"].as_dict()
    train_scores = np.array([lookup.get(int(s), -math.inf) for s in train.sample_ids])
    thresholds = _thresholds(cfg.probe.thresholds)
    fit_rows = np.flatnonzero(~(train_scores > thresholds[0]))
    series = {"holdout": [], "test": [], **{f"memorized_{t:g}": [] for t in thresholds}}
    sizes = {f"memorized_{t:g}": int((train_scores > t).sum()) for t in thresholds}
    for ckpt in run.checkpoints:
        _, feats = forward(ckpt, train.features)
        probe, holdout = train_linear_probe(
            feats[fit_rows], train.labels[fit_rows], cfg.probe.learning_rate, cfg.probe.max_epochs, seed=seed
        )
        _, test_feats = forward(ckpt, test.features)
        series["holdout"].append(holdout)
        series["test"].append(float((probe.predict(test_feats) == test.labels).mean()))
        for t in thresholds:
            rows = train_scores > t
            acc = float((probe.predict(feats[rows]) == train.labels[rows]).mean()) if rows.any() else None
            series[f"memorized_{t:g}"].append(acc)
    metrics = {"probe_task": task, "classifier_acc": run.report.acc, "subset_sizes": sizes, "probe_accuracy": series}
    summary = {"probe_test_final": series["test"][-1], "probe_test_own": series["test"][task]}
    return metrics, summary


_RUNNERS = {
    "incremental": _run_incremental,
    "memscore": _run_memscore,
    "sweep_classes": _run_sweep,
    "sweep_fractions": _run_sweep,
    "proxy_correlate": _run_proxy_correlate,
    "probe": _run_probe,
}


def _shared_inputs(cfg: ExperimentConfig) -> dict:
    """Seed-independent inputs computed once per experiment."""
    dataset = build_dataset(cfg)
    shared = {"dataset": dataset}
    if cfg.kind in ("incremental", "probe"):
        shared["stream"] = build_stream(cfg, dataset)
        if cfg.kind == "probe" or cfg.curves.enabled:
            shared["scores"] = offline_scores(cfg, shared["stream"])
    return shared


def aggregate(summaries: list[dict]) -> dict:
    keys = sorted({k for s in summaries for k in s})
    return {k: mean_std([s.get(k) for s in summaries]) for k in keys}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> int:
    """Run ``cfg`` once per seed; returns a process exit status (0 on success).

    Layout: ``manifest.json``, ``seed_<n>/{metrics.json, manifest.json, ...}``
    and ``aggregate.json`` (written last).
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.effective(), "seeds": list(cfg.seeds), "status": "running", "error": None}
    write_json(out / "manifest.json", manifest)
    started = time.perf_counter()
    runner = _RUNNERS[cfg.kind]

    def one(seed: int) -> dict:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        metrics, summary = runner(cfg, seed, seed_dir, shared)
        write_json(seed_dir / "metrics.json", metrics)
        write_json(seed_dir / "manifest.json", {
            "config": cfg.effective(), "seed": seed, "summary": summary, "wall_time_s": time.perf_counter() - t0,
        })
        log.info("seed %d done: %s", seed, summary)
        return summary

    try:
        shared = _shared_inputs(cfg)
        with ThreadPoolExecutor(min(worker_count(), len(cfg.seeds))) as pool:
            summaries = list(pool.map(one, cfg.seeds))
        write_json(out / "aggregate.json", {
            "kind": cfg.kind, "seeds": list(cfg.seeds), "std": STD_LABEL, "metrics": aggregate(summaries),
        })
        manifest["status"] = "ok"
        code = 0
    except (MemRehearseError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        manifest["status"] = "failed"
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        log.error("experiment failed: %s", exc)
        code = 1
    manifest["wall_time_s"] = time.perf_counter() - started
    write_json(out / "manifest.json", manifest)
    return code


# -- policy comparison ----------------------------------------------------------

_VARYING = ("buffer", "output_dir", "compare")


def _fixed_part(cfg: ExperimentConfig) -> dict:
    d = cfg.effective()
    for key in _VARYING:
        d.pop(key)
    d["buffer_rest"] = {k: v for k, v in cfg.buffer.model_dump().items() if k not in ("capacity", "policy")}
    return d


def compare_policies(configs: list[ExperimentConfig], out_dir: str | Path | None = None) -> list[dict]:
    """Acc / FM (mean and sample std over seeds) for configs differing only in buffer policy or size.

    Rows with an infinite buffer are flagged as the full-access upper bound.
    Writes ``comparison.csv`` and ``comparison.json`` when ``out_dir`` is given.
    """
    if not configs:
        raise ConfigurationError("compare_policies needs at least one config")
    base = _fixed_part(configs[0])
    for i, cfg in enumerate(configs):
        if cfg.kind != "incremental":
            raise ConfigurationError(f"config {i}: compare needs the incremental kind, got {cfg.kind!r}")
        other = _fixed_part(cfg)
        diff = sorted(k for k in set(base) | set(other) if base.get(k) != other.get(k))
        if diff:
            raise ConfigurationError(f"config {i} differs from config 0 outside the buffer section: {diff}")
    stream = build_stream(configs[0])
    rows = []
    for cfg in configs:
        def one(seed, cfg=cfg):
            return incremental_run(cfg, seed, stream).report

        with ThreadPoolExecutor(min(worker_count(), len(cfg.seeds))) as pool:
            reports = list(pool.map(one, cfg.seeds))
        acc = mean_std([r.acc for r in reports])
        fm = mean_std([r.fm for r in reports])
        rows.append({
            "policy": cfg.buffer.policy,
            "buffer": str(cfg.buffer.capacity),
            "upper_bound": cfg.buffer.capacity == "inf",
            "seeds": len(cfg.seeds),
            "acc_mean": acc["mean"], "acc_std": acc["std"],
            "fm_mean": fm["mean"], "fm_std": fm["std"],
        })
    if out_dir is not None:
        write_comparison(rows, out_dir)
    return rows


def write_comparison(rows: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["policy", "buffer", "upper_bound", "seeds", "acc_mean", "acc_std", "fm_mean", "fm_std"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    write_json(out / "comparison.json", {"std": STD_LABEL, "rows": rows})


def comparison_configs(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """Expand the ``compare`` section into one config per (policy, buffer size), plus the infinite row."""
    configs = []
    for size in cfg.compare.buffer_sizes:
        for policy in cfg.compare.policies:
            configs.append(cfg.model_copy(update={
                "kind": "incremental",
                "buffer": cfg.buffer.model_copy(update={"capacity": size, "policy": policy}),
            }))
    if cfg.compare.include_infinite:
        configs.append(cfg.model_copy(update={
            "kind": "incremental",
            "buffer": cfg.buffer.model_copy(update={"capacity": "inf", "policy": "reservoir"}),
        }))
    return configs


__all__ = [
    "aggregate", "build_dataset", "build_stream", "compare_policies",
    "comparison_configs", "incremental_run", "offline_scores", "run_experiment",
    "stream_training_data", "worker_count", "write_comparison",
]
