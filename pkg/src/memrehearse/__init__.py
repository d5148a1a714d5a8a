"""Memorization-aware experience replay for class-incremental learning, at desk scale."""

from .config import ExperimentConfig, parse_config
from .data import (
    Dataset,
    LongTailSpec,
    TaskStream,
    generate_longtail,
    load_dataset,
    save_dataset,
    split_tasks,
    subsample,
    subset_classes,
    train_test_split,
)
from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    MemRehearseError,
    NumericError,
    RunError,
    ShapeError,
    StateError,
)
from .experiments import compare_policies, run_experiment
from .memorization import (
    EstimatorConfig,
    MLPTrainer,
    MemScoreTable,
    ProxyScoreTable,
    feldman_estimate,
    mahalanobis_proxy,
    memscore_histogram,
    plan_subsets,
    proxy_observe,
    select_memorized,
    stationary_proxy,
    sweep_class_counts,
    sweep_fractions,
)
from .metrics import (
    AccuracyMatrix,
    MetricsReport,
    correlate,
    evaluate_accuracy,
    final_avg_accuracy,
    forgetting_measure,
    memorized_subset_curves,
    train_linear_probe,
)
from .nn import ModelParams, TrainConfig, forward, init_network, loss_and_grads, lr_at, sgd_step, train_epochs
from .replay import (
    BufferEntry,
    MemoryBuffer,
    ReplayConfig,
    SelectorMode,
    balanced_reservoir_insert,
    class_quotas,
    end_of_task_replace,
    reservoir_insert,
    sample_minibatch,
    select_quota,
    train_incremental,
)

__version__ = "0.1.0"
