"""Long-tailed class-incremental learning with entropy-scheduled distillation
and gradient consistency regularization."""
from .data import (
    LongTailProfile, SyntheticSpec, TaskStream, build_profile, generate_dataset, split_tasks,
)
from .estimator import LongTailIncrementalClassifier
from .experiment import measure_overhead, run_experiment
from .gcr import EmaState, GcrConfig, ema_update, gcr_apply, gcr_step
from .metrics import GroupThresholds, MetricsReport, boundary_stability, evaluate, group_accuracy
from .schedule import Schedule, distillation_lambda, lambda_time_linear, lambda_time_sigmoid
from .stats import ClassDistAccumulator, GradNormLedger
from .trainer import TrainConfig, train_task

__version__ = "0.1.0"
