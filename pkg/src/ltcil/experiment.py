"""Full task-stream runs and overhead measurement."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from .data import TaskStream
from .estimator import LongTailIncrementalClassifier
from .metrics import GroupThresholds, MetricsReport, evaluate, group_accuracy
from .trainer import TrainConfig, baseline_config


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON form of a config (dataclass or dict)."""
    d = config.to_dict() if hasattr(config, "to_dict") else config
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_experiment(stream: TaskStream, config: TrainConfig, thresholds=None,
                   metadata=None, return_estimator=False):
    """Learn every task of ``stream`` in order and evaluate on the balanced test set.

    After each task the seen-class test accuracy is appended to
    ``incremental_accuracy``; the headline ``overall_accuracy`` is the value
    after the final task.
    """
    thresholds = thresholds or GroupThresholds()
    est = LongTailIncrementalClassifier.from_config(config)
    incremental = []
    train_seconds = 0.0
    per_class = overall = None
    for task in stream.tasks:
        t0 = time.perf_counter()
        est.partial_fit(task.X, task.y)
        train_seconds += time.perf_counter() - t0
        X_test, y_test = stream.test_set(est.classes_)
        per_class, overall = evaluate(est.model_, X_test, y_test, est.classes_)
        incremental.append(overall)

    meta = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "protocol": stream.protocol,
        "scenario": stream.scenario,
        "num_tasks": stream.num_tasks,
        "class_order": [int(c) for c in est.classes_],
        "task_classes": [list(t.classes) for t in stream.tasks],
    }
    meta.update(metadata or {})
    report = MetricsReport(
        overall_accuracy=overall,
        per_class_accuracy=per_class,
        group_accuracy=group_accuracy(per_class, stream.dataset.class_counts, thresholds),
        grad_trace=list(est.grad_trace_),
        incremental_accuracy=incremental,
        metadata=meta,
        timing={"train_seconds": train_seconds},
    )
    if return_estimator:
        return report, est
    return report


def _fit_seconds(stream, config):
    est = LongTailIncrementalClassifier.from_config(config)
    t0 = time.perf_counter()
    for task in stream.tasks:
        est.partial_fit(task.X, task.y)
    return time.perf_counter() - t0, est


def time_inference(est, X, repeats=7, number=20) -> float:
    """Best-of-``repeats`` seconds for ``number`` predict calls."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            est.predict(X)
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class OverheadReport:
    train_seconds_method: float
    train_seconds_baseline: float
    inference_seconds_method: float
    inference_seconds_baseline: float

    @property
    def train_ratio(self) -> float:
        return self.train_seconds_method / self.train_seconds_baseline

    @property
    def inference_ratio(self) -> float:
        return self.inference_seconds_method / self.inference_seconds_baseline


def measure_overhead(stream: TaskStream, config: TrainConfig, repeats=3) -> OverheadReport:
    """Time ``config`` against the same run with GCR off and a fixed coefficient.

    Training times are the best of ``repeats`` full-stream runs, interleaved
    so drift in machine load hits both sides alike.
    """
    base = baseline_config(config)
    method_times, base_times = [], []
    for _ in range(repeats):
        t, est_method = _fit_seconds(stream, config)
        method_times.append(t)
        t, est_base = _fit_seconds(stream, base)
        base_times.append(t)
    X_test, _ = stream.test_set()
    inf_m, inf_b = [], []
    for _ in range(3):
        inf_m.append(time_inference(est_method, X_test))
        inf_b.append(time_inference(est_base, X_test))
    return OverheadReport(min(method_times), min(base_times), float(np.min(inf_m)), float(np.min(inf_b)))
