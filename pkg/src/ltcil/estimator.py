"""scikit-learn compatible wrapper around the incremental trainer.

Each :meth:`LongTailIncrementalClassifier.partial_fit` call is one task of
new classes. Prediction only reads ``model_``; the schedule, EMA and ledgers
are training-time state.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .gcr import PER_BATCH, EmaState, GcrConfig
from .schedule import ENTROPY_SIGMOID, Schedule
from .stats import ClassDistAccumulator
from .trainer import TeacherSnapshot, TrainConfig, model_rng, train_task


class LongTailIncrementalClassifier(ClassifierMixin, BaseEstimator):
    """Rehearsal-free class-incremental MLP classifier.

    Parameters
    ----------
    hidden_sizes : tuple of int
        Widths of the ReLU hidden layers.
    epochs_per_task, batch_size, learning_rate : training loop settings.
    lr_milestones : tuple of int or None
        Epochs (within a task) at which the learning rate is multiplied by
        ``lr_decay``. ``None`` means 50% and 75% of ``epochs_per_task``.
    schedule : {"fixed", "linear", "sigmoid", "entropy_linear", "entropy_sigmoid"}
        Distillation-coefficient schedule; ``fixed_lambda`` is used by "fixed".
    gcr : bool
        Enable gradient consistency regularization with ``lambda_gcr`` and
        EMA decay ``gcr_beta``.
    reweighting : bool
        Per-class loss weights from cumulative gradient norms.
    random_state : int
        Seeds initialization, head growth and mini-batch order.

    Attributes
    ----------
    classes_ : ndarray
        Labels in the order they were learned; ``classes_[j]`` is logit column ``j``.
    model_ : MlpModel
    grad_trace_ : list of EpochGradStats
    """

    def __init__(self, hidden_sizes=(64, 64), epochs_per_task=30, batch_size=32,
                 learning_rate=0.1, lr_milestones=None, lr_decay=0.1,
                 schedule=ENTROPY_SIGMOID, fixed_lambda=1.0, kd_temperature=2.0,
                 gcr=True, lambda_gcr=0.1, gcr_beta=0.9, gcr_cadence=PER_BATCH,
                 gcr_reset_on_task=False, reweighting=True, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.epochs_per_task = epochs_per_task
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_milestones = lr_milestones
        self.lr_decay = lr_decay
        self.schedule = schedule
        self.fixed_lambda = fixed_lambda
        self.kd_temperature = kd_temperature
        self.gcr = gcr
        self.lambda_gcr = lambda_gcr
        self.gcr_beta = gcr_beta
        self.gcr_cadence = gcr_cadence
        self.gcr_reset_on_task = gcr_reset_on_task
        self.reweighting = reweighting
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: TrainConfig) -> "LongTailIncrementalClassifier":
        g = config.gcr
        return cls(
            hidden_sizes=tuple(config.hidden_sizes),
            epochs_per_task=config.epochs_per_task,
            batch_size=config.batch_size,
            learning_rate=config.base_lr,
            lr_milestones=config.lr_milestones,
            lr_decay=config.lr_decay,
            schedule=config.schedule.kind,
            fixed_lambda=config.schedule.lambda0,
            kd_temperature=config.kd_temperature,
            gcr=g is not None,
            lambda_gcr=0.1 if g is None else g.lambda_gcr,
            gcr_beta=0.9 if g is None else g.beta,
            gcr_cadence=PER_BATCH if g is None else g.cadence,
            gcr_reset_on_task=False if g is None else g.reset_on_task_boundary,
            reweighting=config.reweighting,
            random_state=config.seed,
        )

    def train_config(self) -> TrainConfig:
        gcr = None
        if self.gcr:
            gcr = GcrConfig(self.lambda_gcr, self.gcr_beta, self.gcr_reset_on_task, self.gcr_cadence)
        return TrainConfig(
            epochs_per_task=self.epochs_per_task,
            batch_size=self.batch_size,
            base_lr=self.learning_rate,
            lr_milestones=None if self.lr_milestones is None else tuple(self.lr_milestones),
            lr_decay=self.lr_decay,
            schedule=Schedule(self.schedule, self.fixed_lambda),
            gcr=gcr,
            kd_temperature=self.kd_temperature,
            seed=0 if self.random_state is None else int(self.random_state),
            reweighting=self.reweighting,
            hidden_sizes=tuple(self.hidden_sizes),
        )

    def _reset(self):
        for attr in ("model_", "classes_", "teacher_", "accumulator_", "ema_",
                     "grad_trace_", "n_tasks_", "task_classes_", "n_features_in_"):
            if hasattr(self, attr):
                delattr(self, attr)

    def partial_fit(self, X, y):
        """Learn one task whose classes must all be new."""
        X, y = check_X_y(X, y, dtype=np.float64)
        config = self.train_config()
        new = np.unique(y)
        first = not hasattr(self, "model_")
        if first:
            self.n_features_in_ = X.shape[1]
            self.n_tasks_ = 0
            self.classes_ = new[:0]
            self.accumulator_ = ClassDistAccumulator()
            self.ema_ = EmaState(config.gcr.beta if config.gcr else 0.9)
            self.grad_trace_ = []
            self.task_classes_ = []
            self.teacher_ = None
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        overlap = np.intersect1d(new, self.classes_)
        if overlap.size:
            raise ValueError(f"classes {overlap.tolist()} were already learned")

        rng = model_rng(config.seed, self.n_tasks_)
        n_old = len(self.classes_)
        if first:
            model = nn.init_mlp(X.shape[1], config.hidden_sizes, len(new), rng)
            teacher = None
        else:
            teacher = TeacherSnapshot.of(self.model_)
            model = nn.expand_head(self.model_, n_old + len(new), rng)
        self.classes_ = np.concatenate([self.classes_, new])
        cols = n_old + np.searchsorted(new, y)

        model, ema, records = train_task(
            model, teacher, X, cols, config, self.accumulator_, self.ema_,
            task_index=self.n_tasks_,
        )
        self.model_ = model
        self.ema_ = ema
        self.teacher_ = teacher
        self.grad_trace_.extend(records)
        self.task_classes_.append(new.tolist())
        self.n_tasks_ += 1
        return self

    def fit(self, X, y, tasks=None):
        """Train from scratch. ``tasks`` gives a task id per sample, learned in
        ascending id order; without it the data is a single task."""
        self._reset()
        if tasks is None:
            return self.partial_fit(X, y)
        X, y = check_X_y(X, y, dtype=np.float64)
        tasks = np.asarray(tasks)
        if tasks.shape != y.shape:
            raise ValueError("tasks must give one task id per sample")
        for t in np.unique(tasks):
            mask = tasks == t
            self.partial_fit(X[mask], y[mask])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return nn.forward(self.model_, X)

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
