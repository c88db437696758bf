"""One class-incremental task of training: reweighted CE, scheduled KD, GCR, SGD."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import nn
from .gcr import PER_BATCH, EmaState, GcrConfig, ema_update, gcr_apply, gcr_step, grow_state
from .schedule import FIXED, Schedule, distillation_lambda
from .stats import ClassDistAccumulator, GradNormLedger

logger = logging.getLogger(__name__)

# Sub-stream tags mixed into the run seed.
_INIT_STREAM = 0
_BATCH_STREAM = 1


class TrainingConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """A non-finite gradient was produced. ``state`` holds a diagnostic dump."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


def default_milestones(epochs: int) -> tuple[int, ...]:
    """Step-decay epochs at 50% and 75% of the task, e.g. (15, 23) for 30 epochs."""
    cand = sorted({math.ceil(0.5 * epochs), math.ceil(0.75 * epochs)})
    return tuple(m for m in cand if 0 < m < epochs)


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_task: int = 30
    batch_size: int = 32
    base_lr: float = 0.1
    lr_milestones: tuple[int, ...] | None = None
    lr_decay: float = 0.1
    schedule: Schedule = field(default_factory=Schedule)
    gcr: GcrConfig | None = field(default_factory=GcrConfig)
    kd_temperature: float = 2.0
    seed: int = 0
    reweighting: bool = True
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.epochs_per_task < 1 or self.batch_size < 1:
            raise TrainingConfigError("epochs_per_task and batch_size must be positive")
        if self.base_lr < 0 or not 0 < self.lr_decay <= 1:
            raise TrainingConfigError("need base_lr >= 0 and 0 < lr_decay <= 1")
        if self.kd_temperature <= 0:
            raise TrainingConfigError("kd_temperature must be positive")
        if self.seed < 0:
            raise TrainingConfigError("seed must be a non-negative integer")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 0 < m < self.epochs_per_task for m in ms):
            raise TrainingConfigError(
                f"lr milestones must be strictly increasing and inside (0, T), got {ms}"
            )

    @property
    def milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is None:
            return default_milestones(self.epochs_per_task)
        return tuple(self.lr_milestones)

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.lr_decay**passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.milestones)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass(frozen=True)
class TeacherSnapshot:
    model: nn.MlpModel
    old_class_count: int

    @classmethod
    def of(cls, model: nn.MlpModel) -> "TeacherSnapshot":
        frozen = model.copy()
        for layer in frozen.layers:
            layer.weight.setflags(write=False)
            layer.bias.setflags(write=False)
        return cls(frozen, frozen.output_dim)


@dataclass
class EpochGradStats:
    """Per-epoch training log row; gradient norms are per mini-batch."""

    task: int
    epoch: int
    lam: float
    h_norm: float
    lr: float
    ce_loss: float
    kd_loss: float
    grad_norm_mean_pre: float
    grad_norm_min_pre: float
    grad_norm_max_pre: float
    grad_norm_mean_post: float
    grad_norm_min_post: float
    grad_norm_max_post: float

    CSV_COLUMNS = (
        "task", "epoch", "lambda", "h_norm", "lr", "ce_loss", "kd_loss",
        "grad_norm_mean_pre", "grad_norm_min_pre", "grad_norm_max_pre",
        "grad_norm_mean_post", "grad_norm_min_post", "grad_norm_max_post",
    )

    def to_row(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in self.CSV_COLUMNS}

    @classmethod
    def from_row(cls, row) -> "EpochGradStats":
        kw = {}
        for f in fields(cls):
            key = "lambda" if f.name == "lam" else f.name
            kw[f.name] = int(row[key]) if f.name in ("task", "epoch") else float(row[key])
        return cls(**kw)


def model_rng(seed: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_index, _INIT_STREAM])


def _batch_rng(seed: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_index, _BATCH_STREAM])


def _norm(v: np.ndarray) -> float:
    return math.sqrt(v @ v)


def _stats(values):
    a = np.asarray(values)
    return float(a.mean()), float(a.min()), float(a.max())


def train_task(model, teacher, X, y, config: TrainConfig, acc: ClassDistAccumulator,
               ema: EmaState, *, task_index: int = 0):
    """Train ``model`` on one task and return ``(model, ema, epoch_stats)``.

    ``y`` holds logit-column indices and the model head must already cover
    them. ``acc`` is updated in place with this task's class counts before the
    first epoch, so the normalized entropy includes the current task.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise nn.ShapeError("task needs a non-empty, aligned sample set")
    if y.max() >= model.output_dim:
        raise nn.ShapeError(
            f"label {y.max()} is outside the {model.output_dim}-class head; expand it first"
        )
    labels, label_counts = np.unique(y, return_counts=True)
    seen = [int(c) for c in labels if acc.counts.get(int(c), 0) > 0]
    if seen:
        raise TrainingConfigError(f"classes {seen} were already learned in an earlier task")
    if teacher is not None and teacher.old_class_count == 0:
        raise TrainingConfigError("teacher snapshot has no old classes")

    acc.update(dict(zip(labels.tolist(), label_counts.tolist())))
    h_norm = acc.normalized_entropy()
    gcr_cfg = config.gcr
    if gcr_cfg is not None and gcr_cfg.reset_on_task_boundary:
        ema = EmaState(gcr_cfg.beta)
    ledger = GradNormLedger().reset(labels.tolist())
    rng = _batch_rng(config.seed, task_index)
    teacher_logits = None if teacher is None else nn.forward(teacher.model, X)
    T = config.epochs_per_task
    n = y.size
    onehot = np.eye(model.output_dim)[y] if config.reweighting else None
    records = []

    for epoch in range(T):
        lam = distillation_lambda(config.schedule, epoch, T, h_norm)
        lr = config.lr_at(epoch)
        if config.reweighting:
            class_w = np.ones(model.output_dim)
            for c, w in ledger.reweight().items():
                class_w[c] = w
        order = rng.permutation(n)
        pre, post = [], []
        ce_total = kd_total = 0.0
        grad_sum = None

        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], y[idx]
            acts = nn.forward_activations(model, xb)
            logits = acts[-1]
            weights = class_w[yb] if config.reweighting else None
            ce, dlogits = nn.ce_loss_and_grad(logits, yb, weights)
            ce_total += ce * idx.size
            if config.reweighting:
                sample_norms = np.linalg.norm(nn.softmax(logits) - onehot[idx], axis=1)
                ledger.accumulate(yb, sample_norms)
            if teacher is not None:
                kd, dkd = nn.kd_loss_and_grad(
                    logits, teacher_logits[idx], config.kd_temperature, teacher.old_class_count
                )
                kd_total += kd * idx.size
                dlogits = dlogits + lam * dkd
            g = nn.backward(model, xb, dlogits, acts)
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(
                    f"non-finite gradient in task {task_index}, epoch {epoch}",
                    {
                        "task": task_index, "epoch": epoch, "batch_start": start,
                        "lambda": lam, "lr": lr, "h_norm": h_norm, "ce_loss": ce,
                        "model": nn.dumps_model(model), "ema": ema.to_dict(),
                        "ledger": ledger.to_dict(), "accumulator": acc.to_dict(),
                    },
                )
            pre.append(_norm(g))
            if gcr_cfg is not None and ema.initialized and ema.g_bar.size != g.size:
                ema = grow_state(ema, nn.embed_index(teacher.model, model), g)
            if gcr_cfg is None:
                g_used = g
            elif gcr_cfg.cadence == PER_BATCH:
                g_used, ema = gcr_step(ema, g, gcr_cfg)
            else:
                g_used = gcr_apply(ema, g, gcr_cfg.lambda_gcr)
                grad_sum = g.copy() if grad_sum is None else grad_sum + g
            post.append(pre[-1] if g_used is g else _norm(g_used))
            model = nn.sgd_step(model, g_used, lr)

        if grad_sum is not None:
            ema = ema_update(ema, grad_sum / len(pre))
        records.append(
            EpochGradStats(
                task_index, epoch, lam, h_norm, lr, ce_total / n, kd_total / n,
                *_stats(pre), *_stats(post),
            )
        )
        logger.debug("task %d epoch %d: lambda=%.4f ce=%.4f", task_index, epoch, lam, ce_total / n)
    return model, ema, records


def baseline_config(config: TrainConfig, fixed_lambda: float = 1.0) -> TrainConfig:
    """Same run with GCR off and a fixed distillation coefficient."""
    return replace(config, gcr=None, schedule=Schedule(FIXED, fixed_lambda))
