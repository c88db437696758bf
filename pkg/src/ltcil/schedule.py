"""Distillation-coefficient schedules.

All schedules are evaluated once per epoch at epoch start, with ``t`` the
0-based epoch index within the task and ``T`` the epochs per task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

FIXED = "fixed"
LINEAR = "linear"
SIGMOID = "sigmoid"
ENTROPY_LINEAR = "entropy_linear"
ENTROPY_SIGMOID = "entropy_sigmoid"
KINDS = (FIXED, LINEAR, SIGMOID, ENTROPY_LINEAR, ENTROPY_SIGMOID)


@dataclass(frozen=True)
class Schedule:
    kind: str = ENTROPY_SIGMOID
    lambda0: float = 1.0  # only used by ``fixed``

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.lambda0) and self.lambda0 >= 0):
            raise ValueError("fixed lambda must be finite and non-negative")


def _check_time(t, T):
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"need T >= 1 and 0 <= t <= T, got t={t}, T={T}")


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def lambda_time_sigmoid(t, T) -> float:
    _check_time(t, T)
    return sigmoid(t / T)


def lambda_time_linear(t, T) -> float:
    _check_time(t, T)
    return t / T


def distillation_lambda(schedule: Schedule, t, T, h_norm=1.0) -> float:
    if not 0.0 <= h_norm <= 1.0:
        raise ValueError(f"normalized entropy must lie in [0, 1], got {h_norm}")
    kind = schedule.kind
    if kind == FIXED:
        return schedule.lambda0
    if kind == LINEAR:
        return lambda_time_linear(t, T)
    if kind == SIGMOID:
        return lambda_time_sigmoid(t, T)
    if kind == ENTROPY_LINEAR:
        return h_norm * lambda_time_linear(t, T)
    return h_norm * lambda_time_sigmoid(t, T)
