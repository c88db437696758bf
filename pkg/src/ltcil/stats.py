"""Accumulated class distribution and per-class gradient-norm ledger."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class EmptyDistributionError(ValueError):
    """Entropy requested before any samples were registered."""


@dataclass
class ClassDistAccumulator:
    """Running per-class sample counts over every observed task. Never reset."""

    counts: dict[int, int] = field(default_factory=dict)

    @property
    def k_total(self) -> int:
        return sum(1 for n in self.counts.values() if n > 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def update(self, task_class_counts) -> "ClassDistAccumulator":
        task_class_counts = dict(task_class_counts)
        if any(n < 0 for n in task_class_counts.values()):
            raise ValueError("class counts must be non-negative")
        for c, n in task_class_counts.items():
            self.counts[int(c)] = self.counts.get(int(c), 0) + int(n)
        return self

    def proportions(self) -> dict[int, float]:
        total = self.total
        if total <= 0:
            raise EmptyDistributionError("no samples registered")
        return {c: n / total for c, n in self.counts.items()}

    def normalized_entropy(self) -> float:
        """Shannon entropy of the accumulated distribution, normalized by the
        log of the number of registered classes.

        Classes registered with a zero count take part with ``0 ln 0 = 0``, so
        all mass on one of two registered classes gives 0.0. A single
        registered class is treated as uniform and returns 1.0.
        """
        props = self.proportions()
        k = len(props)
        if k == 1:
            return 1.0
        p = np.array([v for v in props.values() if v > 0])
        return float(-(p * np.log(p)).sum() / math.log(k))

    def to_dict(self) -> dict:
        return {"counts": {str(c): n for c, n in sorted(self.counts.items())}}

    @classmethod
    def from_dict(cls, d) -> "ClassDistAccumulator":
        return cls({int(c): int(n) for c, n in d["counts"].items()})


@dataclass
class GradNormLedger:
    """Cumulative per-class logit-gradient norms within the current task.

    ``G_c`` for sample ``i`` of class ``c`` is the Euclidean norm of that
    sample's (unweighted) cross-entropy gradient w.r.t. its logits.
    """

    norms: dict[int, float] = field(default_factory=dict)
    task_classes: tuple[int, ...] = ()

    def reset(self, task_classes) -> "GradNormLedger":
        self.task_classes = tuple(int(c) for c in task_classes)
        self.norms = {c: 0.0 for c in self.task_classes}
        return self

    def accumulate(self, labels, sample_norms) -> "GradNormLedger":
        labels = np.asarray(labels, dtype=np.int64)
        sample_norms = np.asarray(sample_norms, dtype=np.float64)
        if labels.shape != sample_norms.shape:
            raise ValueError("labels and norms must be aligned")
        if np.any(sample_norms < 0):
            raise ValueError("gradient norms must be non-negative")
        if labels.size == 0:
            return self
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        sums = np.bincount(labels, weights=sample_norms)
        for c in np.flatnonzero(np.bincount(labels)):
            self.norms[int(c)] = self.norms.get(int(c), 0.0) + float(sums[c])
        return self

    def reweight(self) -> dict[int, float]:
        """``w_c = min_c' G_c' / G_c`` over the current task's classes.

        Falls back to unit weights while any class has no accumulated norm.
        """
        classes = self.task_classes or tuple(self.norms)
        g = np.array([self.norms.get(c, 0.0) for c in classes])
        if g.size == 0 or np.any(g <= 0):
            logger.debug("gradient ledger incomplete, using unit class weights")
            return {c: 1.0 for c in classes}
        w = g.min() / g
        return {c: float(v) for c, v in zip(classes, w)}

    def to_dict(self) -> dict:
        return {
            "norms": {str(c): v for c, v in sorted(self.norms.items())},
            "task_classes": list(self.task_classes),
        }

    @classmethod
    def from_dict(cls, d) -> "GradNormLedger":
        return cls(
            {int(c): float(v) for c, v in d["norms"].items()},
            tuple(int(c) for c in d["task_classes"]),
        )
