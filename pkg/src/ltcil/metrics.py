"""Evaluation, class-group breakdowns, gradient-stability summaries and report I/O."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .trainer import EpochGradStats

MAJOR, MEDIUM, MINOR = "major", "medium", "minor"


@dataclass(frozen=True)
class GroupThresholds:
    major_min: int = 100  # strictly more training samples -> major
    minor_max: int = 20  # at most this many -> minor

    def __post_init__(self):
        if self.minor_max >= self.major_min:
            raise ValueError("minor_max must be below major_min")

    def group_of(self, count: int) -> str:
        if count > self.major_min:
            return MAJOR
        if count <= self.minor_max:
            return MINOR
        return MEDIUM


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_class_accuracy: dict[int, float]
    group_accuracy: dict[str, float]
    grad_trace: list[EpochGradStats]
    incremental_accuracy: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def average_incremental_accuracy(self) -> float:
        return float(np.mean(self.incremental_accuracy)) if self.incremental_accuracy else float("nan")

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": {str(c): v for c, v in sorted(self.per_class_accuracy.items())},
            "group_accuracy": dict(self.group_accuracy),
            "incremental_accuracy": list(self.incremental_accuracy),
            "average_incremental_accuracy": self.average_incremental_accuracy,
            "grad_trace": [asdict(r) for r in self.grad_trace],
            "metadata": self.metadata,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        return cls(
            overall_accuracy=d["overall_accuracy"],
            per_class_accuracy={int(c): v for c, v in d["per_class_accuracy"].items()},
            group_accuracy=dict(d["group_accuracy"]),
            grad_trace=[EpochGradStats(**r) for r in d["grad_trace"]],
            incremental_accuracy=list(d.get("incremental_accuracy", [])),
            metadata=d.get("metadata", {}),
            timing=d.get("timing", {}),
        )

    def to_json(self, include_timing=True) -> str:
        d = self.to_dict()
        if not include_timing:
            d.pop("timing")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def evaluate(model: nn.MlpModel, X, y, classes):
    """Per-class and overall accuracy with argmax over the seen-class logits.

    ``classes[j]`` is the label of logit column ``j``; columns beyond
    ``len(classes)`` are ignored. Overall accuracy is the unweighted mean of
    the per-class values.
    """
    classes = np.asarray(classes)
    y = np.asarray(y)
    present = set(np.unique(y).tolist())
    missing = [c for c in classes.tolist() if c not in present]
    if missing:
        raise ValueError(f"test set has no samples for classes {missing}")
    extra = present - set(classes.tolist())
    if extra:
        raise ValueError(f"test set contains unseen classes {sorted(extra)}")
    logits = nn.forward(model, X)[:, : len(classes)]
    pred = classes[np.argmax(logits, axis=1)]
    per_class = {}
    for c in classes.tolist():
        mask = y == c
        per_class[c] = float(np.mean(pred[mask] == c))
    overall = float(np.mean(list(per_class.values())))
    return per_class, overall


def group_accuracy(per_class_accuracy, class_counts, thresholds=GroupThresholds()):
    """Mean per-class accuracy within major/medium/minor; empty groups omitted."""
    buckets: dict[str, list[float]] = {}
    for c, acc in per_class_accuracy.items():
        buckets.setdefault(thresholds.group_of(class_counts[c]), []).append(acc)
    return {g: float(np.mean(buckets[g])) for g in (MAJOR, MEDIUM, MINOR) if g in buckets}


def task_boundaries(grad_trace) -> list[int]:
    """Trace indices of the first epoch of every task after the first."""
    return [i for i in range(1, len(grad_trace)) if grad_trace[i].task != grad_trace[i - 1].task]


@dataclass
class BoundaryStability:
    index: int
    task: int
    range_pre: float
    range_post: float
    jump_pre: float
    jump_post: float


def boundary_stability(grad_trace, boundaries=None) -> list[BoundaryStability]:
    """Min-max spread of the first epoch after each boundary, and the jump in
    mean norm from the last epoch before it."""
    if boundaries is None:
        boundaries = task_boundaries(grad_trace)
    out = []
    for b in boundaries:
        if not 0 < b < len(grad_trace):
            raise ValueError(f"boundary {b} is outside the trace")
        cur, prev = grad_trace[b], grad_trace[b - 1]
        out.append(BoundaryStability(
            b, cur.task,
            cur.grad_norm_max_pre - cur.grad_norm_min_pre,
            cur.grad_norm_max_post - cur.grad_norm_min_post,
            cur.grad_norm_mean_pre - prev.grad_norm_mean_pre,
            cur.grad_norm_mean_post - prev.grad_norm_mean_post,
        ))
    return out


def atomic_write(path, text, mode="w"):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_report_json(report: MetricsReport, path) -> None:
    atomic_write(path, report.to_json())


def read_report_json(path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))


def _trace_csv_text(grad_trace) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=EpochGradStats.CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in grad_trace:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.to_row().items()})
    return buf.getvalue()


def write_trace_csv(grad_trace, path) -> None:
    atomic_write(path, _trace_csv_text(grad_trace))


def read_trace_csv(path) -> list[EpochGradStats]:
    with open(path, newline="") as fh:
        return [EpochGradStats.from_row(row) for row in csv.DictReader(fh)]


def emit_figure_data(traces, path, fmt=None) -> None:
    """Write gradient-norm traces as an SVG figure or a columnar CSV.

    ``traces`` is a single trace, a ``{label: trace}`` mapping, a
    :class:`MetricsReport` or a list of reports (labelled by their
    ``metadata["label"]`` when present). The format defaults to the file
    extension. The figure draws the mean pre-step norm per epoch, a min-max
    band and vertical rules at task boundaries.
    """
    series = _normalize_traces(traces)
    if not series or any(len(t) == 0 for t in series.values()):
        raise ValueError("nothing to plot: empty gradient trace")
    fmt = fmt or os.path.splitext(os.fspath(path))[1].lstrip(".").lower()
    if fmt == "csv":
        rows = ["method,global_epoch,task,epoch,mean,min,max"]
        for label, trace in series.items():
            for i, r in enumerate(trace):
                rows.append(
                    f"{label},{i},{r.task},{r.epoch},{r.grad_norm_mean_pre!r},"
                    f"{r.grad_norm_min_pre!r},{r.grad_norm_max_pre!r}"
                )
        atomic_write(path, "\n".join(rows) + "\n")
    elif fmt == "svg":
        _write_svg(series, path)
    else:
        raise ValueError(f"unsupported figure format {fmt!r}; use 'svg' or 'csv'")


def read_figure_csv(path) -> dict[str, list[tuple]]:
    out: dict[str, list[tuple]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["method"], []).append(
                (int(row["task"]), int(row["epoch"]),
                 float(row["mean"]), float(row["min"]), float(row["max"]))
            )
    return out


def _normalize_traces(traces) -> dict[str, list[EpochGradStats]]:
    if isinstance(traces, MetricsReport):
        traces = [traces]
    if isinstance(traces, dict):
        return {str(k): list(v) for k, v in traces.items()}
    traces = list(traces)
    if traces and isinstance(traces[0], MetricsReport):
        return {
            str(r.metadata.get("label", f"run{i}")): r.grad_trace for i, r in enumerate(traces)
        }
    return {"trace": traces}


def _write_svg(series, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ltcil"
    fig, ax = plt.subplots(figsize=(8, 3.5))
    first = next(iter(series.values()))
    for b in task_boundaries(first):
        ax.axvline(b - 0.5, color="red", lw=0.8, alpha=0.6)
    for label, trace in series.items():
        x = np.arange(len(trace))
        mean = [r.grad_norm_mean_pre for r in trace]
        (line,) = ax.plot(x, mean, lw=1.2, label=label)
        ax.fill_between(
            x, [r.grad_norm_min_pre for r in trace], [r.grad_norm_max_pre for r in trace],
            color=line.get_color(), alpha=0.2, lw=0,
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("gradient norm per mini-batch")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.fspath(path)) or ".", suffix=".svg")
    os.close(fd)
    try:
        fig.savefig(tmp, format="svg", metadata={"Date": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
