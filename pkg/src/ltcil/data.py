"""Synthetic long-tailed data and class-incremental task streams."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

SHUFFLED = "shuffled"
IN_ORDERED = "in_ordered"
FROM_SCRATCH = "from_scratch"
FROM_HALF = "from_half"
PROTOCOLS = (SHUFFLED, IN_ORDERED)
SCENARIOS = (FROM_SCRATCH, FROM_HALF)


class ConfigurationError(ValueError):
    """Parameters describe an impossible dataset or split."""


@dataclass(frozen=True)
class LongTailProfile:
    counts: tuple[int, ...]
    n_max: int
    rho: float

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def realized_ratio(self) -> float:
        return max(self.counts) / min(self.counts)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 20
    input_dim: int = 32
    cluster_std: float = 0.25
    test_per_class: int = 50
    seed: int = 0
    # None keeps class k at long-tail rank k; an int permutes ranks with that seed.
    rank_seed: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.input_dim < 1 or self.test_per_class < 1 or self.cluster_std < 0:
            raise ConfigurationError(f"invalid synthetic spec {self}")


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    class_counts: dict[int, int]
    means: np.ndarray | None = None

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_counts)


@dataclass
class Task:
    classes: tuple[int, ...]
    X: np.ndarray
    y: np.ndarray

    @property
    def counts(self) -> dict[int, int]:
        labels, n = np.unique(self.y, return_counts=True)
        return {int(c): int(k) for c, k in zip(labels, n)}


@dataclass
class TaskStream:
    tasks: list[Task]
    protocol: str
    scenario: str
    num_tasks: int
    dataset: Dataset = field(repr=False)

    def test_set(self, classes=None):
        """Balanced test samples restricted to ``classes`` (all classes by default)."""
        if classes is None:
            return self.dataset.X_test, self.dataset.y_test
        mask = np.isin(self.dataset.y_test, list(classes))
        return self.dataset.X_test[mask], self.dataset.y_test[mask]


def build_profile(num_classes: int, n_max: int, rho: float) -> LongTailProfile:
    """Exponential long-tail profile ``n_k = round(n_max * rho^(-k/(K-1)))``."""
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if n_max < num_classes:
        raise ConfigurationError("n_max must be at least the number of classes")
    if rho < 1:
        raise ConfigurationError("imbalance ratio rho must be >= 1")
    k = np.arange(num_classes)
    counts = np.round(n_max * float(rho) ** (-k / (num_classes - 1))).astype(int)
    if counts.min() < 1:
        raise ConfigurationError(
            f"n_max={n_max}, rho={rho} leaves a class with no samples"
        )
    return LongTailProfile(tuple(int(c) for c in counts), int(n_max), float(rho))


def generate_dataset(spec: SyntheticSpec, profile: LongTailProfile) -> Dataset:
    """Gaussian clusters around seeded unit-norm means.

    Train counts follow ``profile``; the test split holds ``test_per_class``
    fresh draws per class.
    """
    if profile.num_classes != spec.num_classes:
        raise ConfigurationError(
            f"profile has {profile.num_classes} classes, spec has {spec.num_classes}"
        )
    rng = np.random.default_rng(spec.seed)
    K, d = spec.num_classes, spec.input_dim
    means = rng.normal(size=(K, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    if spec.rank_seed is None:
        rank_of_class = np.arange(K)
    else:
        rank_of_class = np.random.default_rng(spec.rank_seed).permutation(K)
    class_counts = {c: profile.counts[rank_of_class[c]] for c in range(K)}

    def draw(n_per_class):
        X = [means[c] + spec.cluster_std * rng.normal(size=(n_per_class[c], d)) for c in range(K)]
        y = [np.full(n_per_class[c], c, dtype=np.int64) for c in range(K)]
        return np.vstack(X), np.concatenate(y)

    X_train, y_train = draw(class_counts)
    X_test, y_test = draw({c: spec.test_per_class for c in range(K)})
    return Dataset(X_train, y_train, X_test, y_test, class_counts, means)


def _chunks(order, n):
    return [tuple(int(c) for c in part) for part in np.array_split(np.asarray(order), n)]


def split_tasks(dataset: Dataset, num_tasks: int, protocol=SHUFFLED,
                scenario=FROM_SCRATCH, seed=0) -> TaskStream:
    """Partition classes into an ordered task stream.

    ``in_ordered`` sorts classes by descending training count (ties by class
    id); ``shuffled`` applies a seeded permutation. ``from_half`` puts the
    first ceil(K/2) classes of that order into one initial task and splits the
    rest into ``num_tasks`` tasks.
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}")
    classes = dataset.classes
    K = len(classes)
    if protocol == IN_ORDERED:
        order = sorted(classes, key=lambda c: (-dataset.class_counts[c], c))
    else:
        order = [classes[i] for i in np.random.default_rng(seed).permutation(K)]

    if scenario == FROM_SCRATCH:
        if not 1 <= num_tasks <= K:
            raise ConfigurationError(f"cannot split {K} classes into {num_tasks} tasks")
        groups = _chunks(order, num_tasks)
    else:
        half = math.ceil(K / 2)
        rest = order[half:]
        if not 1 <= num_tasks <= len(rest):
            raise ConfigurationError(
                f"cannot split the remaining {len(rest)} classes into {num_tasks} tasks"
            )
        groups = [tuple(order[:half])] + _chunks(rest, num_tasks)

    tasks = []
    for group in groups:
        mask = np.isin(dataset.y_train, group)
        tasks.append(Task(group, dataset.X_train[mask], dataset.y_train[mask]))
    return TaskStream(tasks, protocol, scenario, num_tasks, dataset)


def write_dataset_csv(dataset: Dataset, path) -> None:
    d = dataset.X_train.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_id", "split", *[f"x{i}" for i in range(d)]])
        sid = 0
        for split, X, y in (("train", dataset.X_train, dataset.y_train),
                            ("test", dataset.X_test, dataset.y_test)):
            for row, label in zip(X, y):
                writer.writerow([sid, int(label), split, *[repr(float(v)) for v in row]])
                sid += 1


def read_dataset_csv(path) -> Dataset:
    rows = {"train": ([], []), "test": ([], [])}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sample_id", "class_id", "split"]:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        for rec in reader:
            X, y = rows[rec[2]]
            y.append(int(rec[1]))
            X.append([float(v) for v in rec[3:]])
    d = len(header) - 3
    Xtr, ytr = (np.array(a, dtype=np.float64) for a in rows["train"])
    Xte, yte = (np.array(a, dtype=np.float64) for a in rows["test"])
    labels, counts = np.unique(ytr.astype(np.int64), return_counts=True)
    return Dataset(
        Xtr.reshape(-1, d), ytr.astype(np.int64), Xte.reshape(-1, d), yte.astype(np.int64),
        {int(c): int(n) for c, n in zip(labels, counts)},
    )


def write_profile_json(class_counts: dict[int, int], path) -> None:
    with open(path, "w") as fh:
        json.dump({str(c): int(n) for c, n in sorted(class_counts.items())}, fh, indent=2)
        fh.write("\n")


def read_profile_json(path) -> dict[int, int]:
    with open(path) as fh:
        return {int(c): int(n) for c, n in json.load(fh).items()}
