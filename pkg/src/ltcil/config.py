"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace

from .data import PROTOCOLS, SCENARIOS, ConfigurationError, SyntheticSpec, build_profile
from .gcr import PER_BATCH, PER_EPOCH_MEAN, GcrConfig
from .metrics import GroupThresholds
from .schedule import KINDS, Schedule
from .trainer import TrainConfig, TrainingConfigError


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _list(conv):
    def parse(s: str):
        return [conv(p) for p in s.split(",") if p.strip()]
    return parse


def _opt_list(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none") else _list(conv)(s)
    return parse


def _str(s: str) -> str:
    return s.strip()


@dataclass
class ExperimentConfig:
    # data
    num_classes: int = 20
    input_dim: int = 32
    n_max: int = 500
    rho: float = 100.0
    cluster_std: float = 0.25
    test_per_class: int = 50
    rank_seed: int | None = None
    dataset: str = ""
    # stream
    protocol: str = "shuffled"
    scenario: str = "from_scratch"
    num_tasks: int = 5
    # training
    hidden_sizes: list[int] = field(default_factory=lambda: [64, 64])
    epochs_per_task: int = 30
    batch_size: int = 32
    base_lr: float = 0.1
    lr_milestones: list[int] | None = None
    lr_decay: float = 0.1
    schedule: str = "entropy_sigmoid"
    fixed_lambda: float = 1.0
    kd_temperature: float = 2.0
    gcr: bool = True
    lambda_gcr: float = 0.1
    gcr_beta: float = 0.9
    gcr_cadence: str = PER_BATCH
    gcr_reset_on_task: bool = False
    reweighting: bool = True
    # evaluation
    major_min: int = 100
    minor_max: int = 20
    # runner
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = ""
    # ablation grid
    ablate_schedules: list[str] = field(default_factory=lambda: list(KINDS))
    ablate_gcr: list[bool] = field(default_factory=lambda: [True])
    ablate_reweighting: list[bool] = field(default_factory=lambda: [True])
    ablate_protocols: list[str] = field(default_factory=lambda: ["in_ordered", "shuffled"])
    ablate_num_tasks: list[int] = field(default_factory=lambda: [5])

    def validate(self) -> "ExperimentConfig":
        """Check every cross-field constraint by building the owning objects."""
        try:
            if self.protocol not in PROTOCOLS:
                raise ConfigError(f"protocol: expected one of {PROTOCOLS}")
            if self.scenario not in SCENARIOS:
                raise ConfigError(f"scenario: expected one of {SCENARIOS}")
            if not self.seeds:
                raise ConfigError("seeds: at least one seed is required")
            if any(s < 0 for s in self.seeds):
                raise ConfigError("seeds: must be non-negative")
            if not self.dataset:
                build_profile(self.num_classes, self.n_max, self.rho)
                self.synthetic_spec(self.seeds[0])
            K = self.num_classes
            rest = K - (K + 1) // 2 if self.scenario == "from_half" else K
            for key, values in (("num_tasks", [self.num_tasks]),
                                ("ablate_num_tasks", self.ablate_num_tasks)):
                for n in values:
                    if not 1 <= n <= rest:
                        raise ConfigError(f"{key}: cannot split {rest} classes into {n} tasks")
            for k in self.ablate_schedules:
                if k not in KINDS:
                    raise ConfigError(f"ablate_schedules: unknown schedule {k!r}")
            for p in self.ablate_protocols:
                if p not in PROTOCOLS:
                    raise ConfigError(f"ablate_protocols: unknown protocol {p!r}")
            self.thresholds()
            self.train_config(self.seeds[0])
        except (ConfigurationError, TrainingConfigError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return self

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.num_classes, self.input_dim, self.cluster_std,
                             self.test_per_class, seed, self.rank_seed)

    def thresholds(self) -> GroupThresholds:
        return GroupThresholds(self.major_min, self.minor_max)

    def train_config(self, seed: int) -> TrainConfig:
        gcr = None
        if self.gcr:
            if self.gcr_cadence not in (PER_BATCH, PER_EPOCH_MEAN):
                raise ConfigError(f"gcr_cadence: unknown cadence {self.gcr_cadence!r}")
            gcr = GcrConfig(self.lambda_gcr, self.gcr_beta, self.gcr_reset_on_task, self.gcr_cadence)
        return TrainConfig(
            epochs_per_task=self.epochs_per_task,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            lr_milestones=None if self.lr_milestones is None else tuple(self.lr_milestones),
            lr_decay=self.lr_decay,
            schedule=Schedule(self.schedule, self.fixed_lambda),
            gcr=gcr,
            kd_temperature=self.kd_temperature,
            seed=seed,
            reweighting=self.reweighting,
            hidden_sizes=tuple(self.hidden_sizes),
        )

    def to_dict(self, with_output=False) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if not with_output:
            d.pop("output_dir")
        return d

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x).lower() if isinstance(x, bool) else str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def ablation_cells(self):
        """Yield ``(variant_label, column_label, config)`` for every grid cell."""
        rows = itertools.product(self.ablate_schedules, self.ablate_gcr, self.ablate_reweighting)
        for kind, gcr, rw in rows:
            label = f"{kind}{'+gcr' if gcr else ''}{'+gr' if rw else ''}"
            for protocol, n in itertools.product(self.ablate_protocols, self.ablate_num_tasks):
                cell = replace(self, schedule=kind, gcr=gcr, reweighting=rw,
                               protocol=protocol, num_tasks=n)
                yield label, f"{protocol}/N{n}", cell


_PARSERS = {
    "num_classes": int, "input_dim": int, "n_max": int, "rho": float,
    "cluster_std": float, "test_per_class": int, "rank_seed": _opt_int, "dataset": _str,
    "protocol": _str, "scenario": _str, "num_tasks": int,
    "hidden_sizes": _list(int), "epochs_per_task": int, "batch_size": int,
    "base_lr": float, "lr_milestones": _opt_list(int), "lr_decay": float,
    "schedule": _str, "fixed_lambda": float, "kd_temperature": float,
    "gcr": _bool, "lambda_gcr": float, "gcr_beta": float, "gcr_cadence": _str,
    "gcr_reset_on_task": _bool, "reweighting": _bool,
    "major_min": int, "minor_max": int,
    "seeds": _list(int), "output_dir": _str,
    "ablate_schedules": _list(_str), "ablate_gcr": _list(_bool),
    "ablate_reweighting": _list(_bool), "ablate_protocols": _list(_str),
    "ablate_num_tasks": _list(int),
}
KEYS = tuple(f.name for f in fields(ExperimentConfig))
assert set(KEYS) == set(_PARSERS)


def parse_pairs(pairs) -> dict:
    """Convert ``(key, raw_value)`` pairs to typed values, rejecting unknown keys."""
    out = {}
    for key, raw in pairs:
        key = key.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{key}: unknown configuration key")
        try:
            out[key] = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return out


def parse_text(text: str) -> dict:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return parse_pairs(pairs)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_text(fh.read()))
    values.update(overrides or {})
    return ExperimentConfig(**values).validate()
