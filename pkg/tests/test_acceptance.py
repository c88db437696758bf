"""Acceptance gate: one PASS/FAIL line per criterion.

Run through pytest (lines are repeated in the terminal summary) or directly:

    python tests/test_acceptance.py

The multi-seed trend checks share one cache of runs on the reference
benchmark (20 classes, imbalance ratio 100, 5 tasks, seeds 0-4).
"""
from __future__ import annotations

import functools
import math
import sys
import time
from pathlib import Path
from unittest import mock

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ltcil import nn  # noqa: E402
from ltcil import gcr as gcr_mod  # noqa: E402
from ltcil import schedule as schedule_mod  # noqa: E402
from ltcil import stats as stats_mod  # noqa: E402
from ltcil import trainer as trainer_mod  # noqa: E402
from ltcil.cli import load_dataset  # noqa: E402
from ltcil.config import ExperimentConfig  # noqa: E402
from ltcil.data import FROM_HALF, FROM_SCRATCH, IN_ORDERED, SHUFFLED, build_profile, split_tasks  # noqa: E402
from ltcil.estimator import LongTailIncrementalClassifier  # noqa: E402
from ltcil.experiment import run_experiment, time_inference  # noqa: E402
from ltcil.gcr import EmaState, GcrConfig, ema_update, gcr_apply, gcr_step  # noqa: E402
from ltcil.metrics import (  # noqa: E402
    MetricsReport, boundary_stability, evaluate, read_report_json, read_trace_csv,
    write_report_json, write_trace_csv,
)
from ltcil.schedule import FIXED, KINDS, SIGMOID, Schedule, distillation_lambda  # noqa: E402
from ltcil.stats import ClassDistAccumulator, GradNormLedger  # noqa: E402
from ltcil.trainer import TrainConfig  # noqa: E402
from oracles import (  # noqa: E402
    central_diff, entropy_by_summation, plain_sgd, rel_error, toy_stream, unrolled_ema,
)

SEEDS = (0, 1, 2, 3, 4)
LINES: list[str] = []


def verdict(num, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = (f"ACCEPTANCE C{num:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail} "
            f"[{elapsed:.1f}s / budget {budget:g}s]")
    LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- shared runs

VARIANTS = {
    # full method: reweighting + GCR + entropy x sigmoid
    "method": {},
    "gcr_off": {"gcr": False},
    "gr_baseline": {"gcr": False, "schedule": FIXED, "fixed_lambda": 1.0},
    **{f"sched_{k}": {"schedule": k} for k in KINDS},
}


def reference_config(protocol, variant, seed) -> ExperimentConfig:
    return ExperimentConfig(protocol=protocol, scenario=FROM_SCRATCH, num_tasks=5, rho=100.0,
                            num_classes=20, seeds=[seed], **VARIANTS[variant]).validate()


@functools.lru_cache(maxsize=None)
def reference_run(protocol, variant, seed) -> MetricsReport:
    cfg = reference_config(protocol, variant, seed)
    ds = load_dataset(cfg, seed)
    stream = split_tasks(ds, cfg.num_tasks, cfg.protocol, cfg.scenario, seed)
    return run_experiment(stream, cfg.train_config(seed), cfg.thresholds())


def first_epoch_ranges(report, stream="pre"):
    return [getattr(b, f"range_{stream}") for b in boundary_stability(report.grad_trace)]


# ------------------------------------------------------------------- criteria

def check_1():
    t0 = time.perf_counter()
    ok = []
    ok.append(schedule_mod.lambda_time_sigmoid(0, 30) == 0.5)
    ok.append(abs(schedule_mod.lambda_time_sigmoid(30, 30) - 0.7310585786) <= 1e-10
              and abs(schedule_mod.sigmoid(1.0) - 1 / (1 + math.exp(-1))) <= 1e-12)
    uniform = ClassDistAccumulator().update({c: 9 for c in range(7)}).normalized_entropy()
    degenerate = ClassDistAccumulator().update({0: 50, 1: 0}).normalized_entropy()
    ninety = ClassDistAccumulator().update({0: 9, 1: 1}).normalized_entropy()
    ok.append(abs(uniform - 1.0) <= 1e-12)
    ok.append(abs(degenerate - 0.0) <= 1e-12)
    ok.append(abs(ninety - entropy_by_summation([0.9, 0.1])) <= 1e-9)
    prod = all(
        distillation_lambda(Schedule(), t, 30, h) == h * schedule_mod.lambda_time_sigmoid(t, 30)
        and distillation_lambda(Schedule("entropy_linear"), t, 30, h) == h * (t / 30)
        for t in range(31) for h in (0.0, 0.25, ninety, 1.0)
    )
    ok.append(prod)
    g4 = gcr_apply(EmaState(0.9, np.array([1.0, 0.0]), 1), np.array([0.0, 1.0]), 0.1)
    ok.append(g4.tolist() == [-0.1, 1.1])
    g = np.random.default_rng(0).normal(size=40)
    s = EmaState(0.9)
    fixed_point = True
    for _ in range(10):
        s = ema_update(s, g)
        fixed_point &= bool(np.array_equal(s.g_bar, g))
    ok.append(fixed_point)
    grads = list(np.random.default_rng(1).normal(size=(10, 40)))
    s = EmaState(0.9)
    for x in grads:
        s = ema_update(s, x)
    unrolled_err = float(np.max(np.abs(s.g_bar - unrolled_ema(grads, 0.9))))
    ok.append(unrolled_err <= 1e-12)
    names = ["sigma(0)", "sigma(1)", "H uniform", "H degenerate", "H(0.9,0.1)", "product",
             "GCR pair", "EMA fixed point", "EMA unrolled"]
    failed = [n for n, k in zip(names, ok) if not k]
    detail = (f"{sum(ok)}/{len(ok)} identities hold; H(0.9,0.1)={ninety:.10f}, "
              f"g'={g4.tolist()}, unrolled err={unrolled_err:.1e}"
              + (f"; failed: {failed}" if failed else ""))
    return verdict(1, "equation exactness", all(ok), detail, time.perf_counter() - t0, 1)


def _small_problem(rng):
    d, k = int(rng.integers(2, 5)), int(rng.integers(3, 6))
    hidden = tuple(int(h) for h in rng.integers(3, 6, size=int(rng.integers(1, 3))))
    model = nn.init_mlp(d, hidden, k, rng)
    n = int(rng.integers(3, 6))
    X = rng.normal(size=(n, d))
    y = rng.integers(0, k, n)
    w = rng.uniform(0.2, 1.0, n)
    m = int(rng.integers(1, k))
    teacher = rng.normal(size=(n, m)) * 2
    lam = float(rng.uniform(0.1, 1.0))
    return model, X, y, w, m, teacher, lam


def check_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"ce": 0.0, "kd": 0.0, "combined": 0.0}
    for _ in range(100):
        model, X, y, w, m, teacher, lam = _small_problem(rng)
        theta = model.get_flat()

        def ce(th):
            return nn.ce_loss_and_grad(nn.forward(model.with_flat(th), X), y, w)[0]

        def kd(th):
            return nn.kd_loss_and_grad(nn.forward(model.with_flat(th), X), teacher, 2.0, m)[0]

        z = nn.forward(model, X)
        _, dce = nn.ce_loss_and_grad(z, y, w)
        _, dkd = nn.kd_loss_and_grad(z, teacher, 2.0, m)
        pairs = {
            "ce": (nn.backward(model, X, dce), central_diff(ce, theta)),
            "kd": (nn.backward(model, X, dkd), central_diff(kd, theta)),
            "combined": (nn.backward(model, X, dce + lam * dkd),
                         central_diff(lambda th: ce(th) + lam * kd(th), theta)),
        }
        for key, (analytic, numeric) in pairs.items():
            worst[key] = max(worst[key], rel_error(analytic, numeric))
    ok = all(v < 1e-4 for v in worst.values())
    detail = "worst relative error over 100 models: " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    return verdict(2, "gradient correctness", ok, detail, time.perf_counter() - t0, 30)


def check_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    hand_ok = scale_ok = max_ok = True
    for _ in range(200):
        k = int(rng.integers(1, 12))
        classes = [int(c) for c in rng.choice(100, k, replace=False)]
        G = [float(v) for v in rng.uniform(1e-3, 1e3, k)]
        ledger = GradNormLedger().reset(classes).accumulate(classes, G)
        w = ledger.reweight()
        g_min = min(G)
        hand_ok &= all(abs(w[c] - g_min / g) <= 1e-12 * (g_min / g) for c, g in zip(classes, G))
        s = float(rng.uniform(1e-3, 1e3))
        ws = GradNormLedger().reset(classes).accumulate(classes, [g * s for g in G]).reweight()
        scale_ok &= all(abs(ws[c] - w[c]) <= 1e-12 for c in classes)
        max_ok &= max(w.values()) == 1.0
    ok = hand_ok and scale_ok and max_ok
    detail = f"200 random ledgers: hand formula {hand_ok}, scale invariance {scale_ok}, max weight == 1 {max_ok}"
    return verdict(3, "reweighting rule", ok, detail, time.perf_counter() - t0, 1)


def check_4():
    t0 = time.perf_counter()
    config = TrainConfig(epochs_per_task=4, batch_size=3, base_lr=0.5, hidden_sizes=(5,), seed=7,
                         schedule=Schedule(FIXED, 0.0), gcr=None, reweighting=False)
    est = LongTailIncrementalClassifier.from_config(config)
    for X, y in toy_stream():
        est.partial_fit(X, y)
    ref = plain_sgd(config, toy_stream())
    same = est.model_.get_flat().tobytes() == ref.get_flat().tobytes()
    diff = float(np.max(np.abs(est.model_.get_flat() - ref.get_flat())))
    detail = f"2-task toy stream, {ref.n_params} parameters, bit-identical={same}, max |diff|={diff:.1e}"
    return verdict(4, "baseline reduction", same, detail, time.perf_counter() - t0, 10)


def check_5():
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in SEEDS:
        on = reference_run(SHUFFLED, "method", seed)
        off = reference_run(SHUFFLED, "gcr_off", seed)
        m_on, m_off = np.median(first_epoch_ranges(on)), np.median(first_epoch_ranges(off))
        post_on = np.median(first_epoch_ranges(on, "post"))
        wins += m_on < m_off
        rows.append(f"s{seed}:{m_on:.3f}<{m_off:.3f}?{'y' if m_on < m_off else 'n'}"
                    f"(post-GCR {post_on:.3f})")
    detail = (f"{wins}/5 seeds with smaller median first-epoch range (raw loss-gradient norms) "
              f"with GCR on; " + " ".join(rows))
    return verdict(5, "gradient-stability trend", wins >= 4, detail, time.perf_counter() - t0, 300)


def check_6():
    t0 = time.perf_counter()
    acc = {k: [reference_run(IN_ORDERED, f"sched_{k}", s).overall_accuracy for s in SEEDS] for k in KINDS}
    med = {k: float(np.median(v)) for k, v in acc.items()}
    d_fixed = med["entropy_sigmoid"] - med[FIXED]
    d_sig = med["entropy_sigmoid"] - med[SIGMOID]
    ok = d_fixed >= 0 and d_sig >= 0
    detail = ("median accuracy " + ", ".join(f"{k}={v:.4f}" for k, v in med.items())
              + f"; ES-Fixed={d_fixed:+.4f}, ES-Sigmoid={d_sig:+.4f}")
    elapsed = time.perf_counter() - t0
    base = float(np.median([reference_run(IN_ORDERED, "gr_baseline", s).overall_accuracy for s in SEEDS]))
    info = (f"ACCEPTANCE C6  INFO  fixed-coefficient row with GCR off (GR baseline) median={base:.4f}; "
            f"ES(+GCR)-baseline={med['entropy_sigmoid'] - base:+.4f} (not gating)")
    result = verdict(6, "scheduling ablation trend", ok, detail, elapsed, 900)
    LINES.append(info)
    print(info)
    return result


def check_7():
    t0 = time.perf_counter()
    d_minor, d_major = [], []
    for seed in SEEDS:
        m = reference_run(SHUFFLED, "method", seed).group_accuracy
        b = reference_run(SHUFFLED, "gr_baseline", seed).group_accuracy
        d_minor.append(m["minor"] - b["minor"])
        d_major.append(m["major"] - b["major"])
    mm, mj = float(np.median(d_minor)), float(np.median(d_major))
    ok = mm > 0 and mj > -0.01
    detail = (f"median Minor delta {mm * 100:+.2f} pp (per seed "
              + " ".join(f"{d * 100:+.1f}" for d in d_minor)
              + f"), median Major delta {mj * 100:+.2f} pp")
    return verdict(7, "minority-group trend", ok, detail, time.perf_counter() - t0, 600)


class _Forbidden:
    """Stand-in for training-only state; any use during inference raises."""

    def __init__(self, name):
        object.__setattr__(self, "_name", name)

    def _boom(self, *a, **k):
        raise AssertionError(f"inference consulted {object.__getattribute__(self, '_name')}")

    __getattr__ = __call__ = __bool__ = __len__ = __iter__ = __array__ = _boom


def check_8():
    t0 = time.perf_counter()
    cfg = reference_config(SHUFFLED, "method", 0)
    ds = load_dataset(cfg, 0)
    stream = split_tasks(ds, 5, SHUFFLED, FROM_SCRATCH, 0)
    fitted = {}
    for name, config in (("on", cfg.train_config(0)),
                         ("off", reference_config(SHUFFLED, "gcr_off", 0).train_config(0))):
        est = LongTailIncrementalClassifier.from_config(config)
        for task in stream.tasks:
            est.partial_fit(task.X, task.y)
        fitted[name] = est
    X, y = stream.test_set()
    est = fitted["on"]
    before = (est.decision_function(X), est.predict(X), evaluate(est.model_, X, y, est.classes_))

    def forbid(name):
        return mock.patch(name, _Forbidden(name))

    patches = [
        forbid("ltcil.schedule.distillation_lambda"), forbid("ltcil.trainer.distillation_lambda"),
        forbid("ltcil.gcr.gcr_step"), forbid("ltcil.trainer.gcr_step"),
        forbid("ltcil.gcr.gcr_apply"), forbid("ltcil.trainer.gcr_apply"),
        forbid("ltcil.trainer.train_task"), forbid("ltcil.estimator.train_task"),
        mock.patch.object(stats_mod.GradNormLedger, "reweight", _Forbidden("ledger.reweight")),
        mock.patch.object(stats_mod.ClassDistAccumulator, "normalized_entropy",
                          _Forbidden("accumulator.normalized_entropy")),
    ]
    saved = {a: getattr(est, a) for a in ("ema_", "accumulator_", "teacher_", "grad_trace_")}
    structural_ok, why = True, ""
    try:
        for p in patches:
            p.start()
        for a in saved:
            setattr(est, a, _Forbidden(a))
        after = (est.decision_function(X), est.predict(X), evaluate(est.model_, X, y, est.classes_))
        structural_ok = (after[0].tobytes() == before[0].tobytes()
                         and np.array_equal(after[1], before[1]) and after[2] == before[2])
    except AssertionError as exc:
        structural_ok, why = False, str(exc)
    finally:
        for p in patches:
            p.stop()
        for a, v in saved.items():
            setattr(est, a, v)
    same_shape = [l.weight.shape for l in fitted["on"].model_.layers] == \
                 [l.weight.shape for l in fitted["off"].model_.layers]
    t_on, t_off = [], []
    for _ in range(15):
        t_on.append(time_inference(fitted["on"], X, repeats=3, number=20))
        t_off.append(time_inference(fitted["off"], X, repeats=3, number=20))
    ratio = min(t_on) / min(t_off)
    ok = structural_ok and same_shape and 0.95 <= ratio <= 1.05
    detail = (f"inference with schedule/EMA/ledger/accumulator replaced by raising sentinels: "
              f"{'identical outputs' if structural_ok else 'FAILED ' + why}; "
              f"same parameter shapes {same_shape}; wall-time ratio on/off {ratio:.3f}")
    return verdict(8, "zero inference overhead", ok, detail, time.perf_counter() - t0, 60)


def check_9(tmp_dir):
    t0 = time.perf_counter()
    cfg = reference_config(SHUFFLED, "method", 3)
    ds = load_dataset(cfg, 3)
    stream = split_tasks(ds, 5, SHUFFLED, FROM_SCRATCH, 3)
    a = run_experiment(stream, cfg.train_config(3), metadata={"label": "a"})
    b = run_experiment(split_tasks(load_dataset(cfg, 3), 5, SHUFFLED, FROM_SCRATCH, 3),
                       cfg.train_config(3), metadata={"label": "a"})
    same = a.to_json(include_timing=False) == b.to_json(include_timing=False)
    tmp_dir = Path(tmp_dir)
    write_report_json(a, tmp_dir / "report.json")
    write_trace_csv(a.grad_trace, tmp_dir / "trace.csv")
    json_ok = read_report_json(tmp_dir / "report.json") == a
    csv_ok = read_trace_csv(tmp_dir / "trace.csv") == a.grad_trace
    ok = same and json_ok and csv_ok
    detail = (f"rerun byte-identical (timing excluded) {same}; JSON round-trip {json_ok}; "
              f"CSV trace round-trip {csv_ok} ({len(a.grad_trace)} rows)")
    return verdict(9, "determinism and round-trips", ok, detail, time.perf_counter() - t0, 120)


def check_10():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(seeds=[0]).validate()
    ds = load_dataset(cfg, 0)
    ordered = split_tasks(ds, 5, IN_ORDERED, FROM_SCRATCH, 0)
    counts = [[ds.class_counts[c] for c in t.classes] for t in ordered.tasks]
    flat = [n for t in counts for n in t]
    order_ok = flat == sorted(ds.class_counts.values(), reverse=True)
    half = split_tasks(ds, 5, SHUFFLED, FROM_HALF, 0)
    half_ok = len(half.tasks[0].classes) == 10 and len(half.tasks) == 6
    half_io = split_tasks(ds, 5, IN_ORDERED, FROM_HALF, 0)
    half_ok &= set(half_io.tasks[0].classes) == set(sorted(ds.class_counts, key=lambda c: -ds.class_counts[c])[:10])
    ratios = {rho: build_profile(20, 500, rho).realized_ratio for rho in (10, 50, 100)}
    ratio_ok = all(abs(r / rho - 1) <= 0.10 for rho, r in ratios.items())
    ok = order_ok and half_ok and ratio_ok
    detail = (f"in-ordered task counts {counts[0]}..{counts[-1]} descending {order_ok}; "
              f"from-half first task {len(half.tasks[0].classes)}/20 classes {half_ok}; "
              f"realized ratios " + ", ".join(f"{r:.1f}(rho={k})" for k, r in ratios.items()))
    return verdict(10, "protocol correctness", ok, detail, time.perf_counter() - t0, 1)


# ------------------------------------------------------------------- pytest


def test_c01_equation_exactness():
    assert check_1()


def test_c02_gradient_correctness():
    assert check_2()


def test_c03_reweighting_rule():
    assert check_3()


def test_c04_baseline_reduction():
    assert check_4()


@pytest.mark.slow
def test_c05_gradient_stability_trend():
    assert check_5()


@pytest.mark.slow
def test_c06_scheduling_ablation_trend():
    assert check_6()


@pytest.mark.slow
def test_c07_minority_group_trend():
    assert check_7()


def test_c08_zero_inference_overhead():
    assert check_8()


def test_c09_determinism_and_round_trips(tmp_path):
    assert check_9(tmp_path)


def test_c10_protocol_correctness():
    assert check_10()


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        results = [check_1(), check_2(), check_3(), check_4(), check_5(), check_6(),
                   check_7(), check_8(), check_9(tmp), check_10()]
    print(f"\n{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
