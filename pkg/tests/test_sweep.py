import csv
import math

import numpy as np
import pytest

from src.blocks import BlockKind
from src.config import AttackSweep, DatasetConfig, EvalConfig, ModelConfig, TrainConfig
from src.errors import DomainError
from src.evaluate import CLEAN, NOISE_MEAN
from src.perturb import AttackKind, NoiseConfig, NoiseKind
from src.sweep import (
    SweepEntry,
    SweepTable,
    VariantResult,
    compare_variants,
    init_sweep,
    interval_label,
    paired_comparison,
    run_once,
    summarize_runs,
)
from src.train import RunRecord, RunStatus

TINY_TRAIN = TrainConfig(
    epochs=4,
    batch_size=16,
    lr_drops=[],
    dataset=DatasetConfig(source="moons", n=64, noise_sd=0.08),
    failure_patience=50,
)
TINY_MODEL = ModelConfig(kind=BlockKind.IN, depth=2, width=6)


def _record(seed, metrics=None, failed=False):
    return RunRecord(
        seed=seed,
        model=TINY_MODEL,
        train=TINY_TRAIN,
        status=RunStatus.FAILED if failed else RunStatus.OK,
        metrics=metrics or {},
    )


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_summary_of_one_run_has_no_sd():
    (row,) = summarize_runs([_record(0, {CLEAN: 80.0})])
    assert (row.mean, row.sd, row.n_runs, row.n_failed) == (80.0, None, 1, 0)


def test_summary_excludes_but_counts_failed_runs():
    records = [_record(0, {CLEAN: 80.0}), _record(1, {CLEAN: 90.0}), _record(2, failed=True)]
    (row,) = summarize_runs(records)
    assert row.mean == 85.0
    assert row.sd == pytest.approx(math.sqrt(50.0))
    assert (row.n_runs, row.n_failed) == (2, 1)


def test_summary_when_every_run_failed():
    (row,) = summarize_runs([_record(0, failed=True), _record(1, failed=True)])
    assert (row.metric, row.mean, row.sd, row.n_runs, row.n_failed) == (CLEAN, None, None, 0, 2)


def test_interval_label():
    assert interval_label((0.2, 0.25)) == "U[0.20,0.25]"


def test_paired_comparison():
    a = [_record(0, {CLEAN: 90.0}), _record(1, {CLEAN: 80.0}), _record(2, {CLEAN: 70.0}), _record(3, failed=True)]
    b = [_record(0, {CLEAN: 85.0}), _record(1, {CLEAN: 80.0}), _record(2, {CLEAN: 75.0}), _record(3, {CLEAN: 1.0})]
    result = paired_comparison(a, b, CLEAN)
    assert (result.wins, result.losses, result.ties, result.pairs) == (1, 1, 1, 3)
    assert result.mean_difference == 0.0
    assert result.to_dict()["pairs"] == 3


def test_paired_comparison_without_shared_seeds():
    result = paired_comparison([_record(0, {CLEAN: 1.0})], [_record(1, {CLEAN: 2.0})], CLEAN)
    assert result.pairs == 0
    assert result.mean_difference is None


def test_variant_score():
    rows = summarize_runs([_record(0, {CLEAN: 80.0, NOISE_MEAN: 60.0}), _record(1, {CLEAN: 90.0, NOISE_MEAN: 70.0})])
    assert VariantResult(BlockKind.IN, (0.2, 0.25), rows).score == 150.0
    dead = summarize_runs([_record(0, failed=True)])
    assert VariantResult(BlockKind.IN, (0.2, 0.25), dead).score == -math.inf


def test_sweep_preconditions():
    with pytest.raises(DomainError):
        init_sweep(TINY_MODEL, TINY_TRAIN, EvalConfig(), [(0.2, 0.25)], [0, 1])
    with pytest.raises(DomainError):
        init_sweep(TINY_MODEL, TINY_TRAIN, EvalConfig(), [(0.2, 0.25), (0.3, 0.4)], [0])


def test_run_once_fills_metrics():
    eval_cfg = EvalConfig(noise=[], attacks=[AttackSweep(kind=AttackKind.FGSM, epsilons=[0.05])], max_samples=8)
    outcome = run_once(TINY_MODEL, TINY_TRAIN, eval_cfg, seed=0)
    assert set(outcome.record.metrics) == {CLEAN, "attack/fgsm/0.05", "attack/fgsm/mean"}
    assert len(outcome.evaluation.labels) == 8


def test_sweep_tables_recompute(tmp_path):
    eval_cfg = EvalConfig(noise=[], attacks=[])
    table = init_sweep(TINY_MODEL, TINY_TRAIN, eval_cfg, [(0.0, 0.1), (0.3, 0.4)], [0, 1], threads=2)
    assert [(e.interval, e.seed) for e in table.entries] == [((0.0, 0.1), 0), ((0.0, 0.1), 1), ((0.3, 0.4), 0), ((0.3, 0.4), 1)]
    table.write(tmp_path)

    runs = _read(tmp_path / "runs.csv")
    summary = {row["group"]: row for row in _read(tmp_path / "summary.csv")}
    assert set(summary) == {"U[0.00,0.10]", "U[0.30,0.40]"}
    for low, label in (("0.0", "U[0.00,0.10]"), ("0.3", "U[0.30,0.40]")):
        values = [float(r[CLEAN]) for r in runs if r["interval_low"] == low and r["status"] == "ok"]
        row = summary[label]
        assert int(row["n_runs"]) == len(values)
        assert float(row["mean"]) == pytest.approx(np.mean(values), abs=1e-12)
        if len(values) >= 2:
            assert float(row["sd"]) == pytest.approx(np.std(values, ddof=1), abs=1e-12)


def test_sweep_table_failed_rows(tmp_path):
    table = SweepTable(
        [
            SweepEntry(BlockKind.IN, (0.2, 0.25), 0, _record(0, {CLEAN: 75.0})),
            SweepEntry(BlockKind.IN, (0.2, 0.25), 1, _record(1, failed=True)),
            SweepEntry(BlockKind.IN_SIG, (0.2, 0.25), 0, _record(0, {CLEAN: 65.0})),
        ]
    )
    table.write(tmp_path)
    runs = _read(tmp_path / "runs.csv")
    assert runs[1]["status"] == "failed"
    assert runs[1][CLEAN] == ""
    summary = _read(tmp_path / "summary.csv")
    assert [row["group"] for row in summary] == ["in/U[0.20,0.25]", "in_sig/U[0.20,0.25]"]
    assert summary[0]["n_failed"] == "1"


def test_compare_variants_trains_fixed_kinds_once_per_seed():
    eval_cfg = EvalConfig(noise=[], attacks=[])
    best, table = compare_variants(
        TINY_MODEL,
        TINY_TRAIN,
        eval_cfg,
        [BlockKind.RESIDUAL, BlockKind.IN],
        [(0.0, 0.1), (0.3, 0.4)],
        [0, 1],
    )
    kinds = [e.kind for e in table.entries]
    assert kinds.count(BlockKind.RESIDUAL) == 2
    assert kinds.count(BlockKind.IN) == 4
    assert [r.kind for r in best] == [BlockKind.RESIDUAL, BlockKind.IN]
    assert best[0].interval == (0.0, 0.1)


@pytest.mark.slow
def test_attack_accuracy_falls_with_radius():
    train = TINY_TRAIN.model_copy(update={"epochs": 30, "dataset": DatasetConfig(source="moons", n=200, noise_sd=0.08)})
    eval_cfg = EvalConfig(noise=[], attacks=[AttackSweep(kind=AttackKind.PGD, epsilons=[0.01, 0.1], iters=10)])
    small, large = [], []
    for seed in range(3):
        metrics = run_once(TINY_MODEL, train, eval_cfg, seed).record.metrics
        small.append(metrics["attack/pgd/0.01"])
        large.append(metrics["attack/pgd/0.1"])
    assert np.mean(large) < np.mean(small)


@pytest.mark.slow
def test_noise_does_not_help_on_average():
    train = TINY_TRAIN.model_copy(update={"epochs": 30, "dataset": DatasetConfig(source="moons", n=200, noise_sd=0.08)})
    eval_cfg = EvalConfig(attacks=[])
    clean, noisy = [], []
    for seed in range(3):
        metrics = run_once(TINY_MODEL, train, eval_cfg, seed).record.metrics
        clean.append(metrics[CLEAN])
        noisy.append(metrics[NOISE_MEAN])
    assert np.mean(noisy) <= np.mean(clean) + 2.0


# Trend checks at a desk-sized scale: a deep In stack against a residual baseline under Gaussian noise.
# On moons these trends are directional only; five seeds on a 500-sample test set can miss them.
TREND_TRAIN = TrainConfig(dataset=DatasetConfig(source="moons", n=2000, noise_sd=0.1))
TREND_EVAL = EvalConfig(noise=[NoiseConfig(kind=NoiseKind.GAUSSIAN, severity=0.08)], attacks=[])
TREND_MODEL = ModelConfig(kind=BlockKind.IN, depth=8, width=32, lambda_init=(0.2, 0.25))
TREND_SEEDS = range(5)
UNRELIABLE_TREND = "directional trend; at moons scale five seeds often split or tie"


def _mean(records, metric):
    return next(row.mean for row in summarize_runs(records) if row.metric == metric)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=UNRELIABLE_TREND)
def test_in_stack_beats_residual_under_noise():
    baseline = TREND_MODEL.model_copy(update={"kind": BlockKind.RESIDUAL})
    in_runs = [run_once(TREND_MODEL, TREND_TRAIN, TREND_EVAL, seed).record for seed in TREND_SEEDS]
    res_runs = [run_once(baseline, TREND_TRAIN, TREND_EVAL, seed).record for seed in TREND_SEEDS]
    noisy = paired_comparison(in_runs, res_runs, NOISE_MEAN)
    assert noisy.pairs == len(TREND_SEEDS)
    assert noisy.wins >= 4
    assert _mean(res_runs, CLEAN) - _mean(in_runs, CLEAN) <= 5.0


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=UNRELIABLE_TREND)
def test_larger_init_trades_clean_accuracy_for_noise_robustness():
    intervals = [(0.0, 0.1), (0.1, 0.2), (0.2, 0.25)]
    table = init_sweep(TREND_MODEL, TREND_TRAIN, TREND_EVAL, intervals, list(TREND_SEEDS))
    groups = table.groups()
    runs = [groups[interval_label(interval)] for interval in intervals]
    noisy = [_mean(records, NOISE_MEAN) for records in runs]
    clean = [_mean(records, CLEAN) for records in runs]
    assert all(a <= b for a, b in zip(noisy, noisy[1:]))
    assert all(a >= b for a, b in zip(clean, clean[1:]))
