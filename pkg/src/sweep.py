"""Multi-seed runs: initialization sweeps, variant comparison and seed-paired comparison."""

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import BlockKind
from .config import EvalConfig, Interval, ModelConfig, TrainConfig
from .data import Dataset, load_splits
from .errors import DomainError
from .evaluate import CLEAN, NOISE_MEAN, Evaluation, MetricSummary, evaluate, fan_out, write_grouped_table
from .train import RunRecord, TrainedRun, sgd_train

logger = logging.getLogger(__name__)


@dataclass
class RunOutcome:
    run: TrainedRun
    evaluation: Evaluation | None

    @property
    def record(self) -> RunRecord:
        return self.run.record


def run_once(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    seed: int,
    *,
    splits: tuple[Dataset, Dataset] | None = None,
    threads: int = 1,
) -> RunOutcome:
    """Train on the train split, then evaluate on the test split unless the run FAILED."""
    train_data, test_data = splits or load_splits(train_cfg.dataset, train_cfg.test_fraction)
    run = sgd_train(model_cfg, train_cfg, train_data, seed)
    if run.record.failed:
        return RunOutcome(run, None)
    evaluation = evaluate(
        run.network,
        test_data.head(eval_cfg.max_samples),
        eval_cfg.noise_configs(seed),
        eval_cfg.attack_configs(seed),
        chunk_size=eval_cfg.chunk_size,
        threads=threads,
    )
    run.record.metrics = evaluation.metrics
    return RunOutcome(run, evaluation)


def summarize_runs(records: Sequence[RunRecord]) -> list[MetricSummary]:
    """Mean and sample SD (ddof=1) per metric over the runs that did not fail."""
    ok = [r for r in records if not r.failed]
    n_failed = len(records) - len(ok)
    names: list[str] = []
    for record in ok:
        names.extend(name for name in record.metrics if name not in names)
    if not names:
        names = [CLEAN]

    rows = []
    for name in names:
        values = np.array([r.metrics[name] for r in ok if name in r.metrics])
        mean = float(values.mean()) if len(values) else None
        sd = float(values.std(ddof=1)) if len(values) >= 2 else None
        rows.append(MetricSummary(name, mean, sd, len(values), n_failed))
    return rows


def interval_label(interval: Interval) -> str:
    return f"U[{interval[0]:.2f},{interval[1]:.2f}]"


@dataclass
class SweepEntry:
    kind: BlockKind
    interval: Interval
    seed: int
    record: RunRecord


@dataclass
class SweepTable:
    entries: list[SweepEntry]

    def groups(self) -> dict[str, list[RunRecord]]:
        out: dict[str, list[RunRecord]] = {}
        for e in self.entries:
            out.setdefault(self.group_label(e), []).append(e.record)
        return out

    def group_label(self, entry: SweepEntry) -> str:
        kinds = {e.kind for e in self.entries}
        label = interval_label(entry.interval)
        return label if len(kinds) == 1 else f"{entry.kind.value}/{label}"

    def summary(self) -> dict[str, list[MetricSummary]]:
        return {group: summarize_runs(records) for group, records in self.groups().items()}

    def write_runs_csv(self, path: Path) -> None:
        """One row per run; FAILED runs keep empty metric cells."""
        names: list[str] = []
        for e in self.entries:
            names.extend(name for name in e.record.metrics if name not in names)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "interval_low", "interval_high", "seed", "status", *names])
            for e in self.entries:
                cells = [repr(e.record.metrics[n]) if n in e.record.metrics else "" for n in names]
                low, high = e.interval
                writer.writerow([e.kind.value, repr(low), repr(high), e.seed, e.record.status.value, *cells])
        logger.info("wrote %s", path)

    def write_summary_csv(self, path: Path) -> None:
        write_grouped_table(path, "group", self.summary())

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        self.write_runs_csv(directory / "runs.csv")
        self.write_summary_csv(directory / "summary.csv")


def _grid(
    cells: list[tuple[BlockKind, Interval, int]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    threads: int,
) -> SweepTable:
    splits = load_splits(train_cfg.dataset, train_cfg.test_fraction)

    def work(cell: tuple[BlockKind, Interval, int]) -> SweepEntry:
        kind, interval, seed = cell
        cfg = model_cfg.model_copy(update={"kind": kind, "lambda_init": interval})
        outcome = run_once(cfg, train_cfg, eval_cfg, seed, splits=splits)
        return SweepEntry(kind, interval, seed, outcome.record)

    entries = fan_out(work, cells, threads)
    failed = sum(e.record.failed for e in entries)
    logger.info("grid of %d runs finished, %d FAILED", len(entries), failed)
    return SweepTable(entries)


def init_sweep(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    intervals: Sequence[Interval],
    seeds: Sequence[int],
    *,
    threads: int = 1,
) -> SweepTable:
    """Every (interval, seed) pair for the configured block kind; runs fan out over ``threads``."""
    if len(intervals) < 2:
        raise DomainError(f"an init sweep needs at least 2 intervals, got {len(intervals)}")
    if len(seeds) < 2:
        raise DomainError(f"an init sweep needs at least 2 seeds, got {len(seeds)}")
    cells = [(model_cfg.kind, tuple(interval), seed) for interval in intervals for seed in seeds]
    return _grid(cells, model_cfg, train_cfg, eval_cfg, threads)


@dataclass
class VariantResult:
    kind: BlockKind
    interval: Interval
    summary: list[MetricSummary]

    @property
    def score(self) -> float:
        """Clean accuracy plus mean noise accuracy; -inf when every run failed."""
        means = {row.metric: row.mean for row in self.summary}
        clean, noisy = means.get(CLEAN), means.get(NOISE_MEAN, 0.0)
        if clean is None or noisy is None:
            return -math.inf
        return clean + noisy


def compare_variants(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    kinds: Sequence[BlockKind],
    intervals: Sequence[Interval],
    seeds: Sequence[int],
    *,
    threads: int = 1,
) -> tuple[list[VariantResult], SweepTable]:
    """Per block kind, the initialization interval with the best clean + noise score.

    Kinds without a coefficient (Residual, NonResidual) are trained once per seed.
    """
    cells = []
    for kind in kinds:
        candidates = intervals if kind.owns_lambda or kind.gated else intervals[:1]
        cells += [(kind, tuple(interval), seed) for interval in candidates for seed in seeds]
    table = _grid(cells, model_cfg, train_cfg, eval_cfg, threads)

    by_cell: dict[tuple[BlockKind, Interval], list[RunRecord]] = {}
    for e in table.entries:
        by_cell.setdefault((e.kind, e.interval), []).append(e.record)

    best: list[VariantResult] = []
    for kind in kinds:
        results = [VariantResult(k, i, summarize_runs(rs)) for (k, i), rs in by_cell.items() if k is kind]
        winner = max(results, key=lambda r: r.score)
        logger.info("%s: selected %s (score %.2f)", kind.value, interval_label(winner.interval), winner.score)
        best.append(winner)
    return best, table


@dataclass(frozen=True)
class PairedComparison:
    metric: str
    wins: int
    losses: int
    ties: int
    mean_difference: float | None

    @property
    def pairs(self) -> int:
        return self.wins + self.losses + self.ties

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "wins": self.wins,
            "losses": self.losses,
            "ties": self.ties,
            "pairs": self.pairs,
            "mean_difference": self.mean_difference,
        }


def paired_comparison(a_runs: Sequence[RunRecord], b_runs: Sequence[RunRecord], metric: str) -> PairedComparison:
    """Per shared seed, whether run set A beats run set B on ``metric``; pairs with a FAILED run are skipped."""
    b_by_seed = {r.seed: r for r in b_runs}
    diffs = []
    for a in a_runs:
        b = b_by_seed.get(a.seed)
        if b is None or a.failed or b.failed or metric not in a.metrics or metric not in b.metrics:
            continue
        diffs.append(a.metrics[metric] - b.metrics[metric])
    diffs = np.array(diffs)
    return PairedComparison(
        metric,
        wins=int(np.sum(diffs > 0)),
        losses=int(np.sum(diffs < 0)),
        ties=int(np.sum(diffs == 0)),
        mean_difference=float(diffs.mean()) if len(diffs) else None,
    )
