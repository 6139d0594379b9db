"""Clean, noisy and adversarial accuracy of a classifier."""

import csv
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TypeVar

import numpy as np

from .data import Dataset
from .network import Classifier
from .perturb import AttackConfig, NoiseConfig, noise, run_attack

logger = logging.getLogger(__name__)

CLEAN = "clean"
NOISE_MEAN = "noise/mean"

Item = TypeVar("Item")
Result = TypeVar("Result")


def fan_out(fn: Callable[[Item], Result], items: Iterable[Item], threads: int = 1) -> list[Result]:
    """Map ``fn`` over independent work items; results come back in submission order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def chunks(n: int, size: int) -> list[np.ndarray]:
    return [np.arange(start, min(start + size, n)) for start in range(0, n, size)]


@dataclass
class Evaluation:
    metrics: dict[str, float]
    predictions: dict[str, np.ndarray] = field(repr=False)
    labels: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    def write_predictions_csv(self, path: Path) -> None:
        names = list(self.predictions)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", *names])
            for row, (index, label) in enumerate(zip(self.indices, self.labels, strict=True)):
                writer.writerow([int(index), int(label), *(int(self.predictions[name][row]) for name in names)])
        logger.info("wrote %s", path)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if not len(labels):
        return 0.0
    return 100.0 * float(np.sum(predictions == labels)) / len(labels)


def _perturbation(name: str, cfg: NoiseConfig | AttackConfig | None, model: Classifier):
    def perturb(x: np.ndarray, y: np.ndarray, indices: np.ndarray) -> np.ndarray:
        if cfg is None:
            return x
        if isinstance(cfg, NoiseConfig):
            return noise(x, cfg, indices=indices)
        return run_attack(model, x, y, cfg, indices=indices)

    return name, perturb


def add_means(metrics: dict[str, float]) -> dict[str, float]:
    """Mean over noise families and, per attack kind, mean over radii."""
    out = dict(metrics)
    noisy = [v for k, v in metrics.items() if k.startswith("noise/")]
    if noisy:
        out[NOISE_MEAN] = float(np.mean(noisy))
    groups: dict[str, list[float]] = {}
    for key, value in metrics.items():
        if key.startswith("attack/"):
            groups.setdefault(key.rsplit("/", 1)[0], []).append(value)
    for prefix, values in groups.items():
        out[f"{prefix}/mean"] = float(np.mean(values))
    return out


def evaluate(
    model: Classifier,
    data: Dataset,
    noise_cfgs: Sequence[NoiseConfig] = (),
    attack_cfgs: Sequence[AttackConfig] = (),
    *,
    chunk_size: int = 64,
    threads: int = 1,
) -> Evaluation:
    """Accuracy (percent) on clean inputs, under each noise config and under each attack config.

    Work fans out over (perturbation, chunk) pairs; per-sample randomness is
    keyed by dataset index, so the result does not depend on ``threads`` or
    ``chunk_size``.
    """
    perturbations = [_perturbation(CLEAN, None, model)]
    perturbations += [_perturbation(cfg.label, cfg, model) for cfg in noise_cfgs]
    perturbations += [_perturbation(cfg.label, cfg, model) for cfg in attack_cfgs]
    parts = chunks(len(data), chunk_size)

    def work(item: tuple[int, np.ndarray]) -> np.ndarray:
        p, rows = item
        _, perturb = perturbations[p]
        x, y = data.inputs[rows], data.labels[rows]
        return model.predict(perturb(x, y, data.indices[rows]))

    items = [(p, rows) for p in range(len(perturbations)) for rows in parts]
    results = fan_out(work, items, threads)

    predictions: dict[str, np.ndarray] = {}
    metrics: dict[str, float] = {}
    for p, (name, _) in enumerate(perturbations):
        pieces = results[p * len(parts) : (p + 1) * len(parts)]
        predictions[name] = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
        metrics[name] = accuracy(predictions[name], data.labels)
        logger.debug("%s: %.2f%%", name, metrics[name])
    return Evaluation(add_means(metrics), predictions, data.labels, data.indices)


# metric tables

TABLE_HEADER = ["metric", "mean", "sd", "n_runs", "n_failed"]


@dataclass(frozen=True)
class MetricSummary:
    metric: str
    mean: float | None
    #: absent when fewer than two runs contribute
    sd: float | None
    n_runs: int
    n_failed: int

    def to_row(self) -> list:
        return [self.metric, _cell(self.mean), _cell(self.sd), self.n_runs, self.n_failed]


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def single_run_table(metrics: dict[str, float]) -> list[MetricSummary]:
    return [MetricSummary(name, value, None, 1, 0) for name, value in metrics.items()]


def write_metrics_table(path: Path, rows: Iterable[MetricSummary]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_HEADER)
        writer.writerows(row.to_row() for row in rows)
    logger.info("wrote %s", path)


def write_grouped_table(path: Path, group_column: str, tables: dict[str, list[MetricSummary]]) -> None:
    """One metrics table per group, stacked, with the group label as the leading column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([group_column, *TABLE_HEADER])
        for group, rows in tables.items():
            writer.writerows([group, *row.to_row()] for row in rows)
    logger.info("wrote %s", path)
