"""Mean-softmax ensembles of independently trained runs."""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DomainError, IncompatibleModelsError
from .evaluate import Evaluation, evaluate, fan_out
from .network import Network
from .perturb import AttackConfig, NoiseConfig
from .tensor import log_softmax_array

logger = logging.getLogger(__name__)


class Ensemble:
    """Predicts with the mean of the members' softmax vectors.

    The attack loss is the cross-entropy of that mean; its input gradient is
    the members' own loss gradients weighted per sample by
    p_k(y) / sum_j p_j(y).
    """

    def __init__(self, members: Sequence[Network]):
        if len(members) < 2:
            raise DomainError(f"an ensemble needs at least 2 members, got {len(members)}")
        reference = members[0].architecture()
        for i, member in enumerate(members[1:], start=1):
            if member.architecture() != reference:
                raise IncompatibleModelsError(
                    f"member {i} has architecture {member.architecture()}, member 0 has {reference}"
                )
        self.members = list(members)
        self.num_classes = members[0].num_classes

    def __len__(self) -> int:
        return len(self.members)

    def _member_probabilities(self, x: np.ndarray) -> np.ndarray:
        return np.stack([m.predict_proba(x) for m in self.members])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        probs = self._member_probabilities(x)
        # shifted mean: identical members reproduce their own vectors exactly
        return probs[0] + np.mean(probs - probs[0], axis=0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def per_sample_loss(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.predict_proba(x)[np.arange(len(y)), y]
        return -np.log(p)

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        rows = np.arange(len(y))
        # p_k(y) from log-softmax keeps the weights finite when a member is very confident
        log_p = np.stack([log_softmax_array(m.logits(x))[rows, y] for m in self.members])
        weights = np.exp(log_p - log_p.max(axis=0))
        weights /= weights.sum(axis=0)

        grad = np.zeros_like(x, dtype=np.float64)
        for k, member in enumerate(self.members):
            _, g = member.input_gradient(x, y)
            grad += weights[k].reshape((-1,) + (1,) * (x.ndim - 1)) * g
        loss = float(np.mean(self.per_sample_loss(x, y)))
        return loss, grad


@dataclass
class EnsembleResult:
    metrics: dict[str, float]
    member_metrics: list[dict[str, float]]
    evaluation: Evaluation

    @property
    def single_mean(self) -> dict[str, float]:
        return {name: float(np.mean([m[name] for m in self.member_metrics])) for name in self.metrics}

    @property
    def improvement(self) -> dict[str, float]:
        """Ensemble accuracy minus the mean accuracy of its members, per metric."""
        mean = self.single_mean
        return {name: value - mean[name] for name, value in self.metrics.items()}

    def write_csv(self, path: Path) -> None:
        mean, gain = self.single_mean, self.improvement
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "ensemble", "single_mean", "improvement"])
            for name, value in self.metrics.items():
                writer.writerow([name, repr(value), repr(mean[name]), repr(gain[name])])
        logger.info("wrote %s", path)

    def write_members_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["member", "metric", "value"])
            for k, metrics in enumerate(self.member_metrics):
                writer.writerows([k, name, repr(value)] for name, value in metrics.items())
        logger.info("wrote %s", path)


def ensemble_eval(
    members: Sequence[Network],
    data: Dataset,
    noise_cfgs: Sequence[NoiseConfig] = (),
    attack_cfgs: Sequence[AttackConfig] = (),
    *,
    chunk_size: int = 64,
    threads: int = 1,
) -> EnsembleResult:
    """Evaluate the ensemble and each member under the same perturbations.

    Members are attacked with their own gradients, the ensemble with the
    gradient of the ensemble loss.
    """
    ensemble = Ensemble(members)

    def run(model) -> Evaluation:
        return evaluate(model, data, noise_cfgs, attack_cfgs, chunk_size=chunk_size)

    evaluations = fan_out(run, [ensemble, *ensemble.members], threads)
    result = EnsembleResult(evaluations[0].metrics, [e.metrics for e in evaluations[1:]], evaluations[0])
    logger.info(
        "ensemble of %d: clean %.2f%% (%+.2f over single-run mean)",
        len(ensemble),
        result.metrics["clean"],
        result.improvement["clean"],
    )
    return result
