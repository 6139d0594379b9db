import csv

import numpy as np
import pytest

from src import tensor as T
from src.blocks import BlockKind
from src.config import EvalConfig
from src.data import Dataset
from src.ensemble import Ensemble, ensemble_eval
from src.errors import DomainError, IncompatibleModelsError
from src.evaluate import CLEAN
from src.perturb import AttackConfig, AttackKind

from .helpers import rel_err


class TableModel:
    """Fixed per-sample class probabilities; the first input feature is the sample id."""

    def __init__(self, probabilities):
        self.table = np.log(np.asarray(probabilities, dtype=np.float64))
        self.num_classes = self.table.shape[1]

    def architecture(self):
        return ("table", self.num_classes)

    def logits(self, x):
        return self.table[np.asarray(x)[:, 0].astype(int)]

    def predict_proba(self, x):
        return T.softmax_array(self.logits(x))

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    def per_sample_loss(self, x, y):
        return T.per_sample_cross_entropy(self.logits(x), y)

    def input_gradient(self, x, y):
        return float(np.mean(self.per_sample_loss(x, y))), np.zeros_like(x, dtype=np.float64)


def _ids(n):
    return np.arange(n, dtype=np.float64)[:, None]


def test_two_member_hand_check():
    ens = Ensemble([TableModel([[0.9, 0.1]]), TableModel([[0.2, 0.8]])])
    x = np.zeros((1, 1))
    assert np.allclose(ens.predict_proba(x), [[0.55, 0.45]], atol=1e-15)
    assert ens.predict(x).tolist() == [0]
    assert ens.per_sample_loss(x, np.array([1]))[0] == pytest.approx(-np.log(0.45), abs=1e-14)


def test_disjoint_errors_are_voted_away(tmp_path):
    # member k is wrong only on sample k
    members = []
    for k in range(3):
        table = np.tile([0.1, 0.9], (3, 1))
        table[k] = [0.6, 0.4]
        members.append(TableModel(table))
    data = Dataset(_ids(3), np.ones(3, dtype=np.int64), 2)
    result = ensemble_eval(members, data)
    assert result.metrics[CLEAN] == 100.0
    assert all(m[CLEAN] == pytest.approx(200 / 3) for m in result.member_metrics)

    path = tmp_path / "ensemble.csv"
    result.write_csv(path)
    with open(path, newline="") as fh:
        (row,) = [r for r in csv.DictReader(fh) if r["metric"] == CLEAN]
    assert abs(float(row["ensemble"]) - float(row["single_mean"]) - float(row["improvement"])) < 1e-12
    assert float(row["improvement"]) == pytest.approx(100 / 3)


def test_member_csv(tmp_path):
    members = [TableModel([[0.7, 0.3]]), TableModel([[0.4, 0.6]])]
    result = ensemble_eval(members, Dataset(np.zeros((1, 1)), np.zeros(1, dtype=np.int64), 2))
    path = tmp_path / "members.csv"
    result.write_members_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["member", "metric", "value"], ["0", CLEAN, "100.0"], ["1", CLEAN, "0.0"]]


def test_identical_members_reproduce_the_single_model(trained):
    run, test = trained
    eval_cfg = EvalConfig()
    attacks = [AttackConfig(kind=AttackKind.PGD, epsilon=0.05, alpha=0.01, iters=3, seed=2)]
    result = ensemble_eval([run.network, run.network.copy()], test.head(32), eval_cfg.noise_configs(0), attacks)
    for member in result.member_metrics:
        assert member == result.metrics
    assert all(v == 0.0 for v in result.improvement.values())


def test_ensemble_gradient_matches_finite_differences(make_network, moons):
    ens = Ensemble([make_network(seed=1), make_network(seed=2), make_network(seed=3)])
    x, y = moons.inputs[:4], moons.labels[:4]
    _, grad = ens.input_gradient(x, y)
    fd = T.numerical_gradient(lambda v: float(np.mean(ens.per_sample_loss(v, y))), x)
    assert rel_err(grad, fd) < 1e-5


def test_ensemble_preconditions(make_network):
    with pytest.raises(DomainError):
        Ensemble([make_network()])
    with pytest.raises(IncompatibleModelsError):
        Ensemble([make_network(depth=2), make_network(depth=3)])
    with pytest.raises(IncompatibleModelsError):
        Ensemble([make_network(kind=BlockKind.IN), make_network(kind=BlockKind.RESIDUAL)])
