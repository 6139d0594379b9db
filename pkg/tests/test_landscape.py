import json

import numpy as np
import pytest

from src.errors import DomainError, ZeroGradientError
from src.landscape import STEP, checksum, directions, landscape_scan, read_grid_csv, scan_grid


class FlatModel:
    num_classes = 2

    def predict_proba(self, x):
        return np.full((len(x), 2), 0.5)

    def predict(self, x):
        return np.zeros(len(x), dtype=np.int64)

    def per_sample_loss(self, x, y):
        return np.full(len(x), np.log(2.0))

    def input_gradient(self, x, y):
        return float(np.log(2.0)), np.zeros_like(x)


@pytest.fixture(scope="module")
def grid(trained):
    run, test = trained
    return landscape_scan(run.network, test.inputs[0], test.labels[0], G=4, seed=3)


def test_grid_shape_and_center(grid, trained):
    run, test = trained
    assert grid.loss.shape == grid.pred.shape == (9, 9)
    expected = run.network.per_sample_loss(test.inputs[:1], test.labels[:1])[0]
    assert abs(grid.center_loss - expected) < 1e-10
    assert grid.pred[4, 4] == run.network.predict(test.inputs[:1])[0]


def test_directions_are_orthogonal_unit_sup_norm(grid):
    assert abs(np.vdot(grid.d1, grid.d2)) < 1e-9
    assert np.max(np.abs(grid.d1)) == 1.0
    assert np.max(np.abs(grid.d2)) == pytest.approx(1.0, abs=1e-15)


def test_directions_are_seeded(trained):
    run, test = trained
    x, y = test.inputs[1], int(test.labels[1])
    a = directions(run.network, x, y, seed=5)
    b = directions(run.network, x, y, seed=5)
    c = directions(run.network, x, y, seed=6)
    assert np.array_equal(a[1], b[1])
    assert not np.array_equal(a[1], c[1])


def test_negated_directions_rotate_the_grid(grid, trained):
    run, _ = trained
    loss, pred = scan_grid(run.network, grid.center, grid.label, -grid.d1, -grid.d2, grid.G, grid.step)
    assert np.allclose(loss, grid.loss[::-1, ::-1], rtol=0, atol=1e-12)
    assert np.array_equal(pred, grid.pred[::-1, ::-1])


def test_scan_is_independent_of_threads(grid, trained):
    run, _ = trained
    serial = scan_grid(run.network, grid.center, grid.label, grid.d1, grid.d2, grid.G, grid.step, threads=1)
    fanned = scan_grid(run.network, grid.center, grid.label, grid.d1, grid.d2, grid.G, grid.step, threads=3)
    assert np.array_equal(serial[0], fanned[0])
    assert np.array_equal(serial[1], fanned[1])


def test_attack_axis_matches_a_plain_line_sweep(grid, trained):
    run, _ = trained
    x, y, G = grid.center, grid.label, grid.G
    _, grad = run.network.input_gradient(x[None], np.array([y]))
    d1 = np.sign(grad[0])
    points = np.stack([np.clip(x + (i * grid.step) * d1, 0.0, 1.0) for i in range(-G, G + 1)])
    losses = run.network.per_sample_loss(points, np.full(len(points), y))
    assert np.array_equal(d1, grid.d1)
    assert np.allclose(grid.loss[:, G], losses, rtol=0, atol=1e-12)


def test_written_grid_reads_back_exactly(grid, tmp_path):
    grid.write(tmp_path)
    assert np.array_equal(read_grid_csv(tmp_path / "loss.csv"), grid.loss)
    assert np.array_equal(read_grid_csv(tmp_path / "pred.csv", dtype=np.int64), grid.pred)
    sidecar = json.loads((tmp_path / "landscape.json").read_text())
    assert sidecar["d1_sha256"] == checksum(grid.d1)
    assert sidecar["d2_sha256"] == checksum(grid.d2)
    assert (sidecar["G"], sidecar["step"], sidecar["seed"]) == (4, STEP, 3)


def test_zero_gradient_is_rejected():
    with pytest.raises(ZeroGradientError):
        landscape_scan(FlatModel(), np.full(3, 0.5), 0, G=2)


class SlopedModel(FlatModel):
    def input_gradient(self, x, y):
        return float(np.log(2.0)), np.ones_like(x)


def test_single_feature_input_has_no_orthogonal_direction():
    with pytest.raises(DomainError, match="orthogonal"):
        directions(SlopedModel(), np.array([0.5]), 0, seed=0)


def test_scan_argument_checks(trained):
    run, test = trained
    with pytest.raises(DomainError):
        landscape_scan(run.network, test.inputs[0] + 2.0, 0, G=2)
    with pytest.raises(DomainError):
        scan_grid(FlatModel(), np.full(3, 0.5), 0, np.ones(3), np.ones(3), G=0)


def test_grid_points_are_clamped():
    seen = []

    class Recorder(FlatModel):
        def per_sample_loss(self, x, y):
            seen.append(x.copy())
            return super().per_sample_loss(x, y)

    scan_grid(Recorder(), np.array([0.0, 1.0]), 0, np.array([1.0, 1.0]), np.array([-1.0, 1.0]), G=3, step=0.5)
    points = np.concatenate(seen)
    assert points.min() == 0.0 and points.max() == 1.0
