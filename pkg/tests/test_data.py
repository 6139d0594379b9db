import gzip
import struct

import numpy as np
import pytest

from src.config import DatasetConfig
from src.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    Dataset,
    load_dataset,
    load_idx,
    load_splits,
    read_idx_images,
    read_idx_labels,
    synth_bounds,
    synth_dataset,
)
from src.errors import ArtifactError, DomainError, FormatError


def _idx_images(pixels: list[int], count: int, rows: int, cols: int, magic: int = IDX_IMAGES_MAGIC) -> bytes:
    return struct.pack(">4I", magic, count, rows, cols) + bytes(pixels)


def _idx_labels(labels: list[int], magic: int = IDX_LABELS_MAGIC) -> bytes:
    return struct.pack(">2I", magic, len(labels)) + bytes(labels)


@pytest.fixture
def idx_files(tmp_path):
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    images.write_bytes(_idx_images([0, 128, 255, 0, 255, 255, 128, 0], 2, 2, 2))
    labels.write_bytes(_idx_labels([3, 1]))
    return images, labels


def test_idx_images_are_scaled_bytes(idx_files):
    images, _ = idx_files
    x = read_idx_images(images)
    assert x.shape == (2, 1, 2, 2)
    assert x[0, 0].tolist() == [[0.0, 128 / 255], [1.0, 0.0]]
    assert set(np.unique(x)) == {0.0, 128 / 255, 1.0}


def test_idx_labels(idx_files):
    _, labels = idx_files
    assert read_idx_labels(labels).tolist() == [3, 1]


def test_load_idx(idx_files):
    dataset = load_idx(*idx_files)
    assert len(dataset) == 2
    assert dataset.num_classes == 4
    assert dataset.feature_shape == (1, 2, 2)
    assert dataset.indices.tolist() == [0, 1]


def test_gzipped_idx(tmp_path, idx_files):
    images, labels = idx_files
    packed = tmp_path / "images.idx.gz"
    packed.write_bytes(gzip.compress(images.read_bytes()))
    assert np.array_equal(read_idx_images(packed), read_idx_images(images))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(_idx_images([0] * 4, 1, 2, 2, magic=0x802))
    with pytest.raises(FormatError, match="bad magic 0x00000802"):
        read_idx_images(path)


def test_empty_and_truncated_files(tmp_path):
    empty = tmp_path / "empty.idx"
    empty.write_bytes(b"")
    with pytest.raises(FormatError):
        read_idx_images(empty)
    short = tmp_path / "short.idx"
    short.write_bytes(_idx_images([0] * 3, 1, 2, 2))
    with pytest.raises(FormatError):
        read_idx_images(short)
    header = tmp_path / "header.idx"
    header.write_bytes(struct.pack(">2I", IDX_IMAGES_MAGIC, 1))
    with pytest.raises(FormatError):
        read_idx_images(header)


def test_missing_idx_file(tmp_path):
    with pytest.raises(ArtifactError):
        read_idx_labels(tmp_path / "missing.idx")


def test_count_mismatch(tmp_path, idx_files):
    images, _ = idx_files
    labels = tmp_path / "three.idx"
    labels.write_bytes(_idx_labels([0, 1, 2]))
    with pytest.raises(FormatError):
        load_idx(images, labels)


def test_idx_limit(idx_files):
    assert len(load_idx(*idx_files, limit=1)) == 1


def test_noiseless_moons_lie_on_the_curves():
    dataset = synth_dataset("moons", 40, 0.0, seed=0)
    lo, hi = synth_bounds("moons", 0.0)
    points = dataset.inputs * (hi - lo) + lo
    upper = points[dataset.labels == 0]
    lower = points[dataset.labels == 1]
    assert np.allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-12)
    assert np.allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["moons", "spirals"])
def test_synthetic_determinism_and_range(kind):
    a = synth_dataset(kind, 50, 0.1, seed=3)
    b = synth_dataset(kind, 50, 0.1, seed=3)
    assert np.array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, synth_dataset(kind, 50, 0.1, seed=4).inputs)
    assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0


def test_class_balance():
    dataset = synth_dataset("spirals", 51, 0.05, seed=0)
    assert np.bincount(dataset.labels).tolist() == [25, 26]


def test_synthetic_argument_checks():
    with pytest.raises(DomainError):
        synth_dataset("moons", 3, 0.1, seed=0)
    with pytest.raises(DomainError):
        synth_dataset("moons", 10, -0.1, seed=0)
    with pytest.raises(DomainError):
        synth_dataset("circles", 10, 0.1, seed=0)


def test_split_partitions_the_indices(moons):
    train, test = moons.split(0.25, seed=1)
    assert len(test) == 24
    assert sorted(np.concatenate([train.indices, test.indices]).tolist()) == list(range(len(moons)))
    assert np.array_equal(test.inputs, moons.inputs[test.indices])


def test_split_checks(moons):
    with pytest.raises(DomainError):
        moons.split(1.0, seed=0)


def test_splits_ignore_the_run_seed():
    cfg = DatasetConfig(source="moons", n=40, seed=2)
    a, b = load_splits(cfg, 0.25), load_splits(cfg, 0.25)
    assert np.array_equal(a[1].indices, b[1].indices)
    other = load_splits(cfg.model_copy(update={"seed": 3}), 0.25)
    assert not np.array_equal(a[1].inputs, other[1].inputs)


def test_load_dataset_limit():
    assert len(load_dataset(DatasetConfig(source="spirals", n=100, limit=30))) == 30


def test_dataset_checks_lengths():
    with pytest.raises(DomainError):
        Dataset(np.zeros((3, 2)), np.zeros(2), 2)


def test_head_and_subset(moons):
    head = moons.head(5)
    assert len(head) == 5
    assert moons.head(None) is moons
    assert moons.subset([3, 1]).indices.tolist() == [3, 1]
