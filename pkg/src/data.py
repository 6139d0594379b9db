"""Datasets: IDX image/label files and seeded synthetic 2-d point clouds."""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetConfig
from .errors import ArtifactError, DomainError, FormatError
from .seeding import generator

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTH_KINDS = ("moons", "spirals")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    #: position of each sample in the dataset it was cut from; keys per-sample noise
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise DomainError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.inputs[rows], self.labels[rows], self.num_classes, self.indices[rows])

    def head(self, n: int | None) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))

    def split(self, test_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle, then the first ``1 - test_fraction`` share trains."""
        if not 0.0 < test_fraction < 1.0:
            raise DomainError(f"test_fraction must lie in (0, 1), got {test_fraction}")
        order = generator(seed, "split").permutation(len(self))
        n_test = max(1, round(len(self) * test_fraction))
        if n_test >= len(self):
            raise DomainError(f"cannot split {len(self)} samples with test_fraction {test_fraction}")
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


# IDX files


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if not data:
        raise FormatError(f"{path}: empty file")
    return data


def _header(data: bytes, path: Path, magic: int, dims: int) -> tuple[int, ...]:
    size = 4 * (1 + dims)
    if len(data) < size:
        raise FormatError(f"{path}: truncated header")
    found, *shape = struct.unpack(f">{1 + dims}I", data[:size])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(shape)


def read_idx_images(path: Path) -> np.ndarray:
    """N×1×rows×cols array of bytes scaled to [0, 1]."""
    data = _read_bytes(path)
    count, rows, cols = _header(data, path, IDX_IMAGES_MAGIC, 3)
    expected = count * rows * cols
    payload = np.frombuffer(data, dtype=np.uint8, offset=16)
    if payload.size < expected:
        raise FormatError(f"{path}: truncated payload ({payload.size} of {expected} bytes)")
    return payload[:expected].reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path: Path) -> np.ndarray:
    data = _read_bytes(path)
    (count,) = _header(data, path, IDX_LABELS_MAGIC, 1)
    payload = np.frombuffer(data, dtype=np.uint8, offset=8)
    if payload.size < count:
        raise FormatError(f"{path}: truncated payload ({payload.size} of {count} bytes)")
    return payload[:count].astype(np.int64)


def load_idx(images_path: Path, labels_path: Path, limit: int | None = None) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if not len(labels):
        raise FormatError(f"{images_path}: no samples")
    dataset = Dataset(images, labels, max(2, int(labels.max()) + 1)).head(limit)
    logger.info("loaded %d IDX samples of shape %s", len(dataset), dataset.feature_shape)
    return dataset


# synthetic clouds

_RAW_BOUNDS = {
    "moons": (np.array([-1.0, -0.5]), np.array([2.0, 1.0])),
    "spirals": (np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
}


def synth_bounds(kind: str, noise_sd: float) -> tuple[np.ndarray, np.ndarray]:
    """Box mapped onto [0, 1]²: the noiseless curve extent widened by 3 SD."""
    lo, hi = _RAW_BOUNDS[kind]
    return lo - 3.0 * noise_sd, hi + 3.0 * noise_sd


def _curves(kind: str, n0: int, n1: int) -> tuple[np.ndarray, np.ndarray]:
    match kind:
        case "moons":
            a = np.linspace(0.0, np.pi, n0)
            b = np.linspace(0.0, np.pi, n1)
            return np.stack([np.cos(a), np.sin(a)], axis=1), np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
        case "spirals":
            a = np.linspace(0.25, 1.0, n0)
            b = np.linspace(0.25, 1.0, n1)
            arm0 = a[:, None] * np.stack([np.cos(3 * np.pi * a), np.sin(3 * np.pi * a)], axis=1)
            arm1 = b[:, None] * np.stack([np.cos(3 * np.pi * b + np.pi), np.sin(3 * np.pi * b + np.pi)], axis=1)
            return arm0, arm1
    raise DomainError(f"unknown synthetic dataset {kind!r}; expected one of {SYNTH_KINDS}")


def synth_dataset(kind: str, n: int, noise_sd: float, seed: int) -> Dataset:
    """Two-class curves with Gaussian jitter; class 0 gets ⌊n/2⌋ points."""
    if n < 4:
        raise DomainError(f"synthetic datasets need n >= 4, got {n}")
    if noise_sd < 0:
        raise DomainError(f"noise_sd must be >= 0, got {noise_sd}")
    n0 = n // 2
    c0, c1 = _curves(kind, n0, n - n0)
    points = np.concatenate([c0, c1])
    if noise_sd > 0:
        points = points + noise_sd * generator(seed, f"synth/{kind}").standard_normal(points.shape)
    lo, hi = synth_bounds(kind, noise_sd)
    inputs = np.clip((points - lo) / (hi - lo), 0.0, 1.0)
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)])
    return Dataset(inputs, labels, 2)


def load_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.source == "idx":
        return load_idx(cfg.images, cfg.labels, cfg.limit)
    n = min(cfg.n, cfg.limit) if cfg.limit else cfg.n
    return synth_dataset(cfg.source, n, cfg.noise_sd, cfg.seed)


def load_splits(cfg: DatasetConfig, test_fraction: float) -> tuple[Dataset, Dataset]:
    """Train and test splits; both depend on the dataset config only, never on the run seed."""
    return load_dataset(cfg).split(test_fraction, cfg.seed)
