"""Loss and prediction surfaces around one input, along the attack direction and a random orthogonal one."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ZeroGradientError
from .evaluate import fan_out
from .network import Classifier
from .seeding import generator

logger = logging.getLogger(__name__)

STEP = 1.0 / 255.0


def checksum(direction: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(direction, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class LandscapeGrid:
    """``loss[i + G, j + G]`` is the loss at x + i·step·d1 + j·step·d2 (clamped to [0, 1])."""

    center: np.ndarray = field(repr=False)
    label: int
    d1: np.ndarray = field(repr=False)
    d2: np.ndarray = field(repr=False)
    G: int
    step: float
    seed: int
    loss: np.ndarray = field(repr=False)
    pred: np.ndarray = field(repr=False)

    @property
    def center_loss(self) -> float:
        return float(self.loss[self.G, self.G])

    def sidecar(self) -> dict:
        return {
            "G": self.G,
            "step": self.step,
            "seed": self.seed,
            "label": self.label,
            "d1_sha256": checksum(self.d1),
            "d2_sha256": checksum(self.d2),
            "center_sha256": checksum(self.center),
        }

    def write(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "loss.csv", self.loss, fmt="%.17g", delimiter=",")
        np.savetxt(directory / "pred.csv", self.pred, fmt="%d", delimiter=",")
        (directory / "landscape.json").write_text(json.dumps(self.sidecar(), indent=2))
        logger.info("wrote landscape grid (G=%d) to %s", self.G, directory)


def read_grid_csv(path: Path, dtype=np.float64) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=dtype))


def directions(model: Classifier, x: np.ndarray, y: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Signed loss gradient and a seeded normal direction orthogonal to it, both of unit L∞ norm."""
    _, grad = model.input_gradient(x[None], np.array([y]))
    d1 = np.sign(grad[0])
    if not np.any(d1):
        raise ZeroGradientError("loss gradient is exactly zero at the scanned input; attack direction undefined")
    d2 = generator(seed, "landscape/d2").standard_normal(x.shape)
    d2 = d2 - (np.vdot(d2, d1) / np.vdot(d1, d1)) * d1
    scale = np.max(np.abs(d2))
    if x.size < 2 or scale == 0.0:
        raise DomainError(f"no direction orthogonal to the attack direction for an input of {x.size} feature(s)")
    return d1, d2 / scale


def scan_grid(
    model: Classifier,
    x: np.ndarray,
    y: int,
    d1: np.ndarray,
    d2: np.ndarray,
    G: int,
    step: float = STEP,
    *,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Loss and predicted class on the (2G+1)² grid; one work item per grid row."""
    if G < 1:
        raise DomainError(f"grid radius G must be >= 1, got {G}")
    offsets = np.arange(-G, G + 1)

    def row(i: int) -> tuple[np.ndarray, np.ndarray]:
        points = np.stack([np.clip(x + (i * step) * d1 + (j * step) * d2, 0.0, 1.0) for j in offsets])
        labels = np.full(len(offsets), y)
        return model.per_sample_loss(points, labels), model.predict(points)

    rows = fan_out(row, offsets.tolist(), threads)
    loss = np.stack([r[0] for r in rows])
    pred = np.stack([r[1] for r in rows]).astype(np.int64)
    return loss, pred


def landscape_scan(
    model: Classifier,
    x: np.ndarray,
    y: int,
    G: int,
    step: float = STEP,
    seed: int = 0,
    *,
    threads: int = 1,
) -> LandscapeGrid:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DomainError(f"scanned input must lie in [0, 1], got range [{x.min()}, {x.max()}]")
    d1, d2 = directions(model, x, int(y), seed)
    logger.debug("landscape directions: <d1, d2> = %.3g", float(np.vdot(d1, d2)))
    loss, pred = scan_grid(model, x, int(y), d1, d2, G, step, threads=threads)
    return LandscapeGrid(x, int(y), d1, d2, G, step, seed, loss, pred)
