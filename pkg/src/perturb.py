"""Input perturbations: signed-gradient attacks and stochastic noise families.

Inputs live in [0, 1]. Every attack output stays inside the L∞ ball of radius
ε around the clean input and inside [0, 1]; the ball clip is applied before
the range clamp.
"""

import logging
from collections.abc import Callable
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DomainError, NonFiniteError
from .network import Classifier
from .seeding import sample_generator

logger = logging.getLogger(__name__)

StepCallback = Callable[[int, float], None]


class AttackKind(Enum):
    FGSM = "fgsm"
    IFGSM = "ifgsm"
    PGD = "pgd"


class NoiseKind(Enum):
    GAUSSIAN = "gaussian"
    SHOT = "shot"
    IMPULSE = "impulse"
    SPECKLE = "speckle"


DEFAULT_SEVERITY = {
    NoiseKind.GAUSSIAN: 0.08,
    NoiseKind.SPECKLE: 0.15,
    NoiseKind.SHOT: 60.0,
    NoiseKind.IMPULSE: 0.03,
}

DEFAULT_ALPHA = 2.0 / 255.0


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttackKind
    epsilon: float = Field(ge=0.0, le=1.0)
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0.0)
    iters: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _alpha_within_reach(self):
        if self.kind is not AttackKind.FGSM and self.epsilon > 0 and self.alpha > 2.0 * self.epsilon:
            raise ValueError(f"alpha={self.alpha} exceeds twice epsilon={self.epsilon}")
        return self

    @property
    def label(self) -> str:
        return f"attack/{self.kind.value}/{self.epsilon:.6g}"


class NoiseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: NoiseKind
    severity: float | None = Field(default=None, ge=0.0)
    seed: int | None = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_severity(self):
        severity = self.level
        if self.kind is NoiseKind.IMPULSE and severity > 0.5:
            raise ValueError(f"impulse probability must be <= 0.5, got {severity}")
        if self.kind is NoiseKind.SHOT and severity <= 0:
            raise ValueError("shot noise photon scale must be > 0")
        return self

    @property
    def level(self) -> float:
        return DEFAULT_SEVERITY[self.kind] if self.severity is None else self.severity

    @property
    def label(self) -> str:
        return f"noise/{self.kind.value}"


# attacks


def _signed_gradient(model: Classifier, x: np.ndarray, y: np.ndarray, iteration: int) -> tuple[float, np.ndarray]:
    loss, grad = model.input_gradient(x, y)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite input gradient at attack iteration {iteration}", step=iteration)
    return loss, np.sign(grad)


def _project(candidate: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(candidate, x - epsilon, x + epsilon), 0.0, 1.0)


def _check_range(x: np.ndarray, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DomainError(f"inputs must lie in [0, 1], got range [{x.min()}, {x.max()}]")
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    return x


def _iterate(
    model: Classifier,
    x: np.ndarray,
    start: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    alpha: float,
    iters: int,
    on_step: StepCallback | None,
) -> np.ndarray:
    if iters < 1:
        raise DomainError(f"iters must be >= 1, got {iters}")
    current = start
    for m in range(iters):
        loss, direction = _signed_gradient(model, current, y, m)
        if on_step is not None:
            on_step(m, loss)
        current = _project(current + alpha * direction, x, epsilon)
    return current


def fgsm(model: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    x = _check_range(x, epsilon)
    _, direction = _signed_gradient(model, x, y, 0)
    return _project(x + epsilon * direction, x, epsilon)


def ifgsm(
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    alpha: float,
    iters: int,
    on_step: StepCallback | None = None,
) -> np.ndarray:
    x = _check_range(x, epsilon)
    return _iterate(model, x, x, y, epsilon, alpha, iters, on_step)


def pgd(
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    alpha: float,
    iters: int,
    seed: int,
    *,
    indices: np.ndarray | None = None,
    random_start: bool = True,
    on_step: StepCallback | None = None,
) -> np.ndarray:
    """IFGSM from a uniformly random point of the ε-ball.

    The start offset of sample i is drawn from a generator keyed by
    (seed, indices[i]), so it does not depend on how samples are batched.
    """
    x = _check_range(x, epsilon)
    start = x
    if random_start and len(x):
        indices = np.arange(len(x)) if indices is None else np.asarray(indices)
        delta = np.stack(
            [sample_generator(seed, int(i)).uniform(-epsilon, epsilon, size=x.shape[1:]) for i in indices]
        )
        start = np.clip(x + delta, 0.0, 1.0)
    return _iterate(model, x, start, y, epsilon, alpha, iters, on_step)


def run_attack(
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    *,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    match cfg.kind:
        case AttackKind.FGSM:
            return fgsm(model, x, y, cfg.epsilon)
        case AttackKind.IFGSM:
            return ifgsm(model, x, y, cfg.epsilon, cfg.alpha, cfg.iters)
        case AttackKind.PGD:
            return pgd(model, x, y, cfg.epsilon, cfg.alpha, cfg.iters, cfg.seed, indices=indices)


# noise


def _corrupt(sample: np.ndarray, kind: NoiseKind, severity: float, rng: np.random.Generator) -> np.ndarray:
    match kind:
        case NoiseKind.GAUSSIAN:
            out = sample + severity * rng.standard_normal(sample.shape)
        case NoiseKind.SPECKLE:
            out = sample + sample * severity * rng.standard_normal(sample.shape)
        case NoiseKind.SHOT:
            out = rng.poisson(sample * severity) / severity
        case NoiseKind.IMPULSE:
            flip = rng.random(sample.shape) < severity
            salt = rng.integers(0, 2, size=sample.shape).astype(np.float64)
            out = np.where(flip, salt, sample)
    return np.clip(out, 0.0, 1.0)


def apply_noise(
    x: np.ndarray,
    kind: NoiseKind,
    severity: float,
    seed: int,
    *,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Corrupt each sample with a generator keyed by (seed, sample index)."""
    x = np.asarray(x, dtype=np.float64)
    if severity < 0:
        raise DomainError(f"noise severity must be >= 0, got {severity}")
    if kind is NoiseKind.IMPULSE and severity > 0.5:
        raise DomainError(f"impulse probability must be <= 0.5, got {severity}")
    if kind is NoiseKind.SHOT and severity == 0:
        raise DomainError("shot noise photon scale must be > 0")
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    if len(indices) != len(x):
        raise DomainError(f"{len(indices)} sample indices for {len(x)} samples")
    if not len(x):
        return x.copy()
    return np.stack(
        [_corrupt(sample, kind, severity, sample_generator(seed, int(i))) for sample, i in zip(x, indices, strict=True)]
    )


def noise(x: np.ndarray, cfg: NoiseConfig, *, indices: np.ndarray | None = None) -> np.ndarray:
    return apply_noise(x, cfg.kind, cfg.level, cfg.seed or 0, indices=indices)
