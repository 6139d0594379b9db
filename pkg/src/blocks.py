"""The block family between residual and non-residual layers.

Every block applies the same pre-activation transform

    f(x) = map2(relu(bn2(map1(relu(bn1(x))))))

and differs only in how the shortcut is weighted:

    Residual      x + f(x)
    NonResidual   f(x)
    In-type       (1 - a) x + f(x)
    LambdaIn      (1 - a) x + (1 + a) f(x)

where ``a`` is relu or sigmoid of a learned scalar, or of a per-sample gate
``d(x) = pool(x) @ W_d + b_d``. The step size is absorbed into ``a``.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Mode, RunningStats, Tensor

logger = logging.getLogger(__name__)


class BlockKind(Enum):
    RESIDUAL = "residual"
    NON_RESIDUAL = "non_residual"
    IN = "in"
    LAMBDA_IN = "lambda_in"
    IN_SIG = "in_sig"
    IN_GATING = "in_gating"
    IN_GATING_SIG = "in_gating_sig"

    @property
    def tag(self) -> int:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "BlockKind":
        for kind, value in _TAGS.items():
            if value == tag:
                return kind
        raise DomainError(f"unknown block kind tag {tag}")

    @property
    def owns_lambda(self) -> bool:
        return self in (BlockKind.IN, BlockKind.LAMBDA_IN, BlockKind.IN_SIG)

    @property
    def gated(self) -> bool:
        return self in (BlockKind.IN_GATING, BlockKind.IN_GATING_SIG)

    @property
    def uses_sigmoid(self) -> bool:
        return self in (BlockKind.IN_SIG, BlockKind.IN_GATING_SIG)


_TAGS = {kind: i for i, kind in enumerate(BlockKind)}


class MapKind(Enum):
    DENSE = "dense"
    CONV = "conv"


@dataclass(frozen=True)
class InitScheme:
    """Uniform interval the learned coefficients (or gate biases) start in."""

    low: float
    high: float

    def __post_init__(self):
        if not (np.isfinite(self.low) and np.isfinite(self.high)):
            raise DomainError(f"init interval must be finite, got [{self.low}, {self.high}]")
        if self.low > self.high:
            raise DomainError(f"empty init interval U[{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def __str__(self) -> str:
        return f"U[{self.low:.2f}, {self.high:.2f}]"


TRANSFORM_ARRAYS = ("bn1.gamma", "bn1.beta", "map1.weight", "bn2.gamma", "bn2.beta", "map2.weight")
DENSE_BIASES = ("map1.bias", "map2.bias")
GATE_ARRAYS = ("gate.weight", "gate.bias")


@dataclass
class BlockParams:
    """Weights of one block. Array names are stable; they key serialization and binding."""

    kind: BlockKind
    map: MapKind
    arrays: dict[str, np.ndarray]
    stats: tuple[RunningStats, RunningStats] = field(default=None)

    def __post_init__(self):
        channels = self.arrays["bn1.gamma"].shape[0]
        if self.stats is None:
            self.stats = (RunningStats.fresh(channels), RunningStats.fresh(channels))
        required = set(TRANSFORM_ARRAYS)
        if self.map is MapKind.DENSE:
            required |= set(DENSE_BIASES)
        if self.kind.owns_lambda:
            required.add("lambda")
        if self.kind.gated:
            required |= set(GATE_ARRAYS)
        names = set(self.arrays)
        if names != required:
            missing, extra = sorted(required - names), sorted(names - required)
            raise DomainError(f"{self.kind.value} block arrays: missing {missing}, unexpected {extra}")

    @property
    def channels(self) -> int:
        return self.arrays["bn1.gamma"].shape[0]

    @property
    def lambda_raw(self) -> float | None:
        value = self.arrays.get("lambda")
        return None if value is None else float(value)

    def trainable(self) -> dict[str, np.ndarray]:
        return dict(self.arrays)

    @classmethod
    def init(
        cls,
        kind: BlockKind,
        map: MapKind,
        channels: int,
        scheme: InitScheme,
        rng: np.random.Generator,
    ) -> "BlockParams":
        arrays: dict[str, np.ndarray] = {
            "bn1.gamma": np.ones(channels),
            "bn1.beta": np.zeros(channels),
            "bn2.gamma": np.ones(channels),
            "bn2.beta": np.zeros(channels),
        }
        for stage in ("map1", "map2"):
            if map is MapKind.DENSE:
                arrays[f"{stage}.weight"] = rng.normal(0.0, np.sqrt(2.0 / channels), (channels, channels))
                arrays[f"{stage}.bias"] = np.zeros(channels)
            else:
                fan_in = channels * 9
                arrays[f"{stage}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (channels, channels, 3, 3))
        if kind.owns_lambda:
            arrays["lambda"] = np.asarray(scheme.sample(rng))
        if kind.gated:
            arrays["gate.weight"] = rng.normal(0.0, 0.01, (channels, 1))
            arrays["gate.bias"] = np.array([scheme.sample(rng)])
        return cls(kind, map, arrays)


def _apply_map(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    if x.ndim == 4:
        return T.conv2d(x, weight, stride=1, pad=1)
    return T.bias_add(T.matmul(x, weight), bias)


def transform(params: BlockParams, x: Tensor, mode: Mode, w: Mapping[str, Tensor]) -> Tensor:
    s1, s2 = params.stats
    h = T.relu(T.batch_norm(x, w["bn1.gamma"], w["bn1.beta"], s1, mode))
    h = _apply_map(h, w["map1.weight"], w.get("map1.bias"))
    h = T.relu(T.batch_norm(h, w["bn2.gamma"], w["bn2.beta"], s2, mode))
    return _apply_map(h, w["map2.weight"], w.get("map2.bias"))


def gate_pool(x: Tensor) -> Tensor:
    return T.spatial_mean(x) if x.ndim == 4 else x


def coefficient(kind: BlockKind, x: Tensor, w: Mapping[str, Tensor]) -> Tensor | None:
    """The shortcut coefficient ``a``: a scalar, a per-sample vector, or None for the fixed kinds."""
    if kind.owns_lambda:
        raw = w["lambda"]
    elif kind.gated:
        d = T.bias_add(T.matmul(gate_pool(x), w["gate.weight"]), w["gate.bias"])
        raw = T.reshape(d, (x.shape[0],))
    else:
        return None
    return T.sigmoid(raw) if kind.uses_sigmoid else T.relu(raw)


def _scale(a: Tensor, x: Tensor) -> Tensor:
    return T.rowscale(x, a) if a.ndim == 1 else T.mul(a, x)


def block_forward_with_coefficient(
    kind: BlockKind,
    params: BlockParams,
    x: Tensor,
    mode: Mode,
    bound: Mapping[str, Tensor] | None = None,
) -> tuple[Tensor, Tensor | None]:
    if kind is not params.kind:
        raise DomainError(f"block holds {params.kind.value} parameters, asked to run as {kind.value}")
    x = T.as_tensor(x)
    w = bound if bound is not None else {name: Tensor(arr) for name, arr in params.arrays.items()}

    f = transform(params, x, mode, w)
    if f.shape != x.shape:
        raise ShapeError.mismatch(f"{kind.value} block", x.shape, f.shape)

    a = coefficient(kind, x, w)
    match kind:
        case BlockKind.RESIDUAL:
            out = T.add(x, f)
        case BlockKind.NON_RESIDUAL:
            out = f
        case BlockKind.LAMBDA_IN:
            out = T.add(_scale(T.sub(1.0, a), x), _scale(T.add(1.0, a), f))
        case _:
            out = T.add(_scale(T.sub(1.0, a), x), f)
    return out, a


def block_forward(
    kind: BlockKind,
    params: BlockParams,
    x: Tensor,
    mode: Mode,
    bound: Mapping[str, Tensor] | None = None,
) -> Tensor:
    return block_forward_with_coefficient(kind, params, x, mode, bound)[0]


def effective_coefficient(kind: BlockKind, a: Tensor | None) -> float:
    """Batch-mean coefficient as reported; 0 for Residual and 1 for NonResidual."""
    if a is None:
        return 1.0 if kind is BlockKind.NON_RESIDUAL else 0.0
    return float(np.mean(a.data))
