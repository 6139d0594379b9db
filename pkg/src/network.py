"""Block stacks with a stem and a classifier head, their coefficients and parameter files."""

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Protocol, runtime_checkable

import numpy as np

from . import tensor as T
from .blocks import BlockKind, BlockParams, InitScheme, MapKind, block_forward_with_coefficient, effective_coefficient
from .errors import ArtifactError, DomainError, FormatError, ShapeError
from .seeding import generator
from .tensor import Graph, Mode, RunningStats, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DONET1"
HEAD_TAG = 0xFF
ACTIVE_THRESHOLD = 0.01


@runtime_checkable
class Classifier(Protocol):
    """What evaluation, attacks and scans need from a model."""

    num_classes: int

    def predict_proba(self, x: np.ndarray) -> np.ndarray: ...

    def predict(self, x: np.ndarray) -> np.ndarray: ...

    def per_sample_loss(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass
class Forward:
    logits: Tensor
    coefficients: list[Tensor | None]


@dataclass
class Network:
    kind: BlockKind
    map: MapKind
    in_features: int
    width: int
    num_classes: int
    blocks: list[BlockParams]
    head: dict[str, np.ndarray]
    head_stats: RunningStats = field(default=None)

    def __post_init__(self):
        if self.head_stats is None:
            self.head_stats = RunningStats.fresh(self.width)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def architecture(self) -> tuple:
        return (self.kind, self.map, self.in_features, self.width, self.num_classes, self.depth)

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {f"head.{name}": arr for name, arr in self.head.items()}
        for i, block in enumerate(self.blocks):
            params.update({f"blocks.{i}.{name}": arr for name, arr in block.arrays.items()})
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        scope, rest = name.split(".", 1)
        if scope == "head":
            self.head[rest] = value
        else:
            index, array_name = rest.split(".", 1)
            self.blocks[int(index)].arrays[array_name] = value

    def bind(self, graph: Graph) -> dict[str, Tensor]:
        return {name: graph.leaf(arr) for name, arr in self.named_parameters().items()}

    def _prepare(self, x: Tensor) -> Tensor:
        if self.map is MapKind.DENSE and x.ndim > 2:
            return T.flatten(x)
        if self.map is MapKind.CONV and x.ndim != 4:
            raise ShapeError(f"conv network expects N×C×H×W input, got {x.shape}")
        return x

    def forward(self, x, mode: Mode, bound: dict[str, Tensor] | None = None) -> Forward:
        w = bound if bound is not None else {name: Tensor(arr) for name, arr in self.named_parameters().items()}
        h = self._prepare(T.as_tensor(x))

        if self.map is MapKind.CONV:
            h = T.conv2d(h, w["head.stem.weight"], stride=1, pad=1)
        else:
            h = T.bias_add(T.matmul(h, w["head.stem.weight"]), w["head.stem.bias"])

        coefficients = []
        for i, block in enumerate(self.blocks):
            prefix = f"blocks.{i}."
            block_w = {name[len(prefix) :]: t for name, t in w.items() if name.startswith(prefix)}
            h, a = block_forward_with_coefficient(block.kind, block, h, mode, block_w)
            coefficients.append(a)

        h = T.relu(T.batch_norm(h, w["head.bn.gamma"], w["head.bn.beta"], self.head_stats, mode))
        if h.ndim == 4:
            h = T.spatial_mean(h)
        logits = T.bias_add(T.matmul(h, w["head.out.weight"]), w["head.out.bias"])
        return Forward(logits, coefficients)

    # Classifier

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, Mode.EVAL).logits.data

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return T.softmax_array(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest class id
        return np.argmax(self.logits(x), axis=1)

    def per_sample_loss(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return T.per_sample_cross_entropy(self.logits(x), y)

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Eval-mode batch-mean loss and its gradient with respect to the input."""
        with Graph() as graph:
            xt = graph.leaf(x)
            loss = T.softmax_cross_entropy(self.forward(xt, Mode.EVAL).logits, y)
            grads = graph.backward(loss)
        return loss.item(), grads[xt]

    def copy(self) -> "Network":
        blocks = [
            BlockParams(
                b.kind,
                b.map,
                {k: v.copy() for k, v in b.arrays.items()},
                tuple(RunningStats(s.mean.copy(), s.var.copy(), s.momentum) for s in b.stats),
            )
            for b in self.blocks
        ]
        hs = self.head_stats
        return Network(
            self.kind,
            self.map,
            self.in_features,
            self.width,
            self.num_classes,
            blocks,
            {k: v.copy() for k, v in self.head.items()},
            RunningStats(hs.mean.copy(), hs.var.copy(), hs.momentum),
        )


def is_decayed(name: str) -> bool:
    """Weight decay applies to every parameter except the learned coefficients."""
    return not name.endswith(".lambda")


def build_stack(
    depth: int,
    width: int,
    kind: BlockKind,
    init: InitScheme,
    seed: int,
    *,
    in_features: int,
    num_classes: int,
    map: MapKind = MapKind.DENSE,
) -> Network:
    if depth < 1:
        raise DomainError(f"depth must be >= 1, got {depth}")
    if width < 1 or in_features < 1 or num_classes < 2:
        raise DomainError(f"invalid widths: width={width} in_features={in_features} num_classes={num_classes}")

    rng = generator(seed, "init")
    if map is MapKind.CONV:
        head = {"stem.weight": rng.normal(0.0, np.sqrt(2.0 / (in_features * 9)), (width, in_features, 3, 3))}
    else:
        head = {
            "stem.weight": rng.normal(0.0, np.sqrt(2.0 / in_features), (in_features, width)),
            "stem.bias": np.zeros(width),
        }
    blocks = [BlockParams.init(kind, map, width, init, rng) for _ in range(depth)]
    head.update(
        {
            "bn.gamma": np.ones(width),
            "bn.beta": np.zeros(width),
            "out.weight": rng.normal(0.0, np.sqrt(1.0 / width), (width, num_classes)),
            "out.bias": np.zeros(num_classes),
        }
    )
    logger.debug("built %s stack: depth=%d width=%d init=%s", kind.value, depth, width, init)
    return Network(kind, map, in_features, width, num_classes, blocks, head)


# coefficient statistics


@dataclass
class CoefficientReport:
    coefficients: list[float]
    fraction_active: float
    bins: tuple[int, int, int]

    @classmethod
    def from_coefficients(cls, coefficients: list[float]) -> "CoefficientReport":
        values = np.asarray(coefficients, dtype=np.float64)
        n = len(values)
        bins = (
            int(np.sum(values <= 1.0)),
            int(np.sum((values > 1.0) & (values <= 2.0))),
            int(np.sum(values > 2.0)),
        )
        active = int(np.sum(values > ACTIVE_THRESHOLD))
        return cls([float(v) for v in values], active / n if n else 0.0, bins)

    def to_dict(self) -> dict:
        return {"coefficients": self.coefficients, "fraction_active": self.fraction_active, "bins": list(self.bins)}

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block_index", "coefficient"])
            for i, value in enumerate(self.coefficients):
                writer.writerow([i, repr(value)])
        logger.info("wrote %s", path)


def _learned_coefficient(block: BlockParams) -> float:
    if not block.kind.owns_lambda:
        return effective_coefficient(block.kind, None)
    act = T.sigmoid if block.kind.uses_sigmoid else T.relu
    return effective_coefficient(block.kind, act(block.arrays["lambda"]))


def coefficient_report(model: Network, probe_batch: np.ndarray | None = None) -> CoefficientReport:
    if model.kind.gated:
        if probe_batch is None:
            raise DomainError(f"{model.kind.value} coefficients depend on the input; a probe batch is required")
        coefficients = model.forward(probe_batch, Mode.EVAL).coefficients
        values = [effective_coefficient(model.kind, a) for a in coefficients]
    else:
        values = [_learned_coefficient(b) for b in model.blocks]
    return CoefficientReport.from_coefficients(values)


# parameter files
#
# "DONET1", u32 block count, then per block: u8 kind tag, u8 map tag, u32 array count,
# arrays; then a head record: u8 0xFF, u8 map tag, u32 in_features, u32 width,
# u32 num_classes, u32 array count, arrays. Each array is u8 name length, name,
# u8 ndim, u32 dims, f64 payload. All integers and floats little-endian. Running
# statistics travel as arrays named "<norm>.running_mean" / "<norm>.running_var".

_MAP_TAGS = {MapKind.DENSE: 0, MapKind.CONV: 1}


def _write_array(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<B", len(encoded)) + encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated parameter file: wanted {n} bytes, got {len(data)}")
    return data


def _read_array(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<B", _read_exact(fh, 1))
    name = _read_exact(fh, name_len).decode()
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def _stats_arrays(prefix: str, stats: RunningStats) -> dict[str, np.ndarray]:
    return {f"{prefix}.running_mean": stats.mean, f"{prefix}.running_var": stats.var}


def _pop_stats(arrays: dict[str, np.ndarray], prefix: str) -> RunningStats:
    try:
        return RunningStats(arrays.pop(f"{prefix}.running_mean"), arrays.pop(f"{prefix}.running_var"))
    except KeyError as e:
        raise FormatError(f"parameter record lacks running statistics {e.args[0]!r}") from e


def save_parameters(model: Network, path: Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", model.depth))
        for block in model.blocks:
            arrays = dict(block.arrays)
            arrays.update(_stats_arrays("bn1", block.stats[0]))
            arrays.update(_stats_arrays("bn2", block.stats[1]))
            fh.write(struct.pack("<BBI", block.kind.tag, _MAP_TAGS[block.map], len(arrays)))
            for name, arr in arrays.items():
                _write_array(fh, name, arr)
        head = dict(model.head)
        head.update(_stats_arrays("bn", model.head_stats))
        fh.write(struct.pack("<BB3II", HEAD_TAG, _MAP_TAGS[model.map], model.in_features, model.width, model.num_classes, len(head)))
        for name, arr in head.items():
            _write_array(fh, name, arr)
    logger.info("wrote %s", path)


def _block_kind(tag: int, path: Path) -> BlockKind:
    try:
        return BlockKind.from_tag(tag)
    except DomainError:
        raise FormatError(f"{path}: unknown block kind tag {tag}") from None


def _map_kind(maps: dict[int, MapKind], tag: int, path: Path) -> MapKind:
    if tag not in maps:
        raise FormatError(f"{path}: unknown map tag {tag}")
    return maps[tag]


def load_parameters(path: Path) -> Network:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"parameter file not found: {path}")
    maps = {tag: kind for kind, tag in _MAP_TAGS.items()}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a parameter file (bad magic)")
        (depth,) = struct.unpack("<I", _read_exact(fh, 4))
        blocks = []
        for _ in range(depth):
            kind_tag, map_tag, count = struct.unpack("<BBI", _read_exact(fh, 6))
            arrays = dict(_read_array(fh) for _ in range(count))
            stats = (_pop_stats(arrays, "bn1"), _pop_stats(arrays, "bn2"))
            blocks.append(BlockParams(_block_kind(kind_tag, path), _map_kind(maps, map_tag, path), arrays, stats))
        tag, map_tag, in_features, width, num_classes, count = struct.unpack("<BB3II", _read_exact(fh, 18))
        if tag != HEAD_TAG:
            raise FormatError(f"{path}: expected head record, found tag {tag}")
        head = dict(_read_array(fh) for _ in range(count))
        head_stats = _pop_stats(head, "bn")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after head record")
    if not blocks:
        raise FormatError(f"{path}: parameter file holds no blocks")
    return Network(blocks[0].kind, _map_kind(maps, map_tag, path), in_features, width, num_classes, blocks, head, head_stats)
