"""SGD with momentum and step learning-rate drops, plus the run record it produces."""

import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import tensor as T
from .blocks import MapKind
from .config import ModelConfig, TrainConfig
from .data import Dataset
from .errors import ArtifactError, ConfigError
from .network import Network, build_stack, is_decayed
from .seeding import generator
from .tensor import Graph, Mode

logger = logging.getLogger(__name__)


class RunStatus(Enum):
    OK = "ok"
    FAILED = "failed"


class RunRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")

    seed: int
    model: ModelConfig
    train: TrainConfig
    status: RunStatus = RunStatus.OK
    failure_reason: str | None = None
    parameters: str | None = None
    metrics: dict[str, float] = Field(default_factory=dict)
    loss_curve: list[float] = Field(default_factory=list)
    accuracy_curve: list[float] = Field(default_factory=list)
    lr_curve: list[float] = Field(default_factory=list)
    wall_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status is RunStatus.FAILED

    def save(self, path: Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))
        logger.info("wrote %s", path)

    @classmethod
    def load(cls, path: Path) -> "RunRecord":
        path = Path(path)
        if not path.exists():
            raise ArtifactError(f"run record not found: {path}")
        try:
            return cls.model_validate_json(path.read_text())
        except ValidationError as e:
            raise ConfigError(f"{path}: not a run record ({e.errors()[0]['msg']})") from e


@dataclass
class TrainedRun:
    record: RunRecord
    network: Network


def lr_at(epoch: int, lr0: float, drops: list[tuple[int, float]]) -> float:
    """lr0 divided by every scheduled divisor whose epoch has been reached."""
    lr = lr0
    for at, divisor in drops:
        if epoch >= at:
            lr /= divisor
    return lr


def build_network(model_cfg: ModelConfig, data: Dataset, seed: int) -> Network:
    if model_cfg.map is MapKind.CONV:
        if len(data.feature_shape) != 3:
            raise ConfigError(f"conv models need C×H×W inputs, dataset has shape {data.feature_shape}", section="model")
        in_features = data.feature_shape[0]
    else:
        in_features = int(np.prod(data.feature_shape))
    return build_stack(
        model_cfg.depth,
        model_cfg.width,
        model_cfg.kind,
        model_cfg.init_scheme(),
        seed,
        in_features=in_features,
        num_classes=model_cfg.num_classes or data.num_classes,
        map=model_cfg.map,
    )


class FailureDetector:
    """Flags a run whose loss is not finite or whose accuracy sits at chance for ``patience`` epochs."""

    def __init__(self, num_classes: int, patience: int, margin: float):
        self.chance = 100.0 / num_classes
        self.patience = patience
        self.margin = margin
        self.stalled = 0

    def update(self, epoch: int, loss: float, accuracy: float) -> str | None:
        if not math.isfinite(loss):
            return f"non-finite train loss at epoch {epoch}"
        self.stalled = self.stalled + 1 if accuracy <= self.chance + self.margin else 0
        if self.stalled >= self.patience:
            return f"accuracy at chance ({accuracy:.2f}%) for {self.stalled} consecutive epochs"
        return None


def _sgd_step(network: Network, grads, bound, velocity: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    for name, param in network.named_parameters().items():
        g = grads[bound[name]]
        v = cfg.momentum * velocity[name] + g
        velocity[name] = v
        decay = cfg.weight_decay if is_decayed(name) else 0.0
        network.set_parameter(name, param - lr * (v + decay * param))


def sgd_train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Dataset, seed: int) -> TrainedRun:
    """Train from scratch on ``data`` (the training split); deterministic per seed."""
    started = time.perf_counter()
    network = build_network(model_cfg, data, seed)
    record = RunRecord(seed=seed, model=model_cfg, train=train_cfg)
    velocity = {name: np.zeros_like(p) for name, p in network.named_parameters().items()}
    detector = FailureDetector(network.num_classes, train_cfg.failure_patience, train_cfg.chance_margin)
    rng = generator(seed, "batches")
    n = len(data)

    logger.info("training %s depth=%d seed=%d on %d samples", model_cfg.kind.value, model_cfg.depth, seed, n)
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.lr0, train_cfg.lr_drops)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            rows = order[start : start + train_cfg.batch_size]
            x, y = data.inputs[rows], data.labels[rows]
            with Graph() as graph:
                bound = network.bind(graph)
                logits = network.forward(x, Mode.TRAIN, bound).logits
                loss = T.softmax_cross_entropy(logits, y)
                grads = graph.backward(loss)
            _sgd_step(network, grads, bound, velocity, lr, train_cfg)
            total_loss += loss.item() * len(rows)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))

        epoch_loss, accuracy = total_loss / n, 100.0 * correct / n
        record.loss_curve.append(epoch_loss)
        record.accuracy_curve.append(accuracy)
        record.lr_curve.append(lr)
        logger.info("epoch %d/%d loss=%.4f acc=%.2f%% lr=%.4g", epoch + 1, train_cfg.epochs, epoch_loss, accuracy, lr)

        reason = detector.update(epoch, epoch_loss, accuracy)
        if reason is not None:
            record.status = RunStatus.FAILED
            record.failure_reason = reason
            logger.warning("run seed=%d FAILED: %s", seed, reason)
            break

    record.wall_time = time.perf_counter() - started
    logger.info("run seed=%d finished: %s in %.1fs", seed, record.status.value, record.wall_time)
    return TrainedRun(record, network)
