from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..errors import EmptyInput, NonFiniteLoss
from .model import SequentialModel
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EarlyStopping:
    patience: int = 3
    min_delta: float = 0.0
    restore_best: bool = False


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 10
    shuffle: bool = True
    seed: int = 0
    early_stopping: EarlyStopping | None = field(default_factory=EarlyStopping)
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        es = data.pop("early_stopping", None)
        return cls(early_stopping=EarlyStopping(**es) if es else None, **data)


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    stopped_epoch: int
    early_stopped: bool

    def to_dict(self) -> dict:
        return asdict(self)


def train(
    model: SequentialModel,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    on_epoch: Callable[[int, TrainReport], None] | None = None,
) -> TrainReport:
    """Mini-batch Adam training with optional early stopping.

    Early stopping watches validation loss when ``validation`` is non-empty and
    the training loss otherwise. The same config, data and seed always yield the
    same parameters: one generator drives both shuffling and dropout masks.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise EmptyInput("training data is empty")
    targets = model.prepare_targets(y)
    has_val = validation is not None and len(validation[0]) > 0
    if has_val:
        val_x = np.asarray(validation[0], dtype=np.float64)
        val_t = model.prepare_targets(validation[1])

    rng = np.random.default_rng(config.seed)
    state = AdamState(model.params.size, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    es = config.early_stopping
    best = math.inf
    best_params = None
    wait = 0
    report = TrainReport([], [], 0, False)
    n = len(x)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = model.loss_and_grad(x[idx], targets[idx], rng=rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            adam_step(state, model.params, model.grads)
            total += loss * len(idx)
        report.train_loss.append(total / n)
        monitored = report.train_loss[-1]
        if has_val:
            report.val_loss.append(model.evaluate_loss(val_x, val_t))
            monitored = report.val_loss[-1]
        if not math.isfinite(monitored):
            raise NonFiniteLoss(f"monitored loss became {monitored} at epoch {epoch}")
        report.stopped_epoch = epoch
        log.debug("epoch %d train=%.6g val=%s", epoch, report.train_loss[-1], report.val_loss[-1:] or "-")
        if on_epoch is not None:
            on_epoch(epoch, report)
        if es is None:
            continue
        if monitored < best - es.min_delta:
            best = monitored
            wait = 0
            if es.restore_best:
                best_params = model.params.copy()
        else:
            wait += 1
            if wait >= es.patience:
                report.early_stopped = True
                break

    if es is not None and es.restore_best and best_params is not None:
        model.params[...] = best_params
    model.trained = True
    return report
