"""Mini-batch SGD with Nesterov momentum, plus per-epoch evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from .inference import Metrics, compute_metrics, map_decide
from .mlp import DimensionMismatch, MlpModel, backward, forward, loss
from .scenarios import Dataset, FingerprintMismatch

log = logging.getLogger(__name__)

EVAL_CHUNK = 8192


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 10
    shuffle_seed: int = 0
    log_every: int = 1

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    test_accuracy: float
    avg_misidentified: float


CURVE_HEADER = [f.name for f in fields(EpochStats)]


def sgd_nesterov_step(params: dict, velocity: dict, grad: dict,
                      config: TrainConfig) -> tuple[dict, dict]:
    """``v' = mu v - lr g(params + mu v)``; ``params' = params + v'``.

    ``grad`` must already be evaluated at the lookahead point.
    """
    if params.keys() != velocity.keys() or params.keys() != grad.keys():
        raise ValueError("params, velocity and gradient must have the same entries")
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        v, g = velocity[name], grad[name]
        if np.shape(p) != np.shape(v) or np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch for {name}: {np.shape(p)}, {np.shape(v)}, {np.shape(g)}")
        v_new = config.momentum * v - config.learning_rate * g
        new_velocity[name] = v_new
        new_params[name] = p + v_new
    return new_params, new_velocity


def predict(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Output probabilities for every row, computed in bounded-memory chunks."""
    out = np.empty((len(features), model.output_dim))
    for a in range(0, len(features), EVAL_CHUNK):
        out[a:a + EVAL_CHUNK] = forward(model, features[a:a + EVAL_CHUNK])[0]
    return out


def dataset_loss(model: MlpModel, d: Dataset) -> float:
    if not len(d):
        return 0.0
    total = 0.0
    for a in range(0, len(d), EVAL_CHUNK):
        q, _ = forward(model, d.features[a:a + EVAL_CHUNK])
        total += loss(q, d.labels[a:a + EVAL_CHUNK]) * len(q)
    return total / len(d)


def evaluate(model: MlpModel, d: Dataset, switchable: np.ndarray | None = None) -> Metrics:
    """MAP decisions on every sample, scored over the switchable lines."""
    _check_compatible(model, d)
    decisions = map_decide(predict(model, d.features))
    if switchable is None:
        switchable = np.ones(d.n_lines, dtype=bool)
    return compute_metrics(decisions, d.labels, switchable)


def _check_compatible(model: MlpModel, d: Dataset) -> None:
    if d.feature_dim != model.input_dim or d.n_lines != model.output_dim:
        raise DimensionMismatch(
            f"model is {model.input_dim}->{model.output_dim}, "
            f"dataset is {d.feature_dim}->{d.n_lines}"
        )
    if d.fingerprint != model.grid_fingerprint:
        raise FingerprintMismatch("dataset and model were built for different grids")


def train(
    model: MlpModel,
    train_set: Dataset,
    val_set: Dataset,
    test_set: Dataset,
    config: TrainConfig,
    switchable: np.ndarray | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[MlpModel, list[EpochStats]]:
    for d in (train_set, val_set, test_set):
        _check_compatible(model, d)
    rng = np.random.default_rng(config.shuffle_seed)
    params = {k: v.copy() for k, v in model.params().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history: list[EpochStats] = []
    n = len(train_set)
    mu = config.momentum
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            lookahead = model.with_params({k: params[k] + mu * velocity[k] for k in params})
            q, cache = forward(lookahead, train_set.features[idx])
            labels = train_set.labels[idx]
            batch_loss = loss(q, labels)
            if not math.isfinite(batch_loss):
                norms = ", ".join(f"{k}={np.linalg.norm(v):.3e}" for k, v in params.items())
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}"
                )
            total += batch_loss * len(idx)
            grad = backward(lookahead, cache, labels)
            params, velocity = sgd_nesterov_step(params, velocity, grad, config)
        model = model.with_params(params)
        if epoch % config.log_every == 0 or epoch == config.epochs:
            metrics = evaluate(model, test_set, switchable) if len(test_set) else None
            stats = EpochStats(
                epoch=epoch,
                train_loss=total / n if n else 0.0,
                val_loss=dataset_loss(model, val_set),
                test_accuracy=metrics.per_line_accuracy if metrics else float("nan"),
                avg_misidentified=metrics.avg_misidentified if metrics else float("nan"),
            )
            history.append(stats)
            log.info("epoch %d: train %.4f val %.4f acc %.4f mis %.3f", epoch, stats.train_loss,
                     stats.val_loss, stats.test_accuracy, stats.avg_misidentified)
            if on_epoch:
                on_epoch(stats)
    return model, history


def write_curves(history: list[EpochStats], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(CURVE_HEADER)
    for st in history:
        writer.writerow([st.epoch, repr(st.train_loss), repr(st.val_loss),
                         repr(st.test_accuracy), repr(st.avg_misidentified)])
