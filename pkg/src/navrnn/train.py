"""Training loop: schedule, batching, early stopping, warm starts."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, TrainingDivergedError
from .preprocess import WindowedDataset
from .rnn import (
    AdamState,
    Checkpoint,
    LossSpec,
    NetworkParams,
    adam_step,
    backward,
    forward,
    loss,
)

DEFAULT_LR_SCHEDULE = ((0, 0.005), (51, 0.0025), (101, 0.001))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1024
    lr_schedule: tuple = DEFAULT_LR_SCHEDULE
    shuffle_seed: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping
    loss: LossSpec | None = None  # defaults to weighted MAE with dataset weights
    l2: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        starts = [int(e) for e, _ in self.lr_schedule]
        if not starts:
            raise ConfigError("lr_schedule must not be empty")
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ConfigError("lr_schedule epochs must be strictly increasing")


def lr_at(schedule, epoch: int) -> float:
    """Learning rate of the last schedule entry whose start <= epoch."""
    if not schedule:
        raise ConfigError("empty lr schedule")
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    current = None
    for start, lr in schedule:
        if int(start) <= epoch:
            current = float(lr)
    if current is None:
        raise ConfigError(f"no schedule entry covers epoch {epoch}")
    return current


@dataclass
class TrainReport:
    """Per-epoch history; wall time is excluded from equality checks."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time_s: list[float] = field(default_factory=list, compare=False)
    best_epoch: int = -1
    warm_start: bool = False
    stopped_early: bool = False
    # parameters at the best validation epoch (None without validation data);
    # not serialized
    best_params: NetworkParams | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
            "wall_time_s": self.wall_time_s,
            "best_epoch": self.best_epoch,
            "warm_start": self.warm_start,
            "stopped_early": self.stopped_early,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _resolve_loss(cfg: TrainConfig, dataset: WindowedDataset) -> LossSpec:
    if cfg.loss is not None:
        return cfg.loss
    return LossSpec(kind="weighted_mae", weights=dataset.weights.astype(np.float64))


def _dataset_loss(params: NetworkParams, dataset: WindowedDataset, spec: LossSpec, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.windows[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        y_hat, _ = forward(params, xb, want_tape=False)
        total += loss(y_hat, yb, spec) * len(xb)
    return total / max(len(dataset), 1)


def fit(
    dataset: WindowedDataset,
    val: WindowedDataset | None,
    cfg: TrainConfig,
    init: NetworkParams,
    warm_start: bool = False,
) -> tuple[NetworkParams, TrainReport]:
    """Train with per-epoch shuffling and the piecewise-constant lr schedule.

    Window order is reshuffled every epoch from shuffle_seed; the last
    partial batch is kept (its gradient is the mean over its true size).
    With early stopping enabled the parameters from the best validation
    epoch are returned, otherwise the final parameters. Inputs are never
    mutated; identical inputs and seeds give identical outputs.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if dataset.windows.shape[2] != init.input_size or dataset.labels.shape[1] != init.output_size:
        raise ConfigError(
            f"dataset shapes {dataset.windows.shape[2]}/{dataset.labels.shape[1]} do not match "
            f"network {init.input_size}/{init.output_size}"
        )
    spec = _resolve_loss(cfg, dataset)
    params = init.copy()
    state = AdamState.zeros_like(params)
    report = TrainReport(warm_start=warm_start)
    rng = np.random.default_rng(cfg.shuffle_seed)
    m = len(dataset)

    best_params = params.copy()
    best_val = np.inf
    since_best = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg.lr_schedule, epoch)
        order = rng.permutation(m)
        epoch_loss = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = dataset.windows[idx]
            yb = dataset.labels[idx]
            y_hat, tape = forward(params, xb)
            batch_loss = loss(y_hat, yb, spec)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss {batch_loss} at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            grads = backward(tape, yb, spec)
            if cfg.l2 > 0.0:
                for (_, g), (_, p) in zip(grads.arrays(), params.arrays()):
                    g += cfg.l2 * p
            params, state = adam_step(params, grads, state, lr=lr)
            epoch_loss += batch_loss * len(idx)
        epoch_loss /= m

        val_loss = float("nan")
        if val is not None and len(val) > 0:
            val_loss = _dataset_loss(params, val, spec, cfg.batch_size)
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
                report.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1

        report.train_loss.append(float(epoch_loss))
        report.val_loss.append(float(val_loss))
        report.lr.append(lr)
        report.wall_time_s.append(time.perf_counter() - t0)

        if cfg.early_stop_patience > 0 and since_best >= cfg.early_stop_patience:
            report.stopped_early = True
            break

    if report.best_epoch >= 0:
        report.best_params = best_params
    if cfg.early_stop_patience > 0 and report.best_epoch >= 0:
        return best_params, report
    return params, report


def transfer_fit(
    source: Checkpoint,
    target_train: WindowedDataset,
    target_val: WindowedDataset | None,
    cfg: TrainConfig,
) -> tuple[NetworkParams, TrainReport]:
    """Retrain from a pretrained checkpoint on a new domain.

    All layers (including the output layer) start from the source weights;
    the optimizer state starts fresh. Shapes must match the target data.
    """
    params = source.params
    if target_train.windows.shape[2] != params.input_size:
        raise ConfigError(
            f"checkpoint input size {params.input_size} != dataset feature size {target_train.windows.shape[2]}"
        )
    if target_train.labels.shape[1] != params.output_size:
        raise ConfigError(
            f"checkpoint output size {params.output_size} != dataset label size {target_train.labels.shape[1]}"
        )
    return fit(target_train, target_val, cfg, params, warm_start=True)
