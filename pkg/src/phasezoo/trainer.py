"""Deterministic minibatch SGD with momentum, weight decay and a one-cycle cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DataPair, Dataset
from .nn import ModelSpec, NumericError, ParameterVector, build_model, forward, loss_grad_logits

SCHEDULES = ("one_cycle_cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    peak_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "one_cycle_cosine"
    warmup_fraction: float = 0.3
    checkpoint_every: int = 5
    seed: int = 0
    warmup_div: float = 25.0
    final_div: float = 1e4
    strict_eval: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if self.warmup_div <= 0 or self.final_div <= 0:
            raise ValueError("schedule divisors must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        return cls(**d)


@dataclass
class RunRecord:
    history: list[EpochRecord]
    checkpoints: list[tuple[int, ParameterVector]]
    final: EpochRecord
    diverged: bool = False
    initial: EpochRecord | None = field(default=None, repr=False)

    @property
    def generalization_gap(self) -> float:
        return self.final.test_loss - self.final.train_loss

    @property
    def final_params(self) -> ParameterVector:
        return self.checkpoints[-1][1]


def lr_at(config: TrainConfig, step: float, total_steps: int) -> float:
    """Learning rate after ``step`` of ``total_steps`` optimizer steps.

    Linear warmup from ``peak/warmup_div`` to ``peak`` over the first
    ``warmup_fraction`` of the run, then cosine annealing down to
    ``peak/final_div``.
    """
    if total_steps < 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.peak_lr
    if config.schedule == "constant":
        return peak
    start, end = peak / config.warmup_div, peak / config.final_div
    warm = config.warmup_fraction * total_steps
    if step < warm:
        return start + (peak - start) * step / warm
    if step == warm:
        return peak
    frac = (step - warm) / (total_steps - warm)
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def evaluate(params: ParameterVector, spec: ModelSpec, data: Dataset) -> tuple[float, float]:
    """Full-split mean cross-entropy and top-1 accuracy."""
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = forward(params, spec, data.inputs)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    losses = lse - logits[np.arange(len(data)), data.labels]
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return float(np.mean(losses)), acc


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def num_checkpoints(epochs: int, every: int) -> int:
    return math.ceil(epochs / every) + 1


def train(spec: ModelSpec, data: DataPair, config: TrainConfig,
          init: ParameterVector | None = None) -> RunRecord:
    """Train from ``build_model(spec)`` (or ``init``) and keep checkpoints.

    A non-finite loss stops the run; the record is marked ``diverged`` and
    keeps everything up to the last finite epoch.
    """
    train_set, test_set = data.train, data.test
    if train_set is None or test_set is None:
        raise ValueError("training needs both a train and a test split")
    if config.batch_size > len(train_set):
        raise ValueError(f"batch_size {config.batch_size} exceeds train size {len(train_set)}")

    params = build_model(spec) if init is None else init
    theta = params.values.copy()
    velocity = np.zeros_like(theta)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs

    def snapshot() -> ParameterVector:
        return params.with_values(theta.copy())

    tr_loss, tr_acc = evaluate(params, spec, train_set)
    te_loss, te_acc = evaluate(params, spec, test_set)
    initial = EpochRecord(0, tr_loss, tr_acc, te_loss, te_acc, lr_at(config, 0, total) if total else config.peak_lr)
    history: list[EpochRecord] = []
    checkpoints = [(0, snapshot())]
    diverged = False
    last_good = theta.copy()
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = epoch_permutation(config.seed, epoch, n)
        loss_sum = 0.0
        correct = 0
        lr = config.peak_lr
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y = train_set.inputs[idx], train_set.labels[idx]
                batch_loss, grad, logits = loss_grad_logits(params.with_values(theta), spec, x, y)
                if not math.isfinite(batch_loss):
                    raise NumericError("non-finite loss")
                loss_sum += batch_loss * len(idx)
                correct += int(np.sum(np.argmax(logits, axis=1) == y))
                lr = lr_at(config, step, total)
                g = grad.values
                if config.weight_decay:
                    g = g + config.weight_decay * theta
                with np.errstate(over="ignore", invalid="ignore"):
                    velocity = config.momentum * velocity + g
                    theta = theta - lr * velocity
                step += 1
                if not np.all(np.isfinite(theta)):
                    raise NumericError("non-finite parameters after update")
        except NumericError:
            diverged = True
            break

        current = params.with_values(theta)
        try:
            if config.strict_eval:
                tr_loss, tr_acc = evaluate(current, spec, train_set)
            else:
                tr_loss, tr_acc = loss_sum / n, correct / n
            te_loss, te_acc = evaluate(current, spec, test_set)
        except NumericError:
            diverged = True
            break
        if not all(math.isfinite(v) for v in (tr_loss, te_loss)):
            diverged = True
            break
        history.append(EpochRecord(epoch, tr_loss, tr_acc, te_loss, te_acc, lr))
        last_good = theta.copy()
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            checkpoints.append((epoch, snapshot()))

    if diverged and history and checkpoints[-1][0] != history[-1].epoch:
        checkpoints.append((history[-1].epoch, params.with_values(last_good)))
    final = history[-1] if history else initial
    return RunRecord(history, checkpoints, final, diverged, initial)
