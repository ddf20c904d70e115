"""SGD with a step-decay base schedule and per-stage effective learning rates.

Each stage's effective rate is base_lr(iteration) * stage_multiplier *
scale. A multiplier of 0 freezes the stage completely: neither its
parameters nor its velocities are touched, so frozen stages stay
byte-identical through any number of steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .model import StagedModel


@dataclass(frozen=True)
class LrPolicy:
    """Step-decay schedule: base_lr * gamma^(iteration // step_size)."""

    base_lr: float
    step_size: int
    total_iterations: int
    gamma: float = 0.1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.total_iterations <= 0:
            raise ValueError(f"total_iterations must be positive, "
                             f"got {self.total_iterations}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")

    def scaled(self, divisor: int = 10) -> "LrPolicy":
        """Derived target policy: iterations and step size divided down."""
        return LrPolicy(self.base_lr, max(1, self.step_size // divisor),
                        max(1, self.total_iterations // divisor), self.gamma)


def lr_at(policy: LrPolicy, iteration: int) -> float:
    """Base learning rate at a 0-indexed iteration."""
    if not 0 <= iteration < policy.total_iterations:
        raise ValueError(f"iteration {iteration} outside "
                         f"[0, {policy.total_iterations})")
    return policy.base_lr * policy.gamma ** (iteration // policy.step_size)


def effective_lr(policy: LrPolicy, iteration: int, stage_multiplier: float,
                 scale: float) -> float:
    """base schedule x stage multiplier x sweep scale."""
    if stage_multiplier < 0:
        raise ValueError(f"stage multiplier must be >= 0, got {stage_multiplier}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return lr_at(policy, iteration) * stage_multiplier * scale


@dataclass(frozen=True)
class MultiplierSchedule:
    """Per-stage learning-rate multipliers plus a global sweep scale."""

    stage_multipliers: dict[str, float]
    scale: float = 1.0

    def __post_init__(self):
        for name, m in self.stage_multipliers.items():
            if m < 0:
                raise ValueError(f"stage '{name}' multiplier must be >= 0, got {m}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def check_covers(self, stage_names) -> None:
        have = set(self.stage_multipliers)
        want = set(stage_names)
        if have != want:
            missing = sorted(want - have)
            extra = sorted(have - want)
            raise ValueError(f"schedule/model stage mismatch: missing {missing}, "
                             f"unknown {extra}")

    def with_scale(self, scale: float) -> "MultiplierSchedule":
        return MultiplierSchedule(dict(self.stage_multipliers), scale)


def uniform_schedule(model_stage_names, head_name: str, inner: float,
                     head: float, scale: float = 1.0) -> MultiplierSchedule:
    """Same multiplier for every inner stage, a separate one for the head."""
    mults = {name: (head if name == head_name else inner)
             for name in model_stage_names}
    return MultiplierSchedule(mults, scale)


@dataclass
class SgdState:
    """Momentum coefficient and per-parameter velocity tensors."""

    momentum: float
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: StagedModel, momentum: float = 0.9) -> "SgdState":
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        vel = {name: np.zeros_like(arr) for name, arr in model.named_parameters()}
        return cls(momentum, vel)


def sgd_step(model: StagedModel, grads: dict[str, np.ndarray], state: SgdState,
             schedule: MultiplierSchedule, policy: LrPolicy,
             iteration: int) -> None:
    """One momentum-SGD update: v <- mu*v - eff_lr*g; w <- w + v.

    Stages whose effective learning rate is 0 are skipped entirely.
    """
    schedule.check_covers(model.stage_names)
    for stage in model.stages:
        eff = effective_lr(policy, iteration,
                           schedule.stage_multipliers[stage.name], schedule.scale)
        if eff == 0.0:
            continue
        for name, param in stage.named_params():
            g = grads.get(name)
            if g is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if g.shape != param.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {param.shape}")
            v = state.velocities[name]
            v *= state.momentum
            v -= eff * g
            param += v


def evaluate(model: StagedModel, dataset: LabeledDataset,
             chunk: int = 256) -> float:
    """Top-1 accuracy over a dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), chunk):
        x = dataset.features[start:start + chunk]
        y = dataset.labels[start:start + chunk]
        scores = model.predict(x)
        correct += int((scores.argmax(axis=1) == y).sum())
    return correct / len(dataset)


@dataclass
class TrainResult:
    """Outcome of one training run.

    model is the final (mutated) model; best_model is a snapshot at the
    evaluation point with the highest validation accuracy (earliest wins
    ties).
    """

    model: StagedModel
    best_model: StagedModel
    trace: list[tuple[int, float]]
    best_accuracy: float
    best_iteration: int
    final_accuracy: float


def train(model: StagedModel, train_set: LabeledDataset,
          val_set: LabeledDataset, schedule: MultiplierSchedule,
          policy: LrPolicy, batch_size: int, seed: int,
          momentum: float = 0.9, eval_every: int | None = None) -> TrainResult:
    """Run policy.total_iterations SGD steps with seeded shuffling.

    Validation accuracy is recorded every eval_every iterations (default
    step_size // 10, minimum 1) and at the final iteration. The model is
    updated in place.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    if not 0 < batch_size <= len(train_set):
        raise ValueError(f"batch_size must be in [1, {len(train_set)}], "
                         f"got {batch_size}")
    schedule.check_covers(model.stage_names)
    cadence = eval_every if eval_every else max(1, policy.step_size // 10)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_set))
    cursor = 0
    start_iterations = model.trained_iterations
    state = SgdState.for_model(model, momentum)
    trace: list[tuple[int, float]] = []
    best_acc = -1.0
    best_iter = -1
    best_model = model.clone()

    for it in range(policy.total_iterations):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        _, _, cache = model.forward(train_set.features[idx], train_set.labels[idx])
        grads = model.backward(cache, train_set.labels[idx])
        sgd_step(model, grads, state, schedule, policy, it)
        done = it + 1
        if done % cadence == 0 or done == policy.total_iterations:
            acc = evaluate(model, val_set)
            trace.append((done, acc))
            if acc > best_acc:
                best_acc = acc
                best_iter = done
                best_model = model.clone()

    model.trained_iterations = start_iterations + policy.total_iterations
    best_model.trained_iterations = start_iterations + best_iter
    return TrainResult(model, best_model, trace, best_acc, best_iter,
                       trace[-1][1])
