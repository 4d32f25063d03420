"""Full-batch gradient descent with a step-decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import DimensionError, DivergenceError
from .layers import Gradients, ModelParams

# objective(params) -> (loss, gradients, training accuracy)
Objective = Callable[[ModelParams], "tuple[float, Gradients, float]"]


@dataclass(frozen=True)
class Schedule:
    lr0: float = 0.1
    decay_rate: float = 0.02
    decay_start_epoch: int = 50
    max_epochs: int = 2000
    stop_loss: float = 0.1
    decay_mode: Literal["per_epoch", "once"] = "per_epoch"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.decay_rate < 1.0:
            raise ValueError("decay_rate must lie in [0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not self.stop_loss >= 0:
            raise ValueError("stop_loss must be non-negative")
        if self.decay_mode not in ("per_epoch", "once"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a 0-based epoch index.

    Constant ``lr0`` before ``decay_start_epoch``; afterwards multiplied by
    ``1 - decay_rate`` once per epoch (``per_epoch``) or a single time
    (``once``).
    """
    if epoch < schedule.decay_start_epoch:
        return schedule.lr0
    factor = 1.0 - schedule.decay_rate
    if schedule.decay_mode == "once":
        return schedule.lr0 * factor
    return schedule.lr0 * factor ** (epoch - schedule.decay_start_epoch + 1)


def _orthonormalize_rows(W):
    q, r = np.linalg.qr(W.T)
    return (q * np.where(np.diag(r) < 0, -1.0, 1.0)).T


def stiefel_project(W, G):
    """Project ``G`` onto the tangent space of orthonormal-row matrices at ``W``."""
    A = G @ W.T
    return G - 0.5 * (A + A.T) @ W


def sgd_step(params: ModelParams, grads: Gradients, lr: float, stiefel: bool = False) -> ModelParams:
    """In-place ``p <- p - lr * g`` on every parameter; returns ``params``.

    With ``stiefel`` the BiMap gradients are projected to the orthonormal-row
    tangent space and the weights re-orthonormalized after the step.
    """
    if len(grads.bimaps) != len(params.bimaps):
        raise DimensionError("gradient list does not match the BiMap stack")
    pairs = [(layer.weight, g) for layer, g in zip(params.bimaps, grads.bimaps)]
    pairs += [(params.dense.weight, grads.dense_weight), (params.dense.bias, grads.dense_bias)]
    for p, g in pairs:
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient ({int(np.sum(~np.isfinite(g)))} of {g.size} entries, shape {g.shape})")
    if lr == 0.0:
        return params
    for layer, g in zip(params.bimaps, grads.bimaps):
        if stiefel:
            layer.weight = _orthonormalize_rows(layer.weight - lr * stiefel_project(layer.weight, g))
        else:
            layer.weight = layer.weight - lr * g
    params.dense.weight = params.dense.weight - lr * grads.dense_weight
    params.dense.bias = params.dense.bias - lr * grads.dense_bias
    return params


@dataclass
class TrainReport:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    stop_reason: str | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan

    def record(self, epoch, loss, lr, acc):
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.lrs.append(lr)
        self.accuracies.append(acc)


def run_epochs(params, objective: Objective, schedule: Schedule, n_epochs: int, start_epoch: int = 0,
               stiefel: bool = False, report: TrainReport | None = None, stop_loss: float | None = None,
               initial=None):
    """Run up to ``n_epochs`` gradient steps starting at global epoch ``start_epoch``.

    Each epoch is one step followed by evaluation of the end-of-epoch loss. If
    ``stop_loss`` is given the loop ends as soon as that loss drops below it.
    Returns ``(report, last_evaluation)`` where the evaluation can seed the
    next call.
    """
    report = report if report is not None else TrainReport()
    current = initial if initial is not None else objective(params)
    for k in range(n_epochs):
        epoch = start_epoch + k
        lr = lr_at(schedule, epoch)
        sgd_step(params, current[1], lr, stiefel)
        current = objective(params)
        loss = current[0]
        report.record(epoch + 1, loss, lr, current[2])
        if not math.isfinite(loss):
            report.stop_reason = "diverged"
            raise DivergenceError(f"training loss became {loss} at epoch {epoch + 1}", report=report)
        if stop_loss is not None and loss < stop_loss:
            report.stop_reason = "threshold"
            break
    return report, current


def train(params: ModelParams, objective: Objective, schedule: Schedule, stiefel: bool = False) -> TrainReport:
    """Gradient descent until the end-of-epoch loss is below ``stop_loss`` or ``max_epochs``."""
    report, _ = run_epochs(params, objective, schedule, schedule.max_epochs, stiefel=stiefel,
                           stop_loss=schedule.stop_loss)
    if report.stop_reason is None:
        report.stop_reason = "max_epochs"
    return report
