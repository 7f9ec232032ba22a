"""Adam with a validation-driven step decay and early stop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass
class AdamState:
    """Moments are stored flat, in the sorted-name order of the parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    layout: tuple[tuple[str, tuple[int, ...]], ...] = ()
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")

    def moment(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """First and second moment of one parameter, reshaped."""
        off = 0
        for n, shape in self.layout:
            size = int(np.prod(shape))
            if n == name:
                return self.m[off:off + size].reshape(shape), self.v[off:off + size].reshape(shape)
            off += size
        raise KeyError(name)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    names = sorted(params)
    layout = tuple((n, params[n].shape) for n in names)
    for n in names:
        g = grads.get(n)
        if g is not None and np.shape(g) != params[n].shape:
            raise DimensionError(f"gradient for {n!r} has shape {np.shape(g)}, param {params[n].shape}")
    if not state.layout:
        state.layout = layout
        total = sum(int(np.prod(s)) for _, s in layout)
        state.m = np.zeros(total)
        state.v = np.zeros(total)
    elif state.layout != layout:
        raise DimensionError("parameter set changed under an existing Adam state")
    g = np.concatenate([np.ravel(grads[n]) if n in grads else np.zeros(params[n].size) for n in names])
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    g *= g
    state.v += (1.0 - b2) * g
    denom = np.sqrt(state.v)
    denom *= 1.0 / np.sqrt(1.0 - b2 ** state.step)
    denom += state.eps
    update = state.m / denom
    update *= state.lr / (1.0 - b1 ** state.step)
    off = 0
    for n in names:
        p = params[n]
        p -= update[off:off + p.size].reshape(p.shape)
        off += p.size
    return params, state


@dataclass
class LrSchedule:
    """Divide lr by ``factor`` after ``patience`` epochs without a new best loss.

    ``stop`` becomes true once lr has fallen to ``floor`` or below.
    """

    initial_lr: float = 1e-3 / 3
    factor: float = 3.0
    patience: int = 5
    floor: float = 1e-7
    lr: float = field(init=False)
    best: float = field(init=False, default=float("inf"))
    bad_epochs: int = field(init=False, default=0)
    stop: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if not 0 < self.floor < self.initial_lr:
            raise ValidationError("need 0 < floor < initial lr")
        if self.factor <= 1:
            raise ValidationError("decay factor must exceed 1")
        self.reset()

    def reset(self):
        """Start of a new task."""
        self.lr = self.initial_lr
        self.best = float("inf")
        self.bad_epochs = 0
        self.stop = False


def schedule_update(schedule: LrSchedule, valid_loss: float) -> tuple[float, bool]:
    if not np.isfinite(valid_loss):
        raise ValidationError("validation loss must be finite")
    if schedule.stop:
        return schedule.lr, True
    # the first epoch of a task has no reference loss and counts as non-improving
    if np.isfinite(schedule.best) and valid_loss < schedule.best:
        schedule.best = valid_loss
        schedule.bad_epochs = 0
    else:
        schedule.best = min(schedule.best, valid_loss)
        schedule.bad_epochs += 1
        if schedule.bad_epochs >= schedule.patience:
            schedule.lr /= schedule.factor
            schedule.bad_epochs = 0
    if schedule.lr <= schedule.floor:
        schedule.stop = True
    return schedule.lr, schedule.stop
