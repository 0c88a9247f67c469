"""AMSGrad, the step learning-rate schedule and warm-up parameter freezing."""

from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from .errors import ConfigError, EpochOutOfRange, ShapeMismatch


class AMSGrad:
    """AMSGrad over a dict of named float64 arrays, updated in place.

    Keeps the elementwise running maximum of the second-moment estimate so
    the effective per-coordinate step size never grows.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, bias_correction=True):
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.bias_correction = bool(bias_correction)
        self.m = {}
        self.v = {}
        self.v_max = {}
        self.t = {}

    def step(self, params, grads, lr, names=None):
        """Apply one update to ``params[name]`` for every name in ``names``
        (default: every name in ``grads``). Parameters outside ``names`` are
        untouched and their optimizer state does not advance."""
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        names = sorted(grads if names is None else names)
        b1, b2 = self.beta1, self.beta2
        for name in names:
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ShapeMismatch(f"{name}: param {p.shape} vs grad {g.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.v_max[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            m, v, vmax = self.m[name], self.v[name], self.v_max[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            np.maximum(vmax, v, out=vmax)
            if self.bias_correction:
                t = self.t[name]
                m_hat = m / (1.0 - b1 ** t)
                v_hat = vmax / (1.0 - b2 ** t)
            else:
                m_hat, v_hat = m, vmax
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def amsgrad_step(state, params, grads, lr, names=None):
    """Functional spelling of ``state.step``; returns ``(params, state)``."""
    state.step(params, grads, lr, names)
    return params, state


@dataclass
class Schedule:
    base_lr: float = 0.0015
    drop_epochs: tuple = (40, 50)
    drop_factor: float = 10.0
    total_epochs: int = 65
    warmup_epochs: int = 5

    def __post_init__(self):
        self.drop_epochs = tuple(int(e) for e in self.drop_epochs)
        if any(b <= a for a, b in zip(self.drop_epochs, self.drop_epochs[1:])):
            raise ConfigError("drop_epochs must be strictly increasing")
        if self.drop_epochs and self.drop_epochs[-1] >= self.total_epochs:
            raise ConfigError("drop_epochs must lie below total_epochs")
        if self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigError("invalid epoch counts")
        if not self.drop_factor > 0:
            raise ConfigError("drop_factor must be positive")


def lr_at_epoch(schedule, epoch):
    """Piecewise-constant rate; each drop applies from the start of its epoch.

    Drops are computed in decimal so 0.0015 / 10 comes out as exactly the
    float nearest 0.00015 rather than accumulating binary rounding.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    drops = sum(1 for e in schedule.drop_epochs if epoch >= e)
    lr = Decimal(repr(float(schedule.base_lr))) / Decimal(repr(float(schedule.drop_factor))) ** drops
    return float(lr)


def trainable_groups(schedule, epoch, model):
    """Names of parameters updated at ``epoch``.

    During warm-up only the classifier, the global depthwise pooling weights
    and the final embedding layer train; afterwards everything does.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return set(model.head_param_names())
    return set(model.param_shapes())


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True

    def build(self):
        return AMSGrad(self.beta1, self.beta2, self.eps, self.bias_correction)
