"""Adam with a piecewise-constant learning-rate decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError

DEFAULT_TOTAL_STEPS = 60000
DEFAULT_BREAKPOINTS = (20000, 30000, 40000, 50000)
DEFAULT_RATES = (1e-3, 3e-4, 1e-4, 3e-5, 1e-5)


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant rates: rates[i] applies on (breakpoints[i-1], breakpoints[i]]."""

    breakpoints: tuple = DEFAULT_BREAKPOINTS
    rates: tuple = DEFAULT_RATES
    total_steps: int = DEFAULT_TOTAL_STEPS

    def __post_init__(self):
        if len(self.rates) != len(self.breakpoints) + 1:
            raise ValueError("need exactly one more rate than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(r2 >= r1 for r1, r2 in zip(self.rates, self.rates[1:])):
            raise ValueError("rates must be strictly decreasing")

    @classmethod
    def for_steps(cls, total_steps):
        """Default schedule, with breakpoints rescaled when the budget differs.

        For total_steps != 60000 the decay profile keeps its relative
        position in the run (1/3 of the budget at the initial rate, then
        one sixth at each lower rate).
        """
        if total_steps == DEFAULT_TOTAL_STEPS:
            return cls()
        if total_steps < len(DEFAULT_RATES):
            return cls(breakpoints=(), rates=DEFAULT_RATES[:1], total_steps=max(total_steps, 1))
        scale = total_steps / DEFAULT_TOTAL_STEPS
        breakpoints = tuple(int(round(b * scale)) for b in DEFAULT_BREAKPOINTS)
        return cls(breakpoints=breakpoints, rates=DEFAULT_RATES, total_steps=total_steps)


def lr_at(schedule, step):
    """Learning rate at 1-indexed optimization step."""
    if not 1 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [1, {schedule.total_steps}]")
    for breakpoint_, rate in zip(schedule.breakpoints, schedule.rates):
        if step <= breakpoint_:
            return rate
    return schedule.rates[-1]


@dataclass
class AdamState:
    """First/second moment accumulators; one slot per parameter array."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(state, params, grads, learning_rate):
    """One bias-corrected Adam update, applied to params in place."""
    state.step += 1
    k = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            state.step -= 1
            raise NonFiniteError(f"non-finite gradient for parameter {i}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads, max_norm):
    """Scale gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(np.square(g))) for g in grads))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        grads = [g * factor for g in grads]
    return grads
