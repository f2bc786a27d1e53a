"""Optimizers and annealing schedules for the training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericsError

__all__ = [
    "AdamState", "AdamaxState", "adam_step", "adamax_step",
    "Schedule", "constant", "linear", "step_decay", "schedule_eval",
]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class AdamaxState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _check_grads(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if np.any(np.isnan(g)):
            raise NumericsError(f"NaN gradient for parameter '{name}'")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-3) -> None:
    """First/second-moment update with bias correction, in place.

    Gradient-descent convention: params move against the gradient.
    """
    _check_grads(grads)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def adamax_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamaxState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adam variant with an infinity-norm second moment (no bias correction
    needed on u)."""
    _check_grads(grads)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        u = state.u.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        np.maximum(beta2 * u, np.abs(g), out=u)
        p -= lr * (m / bc1) / (u + eps)


def optimizer_arrays(state) -> dict[str, np.ndarray]:
    """Flatten optimizer state for checkpoint embedding."""
    out = {"opt/t": np.asarray(float(state.t))}
    slot_names = ("m", "v") if isinstance(state, AdamState) else ("m", "u")
    for slot in slot_names:
        for name, value in getattr(state, slot).items():
            out[f"opt/{slot}/{name}"] = value
    return out


def restore_optimizer(state, arrays: dict[str, np.ndarray]) -> None:
    state.t = int(arrays.get("opt/t", np.zeros(())))
    for key, value in arrays.items():
        parts = key.split("/")
        if len(parts) >= 3 and parts[0] == "opt" and parts[1] in ("m", "v", "u"):
            getattr(state, parts[1])["/".join(parts[2:])] = value.copy()


# ---------------------------------------------------------------------------
# schedules: pure functions of the step counter, replayable

@dataclass(frozen=True)
class Schedule:
    kind: str                        # constant | linear | step-decay
    start: float = 0.0
    end: float = 0.0
    steps: int = 0
    factor: float = 1.0
    milestones: tuple[int, ...] = ()


def constant(value: float) -> Schedule:
    return Schedule("constant", start=value)


def linear(start: float, end: float, steps: int) -> Schedule:
    if steps < 1:
        raise ValueError("linear schedule needs steps >= 1")
    return Schedule("linear", start=start, end=end, steps=steps)


def step_decay(initial: float, factor: float, milestones) -> Schedule:
    return Schedule("step-decay", start=initial, factor=factor,
                    milestones=tuple(sorted(int(m) for m in milestones)))


def schedule_eval(schedule: Schedule, step: int) -> float:
    """Value at a step; linear clamps at its end, decay counts milestones."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.kind == "constant":
        return schedule.start
    if schedule.kind == "linear":
        frac = min(step / schedule.steps, 1.0)
        return schedule.start + (schedule.end - schedule.start) * frac
    if schedule.kind == "step-decay":
        passed = sum(1 for m in schedule.milestones if step >= m)
        return schedule.start * schedule.factor ** passed
    raise ValueError(f"unknown schedule kind '{schedule.kind}'")
