"""Quantization-level policies.

The time-adaptive rule doubles the level once the running-average training
loss stops improving over ``phi`` rounds; the client-adaptive rule splits a
level across a cohort in proportion to ``w ** (2/3)`` while holding the
expected accumulation variance fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ControllerParams:
    psi: float = 0.9
    phi: int = 50
    q_min: int = 1
    q_max: int = 8

    def __post_init__(self):
        if not 0.0 <= self.psi < 1.0:
            raise ValueError(f"psi must lie in [0, 1), got {self.psi}")
        if self.phi < 1:
            raise ValueError(f"phi must be >= 1, got {self.phi}")
        if not 1 <= self.q_min <= self.q_max:
            raise ValueError(f"need 1 <= q_min <= q_max, got {self.q_min}, {self.q_max}")


@dataclass
class ControllerState:
    params: ControllerParams
    loss_history: list[float] = field(default_factory=list)
    level_history: list[int] = field(default_factory=list)

    @property
    def round(self) -> int:
        return len(self.level_history)

    @property
    def current_level(self) -> int:
        return self.level_history[-1] if self.level_history else self.params.q_min

    @property
    def running_loss(self) -> float | None:
        return self.loss_history[-1] if self.loss_history else None


def update_running_loss(state: ControllerState, loss: float) -> ControllerState:
    """Append ``psi * previous + (1 - psi) * loss`` (or ``loss`` in round 0)."""
    if not math.isfinite(loss):
        raise ValueError(f"loss must be finite, got {loss}")
    if not state.loss_history:
        state.loss_history.append(float(loss))
    else:
        psi = state.params.psi
        state.loss_history.append(psi * state.loss_history[-1] + (1.0 - psi) * float(loss))
    return state


def record_global_loss(state: ControllerState, loss: float) -> ControllerState:
    """Append an exact (unsmoothed) global loss, as the full-participation baseline uses."""
    if not math.isfinite(loss):
        raise ValueError(f"loss must be finite, got {loss}")
    state.loss_history.append(float(loss))
    return state


def _doubling_rule(t: int, losses: Sequence[float], levels: Sequence[int], params: ControllerParams) -> int:
    if t == 0:
        return params.q_min
    if len(losses) < t:
        raise ValueError(f"round {t} needs {t} loss entries, have {len(losses)}")
    prev = levels[t - 1]
    phi = params.phi
    if (
        t > phi
        and losses[t - 1] >= losses[t - phi]
        and 2 * prev <= params.q_max
        and prev == levels[t - phi]
    ):
        return 2 * prev
    return prev


def next_level_time_adaptive(state: ControllerState) -> int:
    """Choose and record the level for round ``state.round``."""
    q = _doubling_rule(state.round, state.loss_history, state.level_history, state.params)
    state.level_history.append(q)
    return q


def next_level_adaquantfl_baseline(state: ControllerState) -> int:
    """Doubling rule driven by the exact global loss.

    A stand-in for AdaQuantFL that reproduces only its defining cost: the
    global loss must come from every client, so the caller trains and uploads
    on all clients each round. ``state.loss_history`` must hold exact
    global losses recorded with :func:`record_global_loss`.
    """
    return next_level_time_adaptive(state)


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty cohort")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("cohort weights must be positive and finite")
    return w / w.sum()


def optimal_client_levels(weights: Sequence[float], q: float) -> np.ndarray:
    """Real-valued levels minimizing their sum at the variance of static level ``q``."""
    if q <= 0:
        raise ValueError(f"level must be positive, got {q}")
    w = normalize_weights(weights)
    w23 = w ** (2.0 / 3.0)
    a = w23.sum()
    b = np.sum(w**2) / q**2
    return math.sqrt(a / b) * w23


def allocate_client_levels(weights: Sequence[float], q: int) -> list[int]:
    """Integer per-client levels ``max(1, round(optimal))``; weights are renormalized."""
    real = optimal_client_levels(weights, q)
    return [max(1, int(round(x))) for x in real]
