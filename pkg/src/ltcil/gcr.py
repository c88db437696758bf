"""Gradient consistency regularization over an EMA of flattened gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PER_BATCH = "per_batch"
PER_EPOCH_MEAN = "per_epoch_mean"


@dataclass(frozen=True)
class GcrConfig:
    lambda_gcr: float = 0.1
    beta: float = 0.9
    reset_on_task_boundary: bool = False
    cadence: str = PER_BATCH

    def __post_init__(self):
        if self.lambda_gcr < 0:
            raise ValueError("lambda_gcr must be non-negative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.cadence not in (PER_BATCH, PER_EPOCH_MEAN):
            raise ValueError(f"unknown EMA cadence {self.cadence!r}")


@dataclass(frozen=True)
class EmaState:
    beta: float = 0.9
    g_bar: np.ndarray | None = None
    update_count: int = 0

    @property
    def initialized(self) -> bool:
        return self.g_bar is not None

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "g_bar": None if self.g_bar is None else self.g_bar.tolist(),
            "update_count": self.update_count,
        }

    @classmethod
    def from_dict(cls, d) -> "EmaState":
        g = d["g_bar"]
        return cls(d["beta"], None if g is None else np.asarray(g, dtype=np.float64),
                   d["update_count"])


def _check_length(state: EmaState, g: np.ndarray):
    if state.g_bar is not None and state.g_bar.shape != g.shape:
        raise ValueError(
            f"gradient length {g.size} does not match moving average {state.g_bar.size}"
        )


def grow_state(state: EmaState, old_positions, fill) -> EmaState:
    """Re-embed the average into a longer parameter layout.

    ``old_positions[i]`` is where coordinate ``i`` of the current average sits
    in the new layout; coordinates without history take their value from
    ``fill``, the first gradient observed in the new layout.
    """
    fill = np.asarray(fill, dtype=np.float64)
    if not state.initialized:
        return state
    g_bar = fill.copy()
    g_bar[np.asarray(old_positions)] = state.g_bar
    return EmaState(state.beta, g_bar, state.update_count)


def gcr_apply(state: EmaState, g, lambda_gcr: float) -> np.ndarray:
    """``g + lambda_gcr * (g - g_bar)``; identity while the state is uninitialized."""
    g = np.asarray(g, dtype=np.float64)
    if not state.initialized:
        return g.copy()
    _check_length(state, g)
    return g + lambda_gcr * (g - state.g_bar)


def ema_update(state: EmaState, g) -> EmaState:
    """``beta * g_bar + (1 - beta) * g``, written as ``g_bar + (1 - beta) * (g - g_bar)``
    so a constant stream is an exact fixed point."""
    g = np.asarray(g, dtype=np.float64)
    if not state.initialized:
        return EmaState(state.beta, g.copy(), state.update_count + 1)
    _check_length(state, g)
    g_bar = state.g_bar + (1.0 - state.beta) * (g - state.g_bar)
    return EmaState(state.beta, g_bar, state.update_count + 1)


def gcr_step(state: EmaState, g, config: GcrConfig):
    """Regularize with the pre-update average, then fold ``g`` into it.

    Same result as ``gcr_apply`` followed by ``ema_update``, sharing the
    deviation ``g - g_bar``.
    """
    g = np.asarray(g, dtype=np.float64)
    if not state.initialized:
        return g.copy(), ema_update(state, g)
    _check_length(state, g)
    dev = np.subtract(g, state.g_bar)
    g_reg = dev * config.lambda_gcr
    g_reg += g
    # dev becomes the new average in place: g_bar + (1 - beta) * (g - g_bar)
    dev *= 1.0 - state.beta
    dev += state.g_bar
    return g_reg, EmaState(state.beta, dev, state.update_count + 1)
