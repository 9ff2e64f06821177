"""Stateless SGD (client side) and stateful Adam / momentum-SGD (server side).

All steps are pure functions over flat parameter vectors: they return new
vectors and new optimizer state, never mutating their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0

    def __post_init__(self) -> None:
        # learning_rate 0 is allowed as an explicit "frozen" switch.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), t=0)

    def copy(self) -> "AdamState":
        return AdamState(m=self.m.copy(), v=self.v.copy(), t=self.t)


def _check_step_args(params: np.ndarray, grad: np.ndarray) -> None:
    if params.shape != grad.shape:
        raise ValueError(f"params shape {params.shape} != grad shape {grad.shape}")
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient")


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    cfg: SgdConfig,
    velocity: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """One (momentum-)SGD step; returns (new params, new velocity).

    With momentum m: velocity' = m * velocity + grad, params' = params - lr * velocity'.
    With momentum 0 the velocity passes through untouched.
    """
    _check_step_args(params, grad)
    if cfg.momentum == 0.0:
        return params - cfg.learning_rate * grad, velocity
    vel = grad.copy() if velocity is None else cfg.momentum * velocity + grad
    return params - cfg.learning_rate * vel, vel


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    cfg: AdamConfig,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; returns (new params, new state)."""
    _check_step_args(params, grad)
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ValueError("optimizer state length does not match parameters")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new_params = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new_params, AdamState(m=m, v=v, t=t)
