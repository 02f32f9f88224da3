"""Adam with the exponentially decayed, floored learning rate used for all training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_init: float = 1e-2
    lr_decay: float = 0.999
    lr_floor: float = 7e-4

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)

    @property
    def lr(self) -> float:
        """Learning rate that the next update will use."""
        return learning_rate(self.step, self.lr_init, self.lr_decay, self.lr_floor)


def learning_rate(steps: int, init: float = 1e-2, decay: float = 0.999, floor: float = 7e-4) -> float:
    return max(floor, init * decay**steps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One Adam update. Returns new parameters; ``state`` is advanced in place.

    The update at step k uses ``lr(k)``; afterwards ``state.lr`` reports
    ``max(floor, init * decay**(k+1))``.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at step {state.step}")
    lr = state.lr
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state
