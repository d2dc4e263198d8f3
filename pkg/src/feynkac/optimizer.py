"""Adam with bias correction over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ContractViolation


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite gradient entry at parameter index {index}: {value}")
        self.index = index
        self.value = value


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # optional piecewise-constant schedule: lr_values[i] applies after lr_boundaries[i - 1] steps
    lr_boundaries: tuple = ()
    lr_values: tuple = ()

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation("betas must lie in [0, 1)")
        if not (self.lr > 0 and self.eps > 0):
            raise ContractViolation("lr and eps must be positive")
        if self.lr_values and len(self.lr_values) != len(self.lr_boundaries) + 1:
            raise ContractViolation("need exactly one more lr value than boundaries")

    @classmethod
    def fresh(cls, size: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), **hyper)

    def current_lr(self) -> float:
        """Learning rate used by the next step."""
        if not self.lr_values:
            return self.lr
        i = int(np.searchsorted(np.asarray(self.lr_boundaries), self.t, side="right"))
        return float(self.lr_values[i])


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> None:
    """In-place Adam update of ``params``; advances ``state``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractViolation(
            f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    bad = ~np.isfinite(grads)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteGradientError(i, float(grads[i]))
    lr = state.current_lr()
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
