"""
optim.py
--------
Adam (adaptive moment estimation) over a flat parameter vector.

    m_t = b1 * m_{t-1} + (1 - b1) * g
    v_t = b2 * v_{t-1} + (1 - b2) * g^2
    theta_t = theta_{t-1} - lr * m_hat / (sqrt(v_hat) + eps)
"""

from dataclasses import dataclass, field

import numpy as np

from core.errors import ShapeError


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


@dataclass
class Adam:
    """Minimizer holding its own moment state."""
    learning_rate: float = 0.05
    state: AdamState = field(default=None)

    def step(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        """Return the updated parameter vector (params itself is left untouched)."""
        if self.state is None:
            self.state = AdamState.zeros(params.size)
        s = self.state
        if gradient.shape != s.m.shape or params.shape != s.m.shape:
            raise ShapeError(
                f"Adam moments have shape {s.m.shape}, got params {params.shape} "
                f"and gradient {gradient.shape}"
            )

        s.t += 1
        s.m = s.beta1 * s.m + (1 - s.beta1) * gradient
        s.v = s.beta2 * s.v + (1 - s.beta2) * gradient ** 2

        m_hat = s.m / (1 - s.beta1 ** s.t)
        v_hat = s.v / (1 - s.beta2 ** s.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + s.eps)
