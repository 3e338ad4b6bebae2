"""
Adam over named parameter arrays.

Shared by pairwise registration (control-point values) and network training
(layer weights), so both follow one update rule.
"""

from typing import Dict, Mapping

import numpy as np

from utils.errors import ConfigError


class Adam:
    """
    Adam optimizer keeping first/second moments per parameter name.

    Args:
        lr: Step size
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        if not eps > 0:
            raise ConfigError(f"eps must be > 0, got {eps}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated copies of `params`; names missing from `grads` are left unchanged."""
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, value in params.items():
            grad = grads.get(name)
            if grad is None:
                updated[name] = value
                continue
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != np.shape(value):
                raise ConfigError(f"gradient for {name} has shape {grad.shape}, parameter {np.shape(value)}")
            m = self._m.get(name, np.zeros_like(grad))
            v = self._v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._m[name], self._v[name] = m, v
            step = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            updated[name] = (np.asarray(value, dtype=np.float64) - step).astype(np.asarray(value).dtype)
        return updated

    def decay(self, factor: float) -> None:
        """Multiply the step size by `factor`."""
        self.lr *= float(factor)

    def reset(self) -> None:
        self.t = 0
        self._m.clear()
        self._v.clear()
