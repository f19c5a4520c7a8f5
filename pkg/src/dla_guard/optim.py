"""First-order optimizers updating a dict of named parameter arrays in place."""

from __future__ import annotations

import numpy as np

from .exceptions import InputError
from .tensor import Array


class SGD:
    """Stochastic gradient descent with optional momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0) -> None:
        if learning_rate < 0:
            error_msg = f"learning rate must not be negative, got {learning_rate}"
            raise InputError(error_msg)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: dict[str, Array] = {}

    def step(self, params: dict[str, Array], grads: dict[str, Array]) -> None:
        for name, grad in grads.items():
            if self.momentum:
                velocity = self._velocity.get(name, np.zeros_like(grad))
                velocity = self.momentum * velocity + grad
                self._velocity[name] = velocity
                grad = velocity
            params[name] -= (self.learning_rate * grad).astype(params[name].dtype)


class Adam:
    """Adam with bias-corrected first and second moment estimates.

    Works on any dict of arrays, so the C&W attacks reuse it for their perturbation variable.
    """

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        if learning_rate < 0:
            error_msg = f"learning rate must not be negative, got {learning_rate}"
            raise InputError(error_msg)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            error_msg = f"Adam betas must lie in [0, 1), got {beta1}, {beta2}"
            raise InputError(error_msg)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._step = 0
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}

    def reset(self) -> None:
        self._step = 0
        self._m.clear()
        self._v.clear()

    def step(self, params: dict[str, Array], grads: dict[str, Array]) -> None:
        self._step += 1
        correction1 = 1.0 - self.beta1**self._step
        correction2 = 1.0 - self.beta2**self._step
        for name, grad in grads.items():
            m = self.beta1 * self._m.get(name, np.zeros_like(grad)) + (1.0 - self.beta1) * grad
            v = self.beta2 * self._v.get(name, np.zeros_like(grad)) + (1.0 - self.beta2) * grad * grad
            self._m[name], self._v[name] = m, v
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            params[name] -= update.astype(params[name].dtype)
