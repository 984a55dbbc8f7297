"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteError, ShapeError


class Adam:
    """Adam with bias correction; moments are kept per parameter name.

    Parameter tensors are updated in place between forward passes, which is
    safe because each Tape only ever sees the values captured during its own
    forward pass.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update from a name -> gradient map."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam_step: gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}"
                )
            if g.size and not (np.isfinite(g.min()) and np.isfinite(g.max())):
                raise NonFiniteError(
                    f"adam_step: non-finite gradient for parameter '{name}'"
                )
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
