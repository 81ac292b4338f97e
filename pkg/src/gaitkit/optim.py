"""Adam parameter updates over named parameter tensors."""

from __future__ import annotations

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """A parameter's gradient contained NaN or Inf; the update was aborted."""

    def __init__(self, param_name):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name


class Adam:
    """Standard Adam with bias correction.

    `params` is a dict of name -> Tensor; moments are kept congruent to each
    parameter and `step_count` increases by exactly 1 per update.  A missing
    gradient is treated as zero (the parameter stays put).
    """

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.second_moment = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        # Validate every gradient before touching any state, so a bad batch
        # leaves parameters and moments untouched.
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
