"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def finite_diff_check(op, inputs, tolerance=1e-6, seed=0):
    """Compare analytic gradients of `op` against central differences.

    `op` maps one or more Tensors to a Tensor.  Non-scalar outputs are
    contracted with a fixed random projection so a single scalar is
    differentiated.  Gradients are checked for every input marked
    requires_grad.  Step size: 1e-3 in float32, 1e-6 in float64.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    wrt = [t for t in inputs if t.requires_grad]
    if not wrt:
        raise ValueError("finite_diff_check needs at least one requires_grad input")

    out = op(*inputs)
    step = 1e-3 if out.dtype == np.float32 else 1e-6
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape).astype(out.dtype)

    for t in inputs:
        t.grad = None
    out.backward(proj)

    def scalar(*tensors):
        return float(np.sum(op(*tensors).data * proj))

    max_rel = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar(*inputs)
            flat[i] = orig - step
            fm = scalar(*inputs)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            # the 1e-2 floor keeps difference-quotient roundoff on
            # near-zero gradient entries from reading as gradient error
            denom = max(abs(a), abs(numeric), 1e-2)
            max_rel = max(max_rel, abs(a - numeric) / denom)

    return GradCheckReport(max_rel_err=max_rel, tolerance=tolerance)
