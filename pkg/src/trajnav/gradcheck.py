"""Central finite-difference gradient checking for modules built on Tensor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class GradCheckResult:
    checked: int
    passed: int
    worst: float

    @property
    def pass_fraction(self):
        return self.passed / max(self.checked, 1)


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn, params, rng, samples_per_param=8, h=1e-4, tol=1e-3):
    """Compare backward() gradients of ``loss_fn()`` against central differences
    at randomly sampled coordinates of each tensor in ``params``.

    Tensors should hold float64 data for meaningful results.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    checked = passed = 0
    worst = 0.0
    with T.no_grad():
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            k = min(samples_per_param, flat.size)
            for idx in rng.choice(flat.size, size=k, replace=False):
                old = flat[idx]
                flat[idx] = old + h
                up = float(loss_fn().data)
                flat[idx] = old - h
                down = float(loss_fn().data)
                flat[idx] = old
                err = relative_error(float(g.reshape(-1)[idx]), (up - down) / (2 * h))
                worst = max(worst, err)
                checked += 1
                passed += err <= tol
    return GradCheckResult(checked, passed, worst)
