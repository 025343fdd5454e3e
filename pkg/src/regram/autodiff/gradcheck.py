"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    checked: int
    passed: int
    worst: tuple[str, tuple[int, ...], float, float]  # name, index, analytic, numeric

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.checked if self.checked else 1.0


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    skip_below: float = 1e-8,
) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` with central differences, coordinate by coordinate.

    ``loss_fn`` must be deterministic and read the current values of ``params``.
    Coordinates where the analytic and numeric gradients are both below
    ``skip_below`` in magnitude sit under the difference quotient's roundoff
    floor and are skipped.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    checked = passed = 0
    worst = ("", (), 0.0, 0.0)
    worst_err = -1.0
    for name, t in params.items():
        g = grads.get(t, np.zeros_like(t.data))
        for idx in np.ndindex(t.data.shape):
            old = t.data[idx]
            t.data[idx] = old + h
            up = loss_fn().item()
            t.data[idx] = old - h
            down = loss_fn().item()
            t.data[idx] = old
            num = (up - down) / (2 * h)
            if abs(g[idx]) < skip_below and abs(num) < skip_below:
                continue
            err = relative_error(float(g[idx]), num)
            checked += 1
            passed += err < rtol
            if err > worst_err:
                worst_err, worst = err, (name, idx, float(g[idx]), num)
    return GradCheckResult(checked, passed, worst)
