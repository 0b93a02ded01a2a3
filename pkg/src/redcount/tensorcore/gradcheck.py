"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    n_evaluations: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}, worst {worst})"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    n_probe: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The error for one input is ``max |analytic - numeric| / max |analytic|``
    over the probed coordinates, the denominator taken over the whole analytic
    gradient. ``n_probe`` limits how many coordinates per input are perturbed;
    the coordinate with the largest analytic gradient is always among them.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 inputs, got {t.dtype} for {t.name or 'input'}")
    rng = np.random.default_rng(0) if rng is None else rng

    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        return float(f(*inputs).data)

    errors: dict[str, float] = {}
    n_eval = 1
    for idx, (t, a) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        if n_probe is None or flat.size <= n_probe:
            probes = np.arange(flat.size)
        else:
            probes = rng.choice(flat.size, size=n_probe - 1, replace=False)
            probes = np.unique(np.append(probes, np.argmax(np.abs(a_flat))))
        worst = 0.0
        for i in probes:
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            n_eval += 2
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(a_flat[i] - numeric))
        scale = float(np.max(np.abs(a_flat))) if a_flat.size else 0.0
        err = worst / scale if scale > 0 else worst
        errors[t.name or f"input{idx}"] = err

    max_err = max(errors.values()) if errors else 0.0
    return GradCheckReport(passed=max_err < tol, max_rel_error=max_err, tol=tol,
                           errors=errors, n_evaluations=n_eval)
