"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from kpnf.diffcore.node import DiffNode, backward, no_grad, zero_grad
from kpnf.errors import NonDeterministicFunctionError


@dataclass
class GradCheckReport:
    """Outcome of one grad_check run.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """

    max_rel_error: float
    tolerance: float
    passed: bool
    block_errors: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"grad_check {status}: max rel error {self.max_rel_error:.3e} (tol {self.tolerance:.1e})"]
        for name, err in sorted(self.block_errors.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[Mapping[str, DiffNode]], DiffNode],
    params: Mapping[str, DiffNode],
    eps: float = 1e-4,
    tolerance: float = 1e-3,
    max_coords_per_block: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() gradients of scalar f against central differences.

    Large parameter blocks are subsampled (>= ``max_coords_per_block``
    coordinates, chosen deterministically from ``seed``). f must be
    deterministic: two forward passes are compared bitwise first.
    """
    with no_grad():
        y1 = f(params)
        y2 = f(params)
    if not np.array_equal(y1.values, y2.values):
        raise NonDeterministicFunctionError("two forward passes of f disagree bitwise")

    zero_grad(params.values())
    out = f(params)
    backward(out)

    rng = np.random.default_rng(seed)
    block_errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.gradient if p.gradient is not None else np.zeros_like(p.values)
        n = p.values.size
        if n > max_coords_per_block:
            coords = np.sort(rng.choice(n, size=max_coords_per_block, replace=False))
        else:
            coords = np.arange(n)
        worst = 0.0
        flat = p.values.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = float(f(params).values)
            flat[i] = orig - eps
            with no_grad():
                lo = float(f(params).values)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        block_errors[name] = worst

    max_err = max(block_errors.values()) if block_errors else 0.0
    return GradCheckReport(
        max_rel_error=max_err,
        tolerance=tolerance,
        passed=max_err < tolerance,
        block_errors=block_errors,
    )
