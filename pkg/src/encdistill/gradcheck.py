"""Central finite-difference oracle for the autodiff primitives.

Both routes run on float64 copies of the (float32) leaf values by default:
an elementwise relative bound of 1e-4 is below float32 cancellation noise
for entries that are small compared with their neighbours, so the check
would otherwise measure rounding instead of the backward rules.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def analytic_gradients(fn: Callable[[], ad.Tensor], leaves: Sequence[ad.Tensor],
                       dtype=None) -> list[np.ndarray]:
    """Gradients from the tape; ``dtype`` temporarily recasts the leaves."""
    saved = [leaf.data for leaf in leaves]
    try:
        if dtype is not None:
            for leaf in leaves:
                leaf.data = leaf.data.astype(dtype)
        for leaf in leaves:
            leaf.requires_grad = True
            leaf.zero_grad()
        with ad.precision(dtype or ad.DEFAULT_DTYPE), ad.Tape() as tape:
            out = fn()
        ad.backward(tape, out)
        grads = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.astype(np.float64)
                 for leaf in leaves]
    finally:
        for leaf, data in zip(leaves, saved):
            leaf.data = data
            leaf.zero_grad()
    return grads


def numerical_gradients(fn: Callable[[], ad.Tensor], leaves: Sequence[ad.Tensor],
                        eps: float = 1e-6, dtype=np.float64) -> list[np.ndarray]:
    """Central differences with step ``eps * max(1, |x|)`` for every leaf entry."""
    saved = [leaf.data for leaf in leaves]
    grads = []
    try:
        for leaf in leaves:
            leaf.data = leaf.data.astype(dtype)
        with ad.precision(dtype):
            for leaf in leaves:
                g = np.zeros(leaf.shape, dtype=np.float64)
                flat = leaf.data.reshape(-1)
                for i in range(flat.size):
                    x0 = flat[i]
                    h = eps * max(1.0, abs(float(x0)))
                    flat[i] = x0 + h
                    up = float(fn().data)
                    flat[i] = x0 - h
                    down = float(fn().data)
                    flat[i] = x0
                    g.reshape(-1)[i] = (up - down) / (2 * h)
                grads.append(g)
    finally:
        for leaf, data in zip(leaves, saved):
            leaf.data = data
    return grads


def check_gradients(fn: Callable[[], ad.Tensor], leaves: Sequence[ad.Tensor],
                    rtol: float = 1e-4, eps: float = 1e-6,
                    small: float = 1e-6, analytic_dtype=np.float64) -> GradCheckReport:
    """Compare analytic and numerical gradients entry by entry.

    Entries whose analytic magnitude is below ``small`` are compared on
    absolute error against ``rtol``; all others on relative error.
    """
    analytic = analytic_gradients(fn, leaves, dtype=analytic_dtype)
    numeric = numerical_gradients(fn, leaves, eps=eps)
    failures = []
    max_rel = max_abs = 0.0
    checked = 0
    for leaf, a, n in zip(leaves, analytic, numeric):
        for idx in np.ndindex(a.shape):
            checked += 1
            err = abs(a[idx] - n[idx])
            max_abs = max(max_abs, err)
            if abs(a[idx]) < small:
                bad = err >= rtol
            else:
                rel = err / max(abs(a[idx]), abs(n[idx]))
                max_rel = max(max_rel, rel)
                bad = rel >= rtol
            if bad:
                failures.append((leaf.name or f"node{leaf.node_id}", idx, a[idx], n[idx]))
    return GradCheckReport(max_rel, max_abs, checked, failures)
