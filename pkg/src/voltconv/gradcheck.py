"""Finite-difference gradient checking.

The checked function maps a flat parameter vector to (scalar value,
analytic gradient vector); the checker replays it with central
differences, coordinate by coordinate, and reports the worst
normalized disagreement.
"""

from __future__ import annotations

import numpy as np


def grad_check(f, p: np.ndarray, step: float) -> float:
    """Max over coordinates of |analytic - central| / (1 + |central|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.asarray(p, dtype=np.float64)
    value, grad = f(p)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite value or gradient at the point")
    if grad.shape != p.shape:
        raise ValueError("gradient length does not match parameter length")
    worst = 0.0
    for i in range(p.shape[0]):
        hi, lo = p.copy(), p.copy()
        hi[i] += step
        lo[i] -= step
        v_hi, _ = f(hi)
        v_lo, _ = f(lo)
        if not (np.isfinite(v_hi) and np.isfinite(v_lo)):
            raise FloatingPointError(
                f"non-finite evaluation while probing coordinate {i}"
            )
        central = (v_hi - v_lo) / (2 * step)
        err = abs(grad[i] - central) / (1.0 + abs(central))
        worst = max(worst, err)
    return worst


def pack(variables) -> np.ndarray:
    """Concatenate tape variables into one flat parameter vector."""
    return np.concatenate([v.value.reshape(-1) for v in variables])


def unpack(p: np.ndarray, variables) -> None:
    """Write a flat parameter vector back into tape variables."""
    pos = 0
    for v in variables:
        size = v.value.size
        v.value = np.array(p[pos:pos + size],
                           dtype=np.float64).reshape(v.value.shape)
        pos += size
    if pos != len(p):
        raise ValueError("parameter vector length does not match variables")


def tape_function(build_loss, variables):
    """Adapt a tape-built scalar loss to the grad_check signature.

    `build_loss` reruns the forward graph from the current variable values
    and returns the scalar loss node.
    """
    def f(p):
        unpack(p, variables)
        for v in variables:
            v.zero_grad()
        loss = build_loss()
        loss.backward()
        grads = [
            np.zeros_like(v.value) if v.grad is None else v.grad
            for v in variables
        ]
        return float(loss.value), np.concatenate(
            [g.reshape(-1) for g in grads]
        )
    return f


def restrict(f, p0: np.ndarray, coords) -> "tuple[callable, np.ndarray]":
    """Freeze all but the chosen coordinates of f's parameter vector.

    Returns the restricted function and its starting point; useful to
    finite-difference a deterministic sample of a large parameter space.
    """
    coords = np.asarray(coords, dtype=np.int64)
    base = np.asarray(p0, dtype=np.float64)

    def g(q):
        p = base.copy()
        p[coords] = q
        value, grad = f(p)
        return value, np.asarray(grad)[coords]

    return g, base[coords].copy()
