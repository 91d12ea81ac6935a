"""Shared test oracles: central finite differences and gradient comparison."""

from __future__ import annotations

import numpy as np

from credit_migration import tensor as tt

FD_STEP = 1e-3
FD_TOL = 1e-4
FD_FLOOR = 1e-8


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(build_loss, array: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of build_loss() w.r.t. one leaf array.

    `build_loss` must rebuild the graph from scratch on every call and read
    the current contents of `array` (mutated in place here).
    """
    grad = np.zeros_like(array)
    flat = array.ravel()
    grad_flat = grad.ravel()
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        up = build_loss().item()
        flat[i] = original - step
        down = build_loss().item()
        flat[i] = original
        grad_flat[i] = (up - down) / (2.0 * step)
    return grad


def check_gradients(build_loss, leaves, tol: float = FD_TOL) -> float:
    """Compare reverse-mode gradients of every leaf against finite differences.

    Returns the worst relative error seen; asserts it is under `tol`.
    """
    loss = build_loss()
    tt.backward(loss)
    worst = 0.0
    analytic = []
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        analytic.append(leaf.grad.copy())
    tt.reset_gradients(leaves)
    for leaf, grad in zip(leaves, analytic):
        numeric = numeric_gradient(build_loss, leaf.data)
        worst = max(worst, max_rel_error(grad, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
