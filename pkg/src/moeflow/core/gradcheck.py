"""Central finite-difference oracles for gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, finite_checks, no_grad


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    out = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def analytic_grads(fn: Callable[..., Tensor], inputs: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    fn(*leaves).backward()
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def reference_grads(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``fn(*tensors)``, always in float64."""
    ref = [x.astype(np.float64) for x in inputs]

    def f():
        with no_grad(), finite_checks(False):
            return float(fn(*[Tensor(r) for r in ref]).data)

    return [numeric_grad(f, x, h) for x in ref]


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: list[np.ndarray],
    h: float = 1e-6,
    reference: list[np.ndarray] | None = None,
) -> list[float]:
    """Relative error of autodiff gradients against finite differences, per input.

    The analytic pass runs at each input's own dtype; the reference is taken
    in float64 on the same values and may be supplied precomputed.
    """
    grads = analytic_grads(fn, inputs)
    if reference is None:
        reference = reference_grads(fn, inputs, h)
    return [rel_error(g, r) for g, r in zip(grads, reference)]
