"""Composite kernels built from the primitive ops."""

from __future__ import annotations

import math

from .tensor import ShapeError, Tensor, matmul, mul, silu, softmax, swapaxes


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """``(silu(x W_gate) * (x W_up)) W_down`` over the last axis."""
    if w_gate.shape != w_up.shape or w_gate.shape[1] != w_down.shape[0]:
        raise ShapeError(
            f"swiglu weights not conformal: gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}"
        )
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v for layouts ``[..., heads, n, d_head]``."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes differ: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, swapaxes(k, -1, -2)) * scale
    return matmul(softmax(logits, axis=-1), v)
