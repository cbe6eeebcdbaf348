"""Sparse mixture-of-experts feed-forward with top-k routing and a shared expert."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Tensor, getitem, matmul, mul, reshape, scatter_rows, softmax, swiglu, tsum


class RoutingConfigError(ValueError):
    pass


@dataclass
class RouterDecision:
    indices: np.ndarray  # (n, k) selected experts, highest probability first
    gates: np.ndarray  # (n, k) renormalized gate weights
    probs: np.ndarray  # (n, E) pre-selection softmax


@dataclass
class MoEOutput:
    out: Tensor
    decision: RouterDecision
    aux_loss: Tensor


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k by probability per row; ties go to the lower expert index."""
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def expert_weights(params: dict[str, Tensor], prefix: str) -> tuple[Tensor, Tensor, Tensor]:
    return params[prefix + ".gate"], params[prefix + ".up"], params[prefix + ".down"]


def moe_forward(
    tokens: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    n_experts: int,
    top_k: int,
    shared: bool,
    balance_coeff: float = 0.0,
) -> MoEOutput:
    """Route each token of ``[..., n, d]`` to ``top_k`` of ``n_experts`` SwiGLU experts.

    Output per token is ``sum_i g_i expert_i(x) + shared(x)``; the shared
    expert is unconditional with weight 1.
    """
    if not 1 <= top_k <= n_experts:
        raise RoutingConfigError(f"top_k={top_k} must lie in [1, n_experts={n_experts}]")
    lead = tokens.shape[:-1]
    d = tokens.shape[-1]
    x = reshape(tokens, (-1, d))
    n = x.shape[0]

    probs = softmax(matmul(x, params[prefix + ".router"]), axis=-1)
    idx = top_k_indices(probs.data, top_k)
    rows = np.arange(n)[:, None]
    mask = np.zeros((n, n_experts), dtype=probs.dtype)
    mask[rows, idx] = 1.0
    selected = mul(probs, mask)
    gates = selected / tsum(selected, axis=-1, keepdims=True)

    out = None
    for e in range(n_experts):
        members = np.flatnonzero(mask[:, e])
        if members.size == 0:
            continue
        y = swiglu(getitem(x, members), *expert_weights(params, f"{prefix}.expert{e}"))
        g = getitem(gates, (members, slice(e, e + 1)))
        part = scatter_rows(mul(y, g), members, n)
        out = part if out is None else out + part
    if shared:
        s = swiglu(x, *expert_weights(params, f"{prefix}.shared"))
        out = s if out is None else out + s

    # fraction of routed assignments per expert times mean router probability
    frac = mask.sum(axis=0) / (n * top_k)
    aux = tsum(mul(probs.mean(axis=0), frac)) * (balance_coeff * n_experts)

    decision = RouterDecision(idx, gates.data[rows, idx], probs.data)
    return MoEOutput(reshape(out, lead + (d,)), decision, aux)

