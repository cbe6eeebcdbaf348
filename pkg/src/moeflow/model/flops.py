"""Analytic per-token FLOP counts (multiply-add = 2 FLOPs)."""

from __future__ import annotations

from .dit import SparseDiTConfig


def moe_flops_per_token(cfg: SparseDiTConfig) -> int:
    d, h = cfg.d, cfg.expert_hidden
    expert = 3 * 2 * d * h + h  # three projections plus the gating product
    router = 2 * d * cfg.n_experts
    return router + cfg.top_k * expert + (expert if cfg.shared_expert else 0)


def block_flops_per_token(cfg: SparseDiTConfig, seq_len: int) -> int:
    d = cfg.d
    proj = 4 * 2 * d * d  # q, k, v, out
    attn = 2 * 2 * seq_len * d  # logits and weighted sum
    return proj + attn + moe_flops_per_token(cfg)


def model_flops(cfg: SparseDiTConfig, n_img: int, n_txt: int) -> int:
    """Approximate forward FLOPs for one sample, dominated by the blocks."""
    n = n_img + n_txt
    total = cfg.n_blocks * n * block_flops_per_token(cfg, n)
    total += n_img * 2 * cfg.patch_dim * cfg.d * 2  # embed and head
    return total
