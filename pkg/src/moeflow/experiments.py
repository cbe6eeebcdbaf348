"""Desk-scale experiment runners shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .conditioning import EncoderStubConfig, PromptEncoder
from .data import ToyDataset
from .distill import DistillConfig, StudentSampler, distill_loop
from .edit import EDIT_INSTRUCTIONS, EditConfig, EditTripletSource, change_stats, edit_apply, edit_train
from .flow import Stage, TrainSchedule, euler_sample, train_loop
from .model import SparseDiT, SparseDiTConfig

GAUSS_MU, GAUSS_SIGMA = 0.8, 0.3


def desk_config(d: int = 32, resolution: int = 8, precision: str = "f32") -> SparseDiTConfig:
    return SparseDiTConfig(
        d=d, n_heads=2, L_dual=1, L_single=1, n_experts=4, top_k=2, expert_hidden=2 * d,
        height=resolution, width=resolution, precision=precision,
    )


def desk_encoder(cfg: SparseDiTConfig) -> PromptEncoder:
    return PromptEncoder(EncoderStubConfig(d=cfg.d, M_t5=2, M_llm=2), cfg.dtype)


def w1_to_normal(x: np.ndarray, mu: float = GAUSS_MU, sigma: float = GAUSS_SIGMA) -> float:
    """Wasserstein-1 between the pooled per-pixel empirical marginal and N(mu, sigma^2)."""
    q = np.sort(np.asarray(x, dtype=np.float64).reshape(-1))
    ref = mu + sigma * norm.ppf((np.arange(q.size) + 0.5) / q.size)
    return float(np.abs(q - ref).mean())


# -- Gaussian fidelity ------------------------------------------------------------
@dataclass
class GaussianRun:
    model: SparseDiT
    encoder: PromptEncoder
    losses: list


def train_gaussian_teacher(steps: int = 2000, seed: int = 0, batch: int = 32, lr: float = 1e-3, out_dir=None) -> GaussianRun:
    cfg = desk_config()
    model = SparseDiT.create(cfg, seed)
    enc = desk_encoder(cfg)
    sched = TrainSchedule([Stage(cfg.height, steps, batch)], lr=lr, warmup_steps=100)
    res = train_loop(model, ToyDataset("gaussian", mu=GAUSS_MU, sigma=GAUSS_SIGMA), sched, np.random.default_rng(seed), enc, out_dir=out_dir)
    return GaussianRun(model, enc, [m["loss"] for m in res.metrics])


def sample_stats(model: SparseDiT, enc: PromptEncoder, n: int = 512, steps: int = 50, seed: int = 1) -> dict:
    res = model.cfg.height
    x = euler_sample(model, enc.batch([1] * n), steps, 1.0, np.random.default_rng(seed), (n, model.cfg.in_channels, res, res))
    return {"mean": float(x.mean()), "std": float(x.std()), "w1": w1_to_normal(x), "samples": x}


# -- distillation -------------------------------------------------------------------
def distill_gaussian(teacher: SparseDiT, enc: PromptEncoder, steps: int = 300, seed: int = 1, n_eval: int = 512, **overrides) -> dict:
    """Distill a 4-step student and compare W1 against the teacher truncated to 4 steps."""
    cfg = DistillConfig(steps=steps, student_steps=4, student_lr=2e-4, lambda_adv=0.1, batch_size=32, g_teacher=1.0)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    before = teacher.checksum()
    run = distill_loop(cfg, teacher, ToyDataset("gaussian", mu=GAUSS_MU, sigma=GAUSS_SIGMA), enc, np.random.default_rng(seed))
    res = teacher.cfg.height
    noise = np.random.default_rng(seed + 1000).standard_normal((n_eval, teacher.cfg.in_channels, res, res)).astype(teacher.cfg.dtype)
    bundle = enc.batch([1] * n_eval)
    t4 = euler_sample(teacher, bundle, 4, 1.0, None, noise.shape, x0=noise)
    t50 = euler_sample(teacher, bundle, 50, 1.0, None, noise.shape, x0=noise)
    s4 = StudentSampler(run.student, 4)(noise, bundle)
    w_t4, w_s4 = w1_to_normal(t4), w1_to_normal(s4)
    return {
        "w1_teacher4": w_t4,
        "w1_student4": w_s4,
        "w1_teacher50": w1_to_normal(t50),
        "improvement": 1.0 - w_s4 / w_t4,
        "student_mean": float(s4.mean()),
        "teacher50_mean": float(t50.mean()),
        "teacher_unchanged": teacher.checksum() == before,
        "metrics": run.metrics,
        "student": run.student,
    }


# -- editing ----------------------------------------------------------------------
def train_editor(tasks=("recolor",), pretrain_steps: int = 300, edit_steps: int = 1500, seed: int = 0, lr: float = 1e-3) -> tuple[SparseDiT, PromptEncoder]:
    cfg = desk_config()
    model = SparseDiT.create(cfg, seed)
    enc = desk_encoder(cfg)
    rng = np.random.default_rng(seed)
    train_loop(model, ToyDataset("shapes"), TrainSchedule([Stage(cfg.height, pretrain_steps, 32)], lr=lr, warmup_steps=50), rng, enc)
    edit_train(model, EditTripletSource(tasks), EditConfig(steps=edit_steps, lr=lr, tasks=tuple(tasks)), enc, rng)
    return model, enc


def edit_eval(model: SparseDiT, enc: PromptEncoder, task: str = "recolor", n: int = 100, steps: int = 50, seed: int = 7) -> dict:
    """Mask-restricted change statistics and accuracy over ``n`` fresh triplets.

    A sample counts as accurate when its mean error inside the mask is below
    half of the source-to-target change there.
    """
    rng = np.random.default_rng(seed)
    src = EditTripletSource((task,))
    Z_S, Z_T, ids, masks = src.sample(rng, n, model.cfg.height)
    out, canvas = edit_apply(model, Z_S, EDIT_INSTRUCTIONS[task], steps, 1.0, enc, rng, return_canvas=True)
    inside, outside, hits = [], [], 0
    for i in range(n):
        a, b = change_stats(Z_S[i], out[i], masks[i])
        inside.append(a)
        outside.append(b)
        change = np.abs(Z_T[i] - Z_S[i]).mean(axis=0)[masks[i]].mean()
        err = np.abs(out[i] - Z_T[i]).mean(axis=0)[masks[i]].mean()
        hits += bool(change > 0 and err < 0.5 * change)
    W = Z_S.shape[-1]
    return {
        "change_inside": float(np.mean(inside)),
        "change_outside": float(np.mean(outside)),
        "ratio": float(np.mean(outside) / np.mean(inside)),
        "accuracy": hits / n,
        "mean_abs_change": float(np.abs(out - Z_S).mean()),
        "source_clamped": bool(np.array_equal(canvas[..., :W], Z_S.astype(canvas.dtype))),
    }


# -- dedup ----------------------------------------------------------------------------
def planted_corpus(n_groups: int, dup_per_group: int, dim: int, theta: float, seed: int = 0, singles: int = 0):
    """Unit vectors in planted near-duplicate groups.

    Within a group every cosine is at least ``theta + 0.02``; across groups
    and singletons cosine stays below ``theta - 0.05``. Both margins are
    checked and a violation raises.
    Returns ``(ids, vectors, group_of)``.
    """
    rng = np.random.default_rng(seed)
    n_centres = n_groups + singles
    while True:
        C = rng.standard_normal((n_centres, dim))
        C /= np.linalg.norm(C, axis=1, keepdims=True)
        G = C @ C.T
        np.fill_diagonal(G, -1)
        if G.max() < theta - 0.3:
            break
    # members: centre + small tangent jitter; pairwise cos >= 1 - 2*eps^2 roughly
    eps = np.sqrt((1 - (theta + 0.02)) / 4)
    vecs, group = [], []
    for g in range(n_groups):
        for _ in range(dup_per_group):
            v = C[g] + eps * _unit_tangent(rng, C[g])
            vecs.append(v / np.linalg.norm(v))
            group.append(g)
    for s in range(singles):
        vecs.append(C[n_groups + s])
        group.append(-1 - s)
    order = rng.permutation(len(vecs))
    V = np.stack(vecs)[order]
    group = np.asarray(group)[order]
    G = V @ V.T
    same = group[:, None] == group[None, :]
    np.fill_diagonal(G, np.nan)
    if np.nanmin(np.where(same, G, np.inf)) < theta + 0.02 or np.nanmax(np.where(same, -np.inf, G)) > theta - 0.05:
        raise ValueError("planted corpus margins violated; use a larger dim")
    return np.arange(len(V)), V, group


def _unit_tangent(rng, c):
    r = rng.standard_normal(c.shape)
    r -= (r @ c) * c
    return r / np.linalg.norm(r)
