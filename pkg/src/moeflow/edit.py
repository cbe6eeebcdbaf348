"""In-context instruction editing on a side-by-side latent canvas.

The canvas is ``[source | target]`` along width. Training noises only the
target half and keeps the source clean at every t; sampling clamps the
source half back to the clean source after each Euler step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .conditioning import PromptEncoder
from .core import AdamW, ShapeError, Tensor, mul, sub, tsum
from .data import ShapeSpec, ToyDataset
from .flow import guided_velocity, sample_t
from .model import SparseDiT, save_model

log = logging.getLogger(__name__)

# instruction ids live above the shape class ids (1, 2)
EDIT_INSTRUCTIONS = {"recolor": 11, "remove": 12, "translate": 13, "no-op": 14}


class UnknownEditTask(KeyError):
    pass


@dataclass
class EditTriplet:
    Z_S: np.ndarray
    Z_T: np.ndarray
    instruction_id: int
    mask: np.ndarray | None = None  # source shape support


@dataclass
class EditCanvas:
    latent: np.ndarray  # [..., C, H, 2W]
    weight_map: np.ndarray | None = None  # [..., H, W] for the target half

    @property
    def width(self) -> int:
        return self.latent.shape[-1] // 2

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        return split_canvas(self.latent)


def build_edit_canvas(Z_S: np.ndarray, Z_T_or_noise: np.ndarray, weight_map: np.ndarray | None = None) -> EditCanvas:
    """Concatenate along width: left = source slot, right = target slot."""
    if Z_S.shape != Z_T_or_noise.shape:
        raise ShapeError(f"canvas halves differ: {Z_S.shape} vs {Z_T_or_noise.shape}")
    return EditCanvas(np.concatenate([Z_S, Z_T_or_noise], axis=-1), weight_map)


def split_canvas(latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    W = latent.shape[-1] // 2
    return latent[..., :W], latent[..., W:]


def edit_weight_map(Z_S: np.ndarray, Z_T: np.ndarray, tau: float = 0.1, alpha: float = 4.0) -> np.ndarray:
    """``1 + alpha * [max_c |Z_T - Z_S| > tau]`` per spatial position."""
    if tau < 0 or alpha < 0:
        raise ValueError("tau and alpha must be non-negative")
    change = np.abs(np.asarray(Z_T) - np.asarray(Z_S)).max(axis=-3)
    return 1.0 + alpha * (change > tau)


def canvas_weights(w_target: np.ndarray) -> np.ndarray:
    """Full-canvas weights: zero on the source half, ``w_target`` on the target half."""
    return np.concatenate([np.zeros_like(w_target), w_target], axis=-1)


def weighted_fm_loss(pred: Tensor, V_target, w_target: np.ndarray) -> Tensor:
    """``sum w (pred - target)^2 / sum w`` over the target half of the canvas.

    ``pred`` and ``V_target`` are full canvases ``[B, C, H, 2W]``; ``w_target``
    is ``[B, H, W]`` and broadcasts over channels.
    """
    V_target = V_target if isinstance(V_target, Tensor) else Tensor(np.asarray(V_target, dtype=pred.dtype))
    if pred.shape != V_target.shape:
        raise ShapeError(f"weighted_fm_loss shapes differ: {pred.shape} vs {V_target.shape}")
    w = canvas_weights(np.asarray(w_target, dtype=pred.dtype))
    w = np.broadcast_to(np.expand_dims(w, -3), pred.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("weight map is zero everywhere")
    err = sub(pred, V_target)
    return tsum(mul(mul(err, err), w)) * (1.0 / total)


def edit_flow_canvas(Z_S: np.ndarray, Z_T: np.ndarray, X0: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Model input canvas and velocity target for one flow-matching step.

    Only the target half travels the path; the source half is ``Z_S`` for
    every t. The source half of the target velocity is zero (it carries
    zero loss weight).
    """
    tt = np.asarray(t, dtype=Z_T.dtype).reshape((-1,) + (1,) * (Z_T.ndim - 1))
    xt = (1 - tt) * X0 + tt * Z_T
    canvas = np.concatenate([Z_S, xt], axis=-1)
    v = np.concatenate([np.zeros_like(Z_S), Z_T - X0], axis=-1)
    return canvas, v


# -- synthetic triplets ---------------------------------------------------------
def apply_edit(task: str, z: np.ndarray, mask: np.ndarray, offset: int) -> np.ndarray:
    if task == "recolor":
        out = z.copy()
        out[..., mask] = -z[..., mask]
        return out
    if task == "remove":
        out = z.copy()
        out[..., mask] = 0.0
        return out
    if task == "translate":
        return np.roll(z, offset, axis=-1)
    if task == "no-op":
        return z.copy()
    raise UnknownEditTask(f"unknown edit task {task!r}; choose from {', '.join(EDIT_INSTRUCTIONS)}")


class EditTripletSource:
    """Batches of (source, target, instruction) built on the shapes dataset."""

    def __init__(self, tasks=("recolor",), channels: int = 1, shape_spec: ShapeSpec | None = None):
        for task in tasks:
            if task not in EDIT_INSTRUCTIONS:
                raise UnknownEditTask(f"unknown edit task {task!r}; choose from {', '.join(EDIT_INSTRUCTIONS)}")
        self.tasks = tuple(tasks)
        self.shapes = ToyDataset("shapes", channels=channels, shape_spec=shape_spec or ShapeSpec(class_regions=False))

    def sample(self, rng: np.random.Generator, n: int, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        base = self.shapes.sample(rng, n, size)
        tasks = [self.tasks[int(i)] for i in rng.integers(0, len(self.tasks), size=n)]
        Z_T = np.stack([apply_edit(task, z, m, size // 4) for task, z, m in zip(tasks, base.latents, base.masks)])
        ids = np.array([EDIT_INSTRUCTIONS[task] for task in tasks], dtype=np.int64)
        return base.latents, Z_T, ids, base.masks


def synth_edit_triplets(task: str, rng: np.random.Generator, size: int = 8, channels: int = 1) -> Iterator[EditTriplet]:
    src = EditTripletSource((task,), channels)
    while True:
        Z_S, Z_T, ids, masks = src.sample(rng, 1, size)
        yield EditTriplet(Z_S[0], Z_T[0], int(ids[0]), masks[0])


# -- training and inference -----------------------------------------------------
@dataclass
class EditConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 50
    tau: float = 0.1
    alpha: float = 4.0
    p_drop: float = 0.1
    resolution: int = 8
    tasks: tuple[str, ...] = ("recolor",)


@dataclass
class EditTrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def edit_train(
    model: SparseDiT,
    source: EditTripletSource,
    cfg: EditConfig,
    encoder: PromptEncoder,
    rng: np.random.Generator,
    out_dir: str | Path | None = None,
    log_every: int = 0,
) -> EditTrainResult:
    """Fine-tune ``model`` in place with the change-weighted flow loss."""
    opt = AdamW(model.params, lr=cfg.lr, warmup_steps=cfg.warmup_steps)
    dtype = model.cfg.dtype
    result = EditTrainResult()
    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "edit_metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "loss", "lr"))
    try:
        for step in range(1, cfg.steps + 1):
            Z_S, Z_T, ids, _ = source.sample(rng, cfg.batch_size, cfg.resolution)
            Z_S, Z_T = Z_S.astype(dtype), Z_T.astype(dtype)
            ids = np.where(rng.random(cfg.batch_size) < cfg.p_drop, 0, ids)
            X0 = rng.standard_normal(Z_T.shape).astype(dtype)
            t = sample_t(rng, cfg.batch_size)
            canvas, v = edit_flow_canvas(Z_S, Z_T, X0, t)
            w = edit_weight_map(Z_S, Z_T, cfg.tau, cfg.alpha)
            leaves = model.leaves()
            res = model.forward(canvas, encoder.batch(ids), t, leaves)
            loss = weighted_fm_loss(res.velocity, v, w)
            if res.aux_loss is not None:
                loss = loss + res.aux_loss
            loss.backward()
            lr = opt.step({k: p.grad for k, p in leaves.items() if p.grad is not None})
            result.metrics.append({"step": step, "loss": float(loss.data), "lr": lr})
            if writer is not None:
                writer.writerow([step, repr(float(loss.data)), repr(lr)])
            if log_every and step % log_every == 0:
                log.info("edit step=%d loss=%.6f lr=%.3g", step, float(loss.data), lr)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        result.checkpoint = out / "edit.ckpt"
        save_model(result.checkpoint, model, "edit", {"tasks": list(cfg.tasks)})
    return result


def edit_apply(
    model: SparseDiT,
    Z_S: np.ndarray,
    instruction_id,
    steps: int,
    g: float,
    encoder: PromptEncoder,
    rng: np.random.Generator,
    return_canvas: bool = False,
):
    """Generate the edited target for ``Z_S [B, C, H, W]`` (or a single latent)."""
    single = Z_S.ndim == 3
    Z_S = np.asarray(Z_S[None] if single else Z_S, dtype=model.cfg.dtype)
    B = Z_S.shape[0]
    ids = np.broadcast_to(np.asarray(instruction_id), (B,))
    bundle = encoder.batch(ids)
    null = encoder.null(B)
    x = np.concatenate([Z_S, rng.standard_normal(Z_S.shape).astype(Z_S.dtype)], axis=-1)
    W = Z_S.shape[-1]
    dt = 1.0 / steps
    for i in range(steps):
        t = np.full(B, i / steps)
        x = x + dt * guided_velocity(model, x, bundle, null, t, g)
        x[..., :W] = Z_S
    out = x[..., W:]
    if single:
        out, x = out[0], x[0]
    return (out, x) if return_canvas else out


def change_stats(Z_S: np.ndarray, out: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Mean absolute change inside and outside the (spatial) mask."""
    diff = np.abs(out - Z_S).mean(axis=-3)
    inside = float(diff[mask].mean()) if mask.any() else 0.0
    outside = float(diff[~mask].mean()) if (~mask).any() else 0.0
    return inside, outside
