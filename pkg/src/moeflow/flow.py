"""Latent flow matching on the linear path, guidance, Euler sampling, training."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .conditioning import ConditioningBundle, PromptEncoder, stack_bundles
from .core import AdamW, NonFiniteError, ShapeError, Tensor, mean, square, sub
from .model import SparseDiT, save_model
from .model.checkpoint import save_arrays

log = logging.getLogger(__name__)

T_SAMPLERS = ("uniform", "logit-normal")
METRIC_FIELDS = ("step", "stage", "loss", "lr", "aux_loss")


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message if dump_path is None else f"{message} (dump: {dump_path})")
        self.dump_path = dump_path


@dataclass
class FlowSample:
    X0: np.ndarray
    X1: np.ndarray
    t: np.ndarray  # (B,) or scalar
    Xt: np.ndarray
    V_target: np.ndarray


def _bcast_t(t: np.ndarray, ref: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=ref.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ref.ndim - t.ndim))


def path_point(X0: np.ndarray, X1: np.ndarray, t) -> np.ndarray:
    tt = _bcast_t(t, X1)
    return (1 - tt) * X0 + tt * X1


def sample_t(rng: np.random.Generator, n: int, sampler: str = "uniform") -> np.ndarray:
    if sampler == "uniform":
        return rng.random(n)
    if sampler == "logit-normal":
        return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
    raise ValueError(f"unknown t sampler {sampler!r}")


def make_flow_sample(X1: np.ndarray, rng: np.random.Generator, t_sampler: str = "uniform", t=None, X0=None) -> FlowSample:
    """Draw noise and time for a batch ``X1 [B, ...]`` and place it on the path."""
    X1 = np.asarray(X1)
    if X0 is None:
        X0 = rng.standard_normal(X1.shape).astype(X1.dtype)
    if t is None:
        t = sample_t(rng, X1.shape[0], t_sampler) if X1.ndim > 0 else sample_t(rng, 1, t_sampler)[0]
    t = np.asarray(t, dtype=X1.dtype)
    return FlowSample(X0, X1, t, path_point(X0, X1, t), X1 - X0)


def fm_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared velocity error."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"fm_loss shapes differ: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


def cfg_velocity(u_cond: np.ndarray, u_uncond: np.ndarray, g: float) -> np.ndarray:
    return u_uncond + g * (u_cond - u_uncond)


VelocityFn = Callable[[np.ndarray, ConditioningBundle, np.ndarray], np.ndarray]


def guided_velocity(model: VelocityFn, x: np.ndarray, bundle, null, t, g: float) -> np.ndarray:
    """CFG velocity; skips the unused branch when g is exactly 0 or 1."""
    if g == 1.0:
        return model(x, bundle, t)
    if g == 0.0:
        return model(x, null, t)
    B = x.shape[0]
    both = stack_bundles(_unstack(bundle, B) + _unstack(null, B))
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    u = model(np.concatenate([x, x]), both, np.concatenate([tt, tt]))
    return cfg_velocity(u[:B], u[B:], g)


def _unstack(b: ConditioningBundle, B: int) -> list[ConditioningBundle]:
    if b.batched:
        return [ConditioningBundle(b.pooled[i], b.sequence[i], b.prompt_id[i]) for i in range(B)]
    return [b] * B


def euler_sample(
    model: VelocityFn,
    bundle: ConditioningBundle | None,
    steps: int,
    g: float,
    rng: np.random.Generator,
    shape: tuple[int, ...],
    null: ConditioningBundle | None = None,
    x0: np.ndarray | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Fixed-step left-endpoint Euler from t=0 (noise) to t=1 (data).

    ``shape`` is the batch latent shape ``(B, C, H, W)``. With g == 0 only
    the null condition is evaluated and ``bundle`` may be None.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.standard_normal(shape).astype(dtype) if x0 is None else np.array(x0, dtype=dtype)
    dt = 1.0 / steps
    for i in range(steps):
        t = np.full(shape[0], i / steps)
        x = x + dt * guided_velocity(model, x, bundle, null, t, g)
    return x


# -- training -----------------------------------------------------------------
@dataclass
class Stage:
    resolution: int
    steps: int
    batch_size: int


@dataclass
class TrainSchedule:
    stages: list[Stage]
    lr: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        res = [s.resolution for s in self.stages]
        if any(b < a for a, b in zip(res, res[1:])):
            raise ValueError(f"stage resolutions must be nondecreasing, got {res}")

    @classmethod
    def production(cls) -> "TrainSchedule":
        """Full-scale three-stage pre-training schedule (per-device batch sizes)."""
        return cls([Stage(256, 600_000, 24), Stage(512, 200_000, 8), Stage(1024, 200_000, 2)], lr=1e-4, warmup_steps=1000)

    @classmethod
    def finetune(cls, resolution: int, steps: int = 20_000, batch_size: int = 64, lr: float = 1e-5) -> "TrainSchedule":
        return cls([Stage(resolution, steps, batch_size)], lr=lr, warmup_steps=0)


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _fmt(x: float) -> str:
    return repr(float(x))


def flow_batch(
    dataset,
    encoder: PromptEncoder,
    rng: np.random.Generator,
    stage: Stage,
    p_drop: float,
    t_sampler: str,
    dtype,
):
    batch = dataset.sample(rng, stage.batch_size, stage.resolution)
    ids = np.where(rng.random(stage.batch_size) < p_drop, 0, batch.prompt_ids)
    fs = make_flow_sample(batch.latents.astype(dtype), rng, t_sampler)
    return fs, encoder.batch(ids)


def train_loop(
    model: SparseDiT,
    dataset,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    encoder: PromptEncoder,
    p_drop: float = 0.1,
    t_sampler: str = "uniform",
    out_dir: str | Path | None = None,
    log_every: int = 0,
    checkpoint_role: str = "teacher",
) -> TrainResult:
    """Minimize the flow-matching loss (plus MoE balance term) stage by stage.

    Each stage starts a fresh optimizer on the weights left by the previous
    stage. Writes ``metrics.csv`` and one checkpoint per stage when
    ``out_dir`` is given.
    """
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult()
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
    step = 0
    try:
        for si, stage in enumerate(schedule.stages):
            opt = AdamW(
                model.params,
                lr=schedule.lr,
                betas=schedule.betas,
                weight_decay=schedule.weight_decay,
                warmup_steps=schedule.warmup_steps,
            )
            for _ in range(stage.steps):
                step += 1
                fs, bundle = flow_batch(dataset, encoder, rng, stage, p_drop, t_sampler, model.cfg.dtype)
                leaves = model.leaves()
                try:
                    res = model.forward(fs.Xt, bundle, fs.t, leaves)
                    fm = fm_loss(res.velocity, fs.V_target)
                    loss = fm + res.aux_loss if res.aux_loss is not None else fm
                    if not np.isfinite(loss.data).all():
                        raise NonFiniteError("loss is not finite")
                    loss.backward()
                except NonFiniteError as exc:
                    dump = None
                    if out is not None:
                        dump = out / "abort_dump.ckpt"
                        save_arrays(dump, {**model.params, "batch/Xt": fs.Xt, "batch/t": fs.t}, {"kind": "abort_dump", "step": step})
                    raise NumericalAbort(f"non-finite value at step {step}: {exc}", dump) from exc
                lr = opt.step({k: v.grad for k, v in leaves.items() if v.grad is not None})
                aux = float(res.aux_loss.data) if res.aux_loss is not None else 0.0
                row = {"step": step, "stage": si, "loss": float(fm.data), "lr": lr, "aux_loss": aux}
                result.metrics.append(row)
                if writer is not None:
                    writer.writerow([step, si, _fmt(row["loss"]), _fmt(lr), _fmt(aux)])
                if log_every and step % log_every == 0:
                    log.info("step=%d stage=%d loss=%.6f lr=%.3g aux=%.5f", step, si, row["loss"], lr, aux)
            if out is not None:
                path = out / f"stage{si}_{stage.resolution}px.ckpt"
                save_model(path, model, checkpoint_role, {"stage": si, "step": step})
                result.checkpoints.append(path)
    finally:
        if fh is not None:
            fh.close()
    return result
