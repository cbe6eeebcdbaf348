"""Few-step distillation: distribution matching plus an adversarial term.

Three trainable parameter sets with their own optimizers: the student
(few-step generator), the fake velocity model (tracks the student's output
distribution), and a discriminator whose inputs are frozen-teacher token
features. The teacher is never updated; its checksum is verified at the end.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditioningBundle, PromptEncoder
from .core import (
    AdamW,
    NonFiniteError,
    Tensor,
    concat,
    linear,
    mean,
    no_grad,
    silu,
    softplus,
    square,
    sub,
)
from .flow import NumericalAbort, fm_loss, guided_velocity, make_flow_sample
from .model import SparseDiT, save_model
from .model.checkpoint import load_arrays, save_arrays

log = logging.getLogger(__name__)

DISTILL_FIELDS = ("step", "loss_total", "loss_dmd", "loss_adv_gen", "loss_disc", "loss_fake")


class TeacherMutated(RuntimeError):
    pass


@dataclass
class DistillConfig:
    student_steps: int = 4
    lambda_adv: float = 0.1
    student_lr: float = 2e-4
    fake_lr: float = 1e-3
    disc_lr: float = 1e-3
    feature_taps: tuple[int, ...] | None = None
    g_teacher: float = 2.0
    t_feat: float = 0.25
    steps: int = 500
    batch_size: int = 32
    fake_updates: int = 1
    disc_hidden: int = 32
    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if self.student_steps < 1:
            raise ValueError("student_steps must be >= 1")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")


# -- student ------------------------------------------------------------------
def init_student(teacher: SparseDiT) -> SparseDiT:
    """Parameter-exact, storage-independent copy of the teacher."""
    return teacher.copy()


class StudentSampler:
    """Few-step Euler generator that counts model evaluations."""

    def __init__(self, model: SparseDiT, steps: int):
        self.model = model
        self.steps = steps
        self.evaluations = 0

    def generate(self, noise: np.ndarray, bundle: ConditioningBundle, leaves: dict[str, Tensor] | None = None) -> Tensor:
        x = Tensor(noise.astype(self.model.cfg.dtype))
        dt = 1.0 / self.steps
        B = noise.shape[0]
        for i in range(self.steps):
            v = self.model.forward(x, bundle, np.full(B, i / self.steps), leaves).velocity
            self.evaluations += B
            x = x + v * dt
        return x

    def __call__(self, noise: np.ndarray, bundle: ConditioningBundle) -> np.ndarray:
        with no_grad():
            return self.generate(noise, bundle).data


# -- distribution matching ------------------------------------------------------
@dataclass
class DMDResult:
    loss: Tensor  # surrogate whose gradient on the path point is the field difference
    x_hat: Tensor
    diff: np.ndarray


def dmd_loss(
    x_hat: Tensor,
    teacher: SparseDiT,
    fake: SparseDiT,
    bundle: ConditioningBundle,
    null: ConditioningBundle,
    rng: np.random.Generator,
    g_teacher: float,
    t_range: tuple[float, float] = (0.02, 0.98),
) -> DMDResult:
    """Distribution-matching surrogate on student samples ``x_hat``.

    The student sample is re-noised to a random time on the linear path and
    both velocity fields are read there without gradients. The surrogate
    ``0.5 * mean((x_t - sg(x_t - diff))**2)`` back-propagates exactly
    ``diff / numel`` into ``x_t`` and, through the path map, into ``x_hat``.
    """
    B = x_hat.shape[0]
    t = rng.uniform(*t_range, size=B)
    z = rng.standard_normal(x_hat.shape).astype(x_hat.dtype)
    tt = t.reshape((B,) + (1,) * (x_hat.ndim - 1)).astype(x_hat.dtype)
    x_t = Tensor(z * (1 - tt)) + x_hat * Tensor(tt)
    with no_grad():
        u_fake = fake(x_t.data, bundle, t)
        u_real = guided_velocity(teacher, x_t.data, bundle, null, t, g_teacher)
    diff = (u_fake - u_real).astype(x_hat.dtype)
    target = Tensor(x_t.data - diff)
    loss = mean(square(sub(x_t, target))) * 0.5
    return DMDResult(loss, x_hat, diff)


def dmd_step(
    student: SparseDiT,
    teacher: SparseDiT,
    fake_model: SparseDiT,
    batch_noise: np.ndarray,
    bundle: ConditioningBundle,
    null: ConditioningBundle,
    rng: np.random.Generator,
    cfg: DistillConfig,
    fake_opt: AdamW | None = None,
) -> tuple[dict[str, np.ndarray], DMDResult]:
    """One distribution-matching contribution for the student.

    Returns student parameter gradients of the DMD surrogate; teacher and
    fake weights receive none. When ``fake_opt`` is given the fake model
    also takes ``cfg.fake_updates`` flow-matching steps on the student output.
    """
    leaves = student.leaves()
    x_hat = StudentSampler(student, cfg.student_steps).generate(batch_noise, bundle, leaves)
    res = dmd_loss(x_hat, teacher, fake_model, bundle, null, rng, cfg.g_teacher, (cfg.t_min, cfg.t_max))
    res.loss.backward()
    grads = {k: v.grad for k, v in leaves.items() if v.grad is not None}
    if fake_opt is not None:
        for _ in range(cfg.fake_updates):
            fake_fm_update(fake_model, fake_opt, x_hat.data, bundle, rng)
    return grads, res


def fake_fm_update(fake: SparseDiT, opt: AdamW, samples: np.ndarray, bundle, rng) -> float:
    fs = make_flow_sample(samples, rng)
    leaves = fake.leaves()
    loss = fm_loss(fake.forward(fs.Xt, bundle, fs.t, leaves).velocity, fs.V_target)
    loss.backward()
    opt.step({k: v.grad for k, v in leaves.items() if v.grad is not None})
    return float(loss.data)


# -- adversarial ------------------------------------------------------------------
class Discriminator:
    """Per-tap heads on mean-pooled frozen-teacher features, then one logit.

    The output layer starts at zero, so D = sigmoid(0) = 0.5 everywhere.
    """

    def __init__(self, d: int, taps: tuple[int, ...], hidden: int = 32, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.taps = tuple(taps)
        self.params: dict[str, np.ndarray] = {}
        for tap in self.taps:
            self.params[f"tap{tap}.w"] = (rng.standard_normal((d, hidden)) / np.sqrt(d)).astype(dtype)
            self.params[f"tap{tap}.b"] = np.zeros(hidden, dtype=dtype)
        self.params["out.w"] = np.zeros((hidden * len(self.taps), 1), dtype=dtype)
        self.params["out.b"] = np.zeros(1, dtype=dtype)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def logits(self, features: dict[int, Tensor], p: dict[str, Tensor] | None = None) -> Tensor:
        p = p if p is not None else self.leaves(False)
        hs = [silu(linear(mean(features[tap], axis=1), p[f"tap{tap}.w"], p[f"tap{tap}.b"])) for tap in self.taps]
        h = hs[0] if len(hs) == 1 else concat(hs, axis=-1)
        return linear(h, p["out.w"], p["out.b"]).reshape(-1)

    def save(self, path) -> None:
        save_arrays(path, self.params, {"kind": "discriminator", "role": "disc", "taps": list(self.taps)})

    @classmethod
    def load(cls, path) -> "Discriminator":
        arrays, meta = load_arrays(path)
        obj = cls.__new__(cls)
        obj.taps = tuple(meta["taps"])
        obj.params = arrays
        return obj


def teacher_features(teacher: SparseDiT, x, null: ConditioningBundle, taps, t_feat: float) -> dict[int, Tensor]:
    """Frozen-teacher image-token activations at ``taps``; gradient reaches ``x`` only."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=teacher.cfg.dtype))
    B = x.shape[0]
    return teacher.forward(x, null, np.full(B, t_feat), teacher.leaves(requires_grad=False), taps=tuple(taps)).features


@dataclass
class AdvResult:
    gen: Tensor  # -log D(fake)
    disc: Tensor  # -(log D(real) + log(1 - D(fake))) / 2
    acc: float


def adv_generator_loss(student_samples: Tensor, disc: Discriminator, teacher: SparseDiT, null, t_feat: float) -> Tensor:
    """``-log D(fake)``, differentiable in the student samples only."""
    feats = teacher_features(teacher, student_samples, null, disc.taps, t_feat)
    return mean(softplus(-disc.logits(feats, disc.leaves(requires_grad=False))))


def adv_discriminator_loss(
    fake_samples: np.ndarray,
    real_samples: np.ndarray,
    disc: Discriminator,
    teacher: SparseDiT,
    null,
    t_feat: float,
    disc_leaves: dict[str, Tensor] | None = None,
) -> tuple[Tensor, float]:
    """Discriminator loss on detached samples, plus its classification accuracy."""
    dl = disc_leaves if disc_leaves is not None else disc.leaves(requires_grad=False)
    with no_grad():
        f_fake = teacher_features(teacher, fake_samples, null, disc.taps, t_feat)
        f_real = teacher_features(teacher, real_samples, null, disc.taps, t_feat)
    l_fake = disc.logits(f_fake, dl)
    l_real = disc.logits(f_real, dl)
    loss = (mean(softplus(-l_real)) + mean(softplus(l_fake))) * 0.5
    acc = float(((l_real.data > 0).sum() + (l_fake.data < 0).sum()) / (l_real.size + l_fake.size))
    return loss, acc


def adv_step(
    student_samples: Tensor,
    real_samples: np.ndarray,
    disc: Discriminator,
    teacher: SparseDiT,
    null: ConditioningBundle,
    t_feat: float,
    disc_leaves: dict[str, Tensor] | None = None,
) -> AdvResult:
    """Non-saturating logistic GAN losses.

    ``gen`` depends on the student samples (and not on discriminator
    leaves); ``disc`` depends on ``disc_leaves`` only, with samples detached.
    """
    gen = adv_generator_loss(student_samples, disc, teacher, null, t_feat)
    d_loss, acc = adv_discriminator_loss(student_samples.data, real_samples, disc, teacher, null, t_feat, disc_leaves)
    return AdvResult(gen, d_loss, acc)


def train_discriminator(
    disc: Discriminator,
    teacher: SparseDiT,
    null: ConditioningBundle,
    fake_fn,
    real_fn,
    steps: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    t_feat: float = 0.25,
) -> float:
    """Fit only the discriminator on two sample sources; returns final accuracy."""
    opt = AdamW(disc.params, lr=lr)
    acc = 0.0
    for _ in range(steps):
        leaves = disc.leaves()
        loss, acc = adv_discriminator_loss(fake_fn(rng), real_fn(rng), disc, teacher, null, t_feat, leaves)
        loss.backward()
        opt.step({k: v.grad for k, v in leaves.items() if v.grad is not None})
    return acc


# -- loop -------------------------------------------------------------------------
@dataclass
class DistillResult:
    student: SparseDiT
    fake: SparseDiT
    disc: Discriminator
    metrics: list[dict] = field(default_factory=list)
    evaluations: int = 0


def distill_loop(
    cfg: DistillConfig,
    teacher: SparseDiT,
    dataset,
    encoder: PromptEncoder,
    rng: np.random.Generator,
    resolution: int | None = None,
    out_dir: str | Path | None = None,
    log_every: int = 0,
) -> DistillResult:
    """Alternate student, fake-model and discriminator updates.

    Student objective per step: ``L_total = L_DMD + lambda_adv * L_adv_gen``.
    """
    teacher_sum = teacher.checksum()
    res_px = resolution or teacher.cfg.height
    taps = cfg.feature_taps or teacher.default_taps()
    student = init_student(teacher)
    fake = teacher.copy()
    disc = Discriminator(teacher.cfg.d, taps, cfg.disc_hidden, seed=int(rng.integers(2**31)), dtype=teacher.cfg.dtype)
    s_opt = AdamW(student.params, lr=cfg.student_lr)
    f_opt = AdamW(fake.params, lr=cfg.fake_lr)
    d_opt = AdamW(disc.params, lr=cfg.disc_lr)
    sampler = StudentSampler(student, cfg.student_steps)
    C = teacher.cfg.in_channels

    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "distill_metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DISTILL_FIELDS)
    result = DistillResult(student, fake, disc)
    try:
        for step in range(1, cfg.steps + 1):
            real = dataset.sample(rng, cfg.batch_size, res_px)
            bundle = encoder.batch(real.prompt_ids)
            null = encoder.null(cfg.batch_size)
            noise = rng.standard_normal((cfg.batch_size, C, res_px, res_px)).astype(teacher.cfg.dtype)

            leaves = student.leaves()
            try:
                x_hat = sampler.generate(noise, bundle, leaves)
                dmd = dmd_loss(x_hat, teacher, fake, bundle, null, rng, cfg.g_teacher, (cfg.t_min, cfg.t_max))
                adv_gen = adv_generator_loss(x_hat, disc, teacher, null, cfg.t_feat)
                total = dmd.loss + adv_gen * cfg.lambda_adv
                if not np.isfinite(total.data):
                    raise NonFiniteError("distillation loss is not finite")
            except NonFiniteError as exc:
                dump = None
                if out is not None:
                    dump = out / "abort_dump.ckpt"
                    save_arrays(dump, dict(student.params), {"kind": "abort_dump", "step": step})
                raise NumericalAbort(f"non-finite value at distill step {step}: {exc}", dump) from exc

            # student: only student leaves require grad on this graph
            total.backward()
            s_opt.step({k: v.grad for k, v in leaves.items() if v.grad is not None})

            # discriminator: its graph only touches disc leaves
            d_leaves = disc.leaves()
            d_loss, _ = adv_discriminator_loss(x_hat.data, real.latents.astype(teacher.cfg.dtype), disc, teacher, null, cfg.t_feat, d_leaves)
            d_loss.backward()
            d_opt.step({k: v.grad for k, v in d_leaves.items() if v.grad is not None})

            fake_loss = 0.0
            for _ in range(cfg.fake_updates):
                fake_loss = fake_fm_update(fake, f_opt, x_hat.data, bundle, rng)

            row = {
                "step": step,
                "loss_total": float(total.data),
                "loss_dmd": float(dmd.loss.data),
                "loss_adv_gen": float(adv_gen.data),
                "loss_disc": float(d_loss.data),
                "loss_fake": fake_loss,
            }
            result.metrics.append(row)
            if writer is not None:
                writer.writerow([step] + [repr(row[k]) for k in DISTILL_FIELDS[1:]])
            if log_every and step % log_every == 0:
                log.info(
                    "distill step=%d total=%.6f dmd=%.6f adv_gen=%.4f disc=%.4f fake=%.4f",
                    step, row["loss_total"], row["loss_dmd"], row["loss_adv_gen"], row["loss_disc"], fake_loss,
                )
    finally:
        if fh is not None:
            fh.close()
    if teacher.checksum() != teacher_sum:
        raise TeacherMutated("teacher weights changed during distillation")
    result.evaluations = sampler.evaluations
    if out is not None:
        save_model(out / "student.ckpt", student, "student", {"student_steps": cfg.student_steps})
        save_model(out / "fake.ckpt", fake, "fake")
        disc.save(out / "disc.ckpt")
    return result
