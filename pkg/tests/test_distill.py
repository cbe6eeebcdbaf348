import csv

import numpy as np
import pytest

from moeflow import distill as D
from moeflow.conditioning import PromptEncoder
from moeflow.core import Tensor
from moeflow.data import ToyDataset
from moeflow.distill import (
    DistillConfig,
    Discriminator,
    StudentSampler,
    TeacherMutated,
    adv_step,
    distill_loop,
    dmd_loss,
    dmd_step,
    init_student,
    train_discriminator,
)
from moeflow.model import SparseDiT, load_model
from moeflow.verify import tiny_config, tiny_encoder


@pytest.fixture(scope="module")
def teacher():
    return SparseDiT.create(tiny_config("f64"), seed=4, zero_init=False)


@pytest.fixture(scope="module")
def enc():
    return PromptEncoder(tiny_encoder(16))


def _noise(B=3, seed=0):
    return np.random.default_rng(seed).standard_normal((B, 1, 4, 4))


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(student_steps=0)
    with pytest.raises(ValueError):
        DistillConfig(lambda_adv=-1)


def test_student_init_is_exact_independent_copy(teacher):
    s = init_student(teacher)
    assert s.checksum() == teacher.checksum()
    s.params["x_embed.b"] += 1
    assert s.checksum() != teacher.checksum()


def test_evaluation_count(teacher, enc):
    for steps in (1, 4, 28):
        s = StudentSampler(teacher, steps)
        s(_noise(3), enc.batch([1, 1, 2]))
        assert s.evaluations == 3 * steps


def test_tied_fake_gives_zero_dmd_gradient(teacher, enc):
    cfg = DistillConfig(student_steps=2, g_teacher=1.0)
    grads, res = dmd_step(init_student(teacher), teacher, teacher.copy(), _noise(), enc.batch([1, 2, 1]), enc.null(3), np.random.default_rng(0), cfg)
    assert np.abs(res.diff).max() == 0
    assert float(res.loss.data) == 0
    assert all(np.abs(g).max() == 0 for g in grads.values())


def test_dmd_gradient_on_samples_is_scaled_field_difference(teacher, enc):
    fake = SparseDiT.create(teacher.cfg, seed=9, zero_init=False)
    x = Tensor(_noise(2, 1), requires_grad=True)
    rng = np.random.default_rng(3)
    res = dmd_loss(x, teacher, fake, enc.batch([1, 2]), enc.null(2), rng, 1.0)
    res.loss.backward()
    t = np.random.default_rng(3).uniform(0.02, 0.98, size=2)[:, None, None, None]
    np.testing.assert_allclose(x.grad, t * res.diff / res.diff.size, rtol=1e-10)


def test_initial_adversarial_losses_are_log2(teacher, enc):
    disc = Discriminator(16, teacher.default_taps(), dtype=np.float64)
    res = adv_step(Tensor(_noise(4)), _noise(4, 1), disc, teacher, enc.null(4), 0.25)
    assert float(res.gen.data) == pytest.approx(np.log(2), abs=1e-12)
    assert float(res.disc.data) == pytest.approx(np.log(2), abs=1e-12)


def test_generator_loss_reaches_samples_not_discriminator(teacher, enc):
    disc = Discriminator(16, teacher.default_taps(), dtype=np.float64)
    disc.params["out.w"][:] = 0.3
    x = Tensor(_noise(2), requires_grad=True)
    res = adv_step(x, _noise(2, 1), disc, teacher, enc.null(2), 0.25)
    res.gen.backward()
    assert np.abs(x.grad).max() > 0


def test_separable_discriminator_accuracy(teacher, enc):
    disc = Discriminator(16, teacher.default_taps(), hidden=16, seed=0, dtype=np.float64)
    real = lambda r: 0.8 + 0.3 * r.standard_normal((16, 1, 4, 4))
    fake = lambda r: -0.8 + 0.3 * r.standard_normal((16, 1, 4, 4))
    acc = train_discriminator(disc, teacher, enc.null(16), fake, real, 150, np.random.default_rng(0), lr=1e-2)
    assert acc > 0.9


def _run(teacher, enc, tmp=None, **kw):
    cfg = DistillConfig(steps=2, batch_size=2, g_teacher=1.0, **kw)
    return distill_loop(cfg, teacher, ToyDataset("gaussian"), enc, np.random.default_rng(0), out_dir=tmp)


def test_lambda_zero_total_equals_dmd(teacher, enc):
    res = _run(teacher, enc, lambda_adv=0.0)
    assert all(m["loss_total"] == m["loss_dmd"] for m in res.metrics)


@pytest.mark.parametrize("steps", [28, 16])
def test_step_count_variants(teacher, enc, steps, tmp_path):
    before = teacher.checksum()
    res = _run(teacher, enc, tmp_path, student_steps=steps)
    assert res.evaluations == 2 * 2 * steps
    assert teacher.checksum() == before
    rows = list(csv.DictReader(open(tmp_path / "distill_metrics.csv")))
    assert len(rows) == 2 and "loss_disc" in rows[0]
    student, meta = load_model(tmp_path / "student.ckpt", "student")
    assert meta["extra"]["student_steps"] == steps
    assert Discriminator.load(tmp_path / "disc.ckpt").taps == res.disc.taps


def test_teacher_mutation_detected(teacher, enc, monkeypatch):
    victim = teacher.copy()
    real_update = D.fake_fm_update

    def sneaky(fake, opt, samples, bundle, rng):
        victim.params["x_embed.b"] += 1.0
        return real_update(fake, opt, samples, bundle, rng)

    monkeypatch.setattr(D, "fake_fm_update", sneaky)
    with pytest.raises(TeacherMutated):
        _run(victim, enc)
