import csv

import numpy as np
import pytest

from moeflow.conditioning import PromptEncoder
from moeflow.core import ShapeError, Tensor
from moeflow.edit import (
    EDIT_INSTRUCTIONS,
    EditConfig,
    EditTripletSource,
    UnknownEditTask,
    apply_edit,
    build_edit_canvas,
    change_stats,
    edit_apply,
    edit_flow_canvas,
    edit_train,
    edit_weight_map,
    split_canvas,
    synth_edit_triplets,
    weighted_fm_loss,
)
from moeflow.model import SparseDiT, load_model
from moeflow.verify import tiny_config, tiny_encoder


def test_canvas_roundtrip():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    c = build_edit_canvas(a, b)
    assert c.latent.shape == (2, 1, 4, 8) and c.width == 4
    s, t = c.split()
    assert np.array_equal(s, a) and np.array_equal(t, b)
    with pytest.raises(ShapeError):
        build_edit_canvas(a, b[..., :2])


def test_weight_map_values():
    zs = np.zeros((1, 2, 2, 2))
    zt = zs.copy()
    zt[0, 1, 0, 0] = 0.5  # one channel changes at (0, 0)
    zt[0, 0, 1, 1] = 0.05  # below tau
    w = edit_weight_map(zs, zt, tau=0.1, alpha=4.0)
    np.testing.assert_array_equal(w[0], [[5.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        edit_weight_map(zs, zt, tau=-1)


def test_weighted_loss_unit_weights_is_target_half_mse():
    rng = np.random.default_rng(1)
    pred, tgt = rng.standard_normal((2, 1, 3, 6)), rng.standard_normal((2, 1, 3, 6))
    loss = float(weighted_fm_loss(Tensor(pred), tgt, np.ones((2, 3, 3))).data)
    assert loss == pytest.approx(np.mean((pred - tgt)[..., 3:] ** 2))


def test_gradient_ratio_changed_vs_unchanged():
    alpha = 4.0
    w = np.ones((1, 2, 2))
    w[0, 0, 0] = 1 + alpha
    pred = Tensor(np.ones((1, 1, 2, 4)), requires_grad=True)
    weighted_fm_loss(pred, np.zeros((1, 1, 2, 4)), w).backward()
    g = pred.grad[0, 0, :, 2:]
    assert g[0, 0] / g[1, 1] == pytest.approx(1 + alpha)


def test_source_half_receives_no_gradient():
    rng = np.random.default_rng(2)
    pred = Tensor(rng.standard_normal((2, 1, 2, 4)), requires_grad=True)
    weighted_fm_loss(pred, rng.standard_normal((2, 1, 2, 4)), np.ones((2, 2, 2))).backward()
    assert not pred.grad[..., :2].any() and pred.grad[..., 2:].all()


def test_flow_canvas_keeps_source_clean():
    rng = np.random.default_rng(3)
    zs, zt, x0 = (rng.standard_normal((3, 1, 2, 2)) for _ in range(3))
    t = np.array([0.0, 0.5, 1.0])
    canvas, v = edit_flow_canvas(zs, zt, x0, t)
    assert all(np.array_equal(canvas[i, ..., :2], zs[i]) for i in range(3))
    assert np.array_equal(canvas[0, ..., 2:], x0[0]) and np.array_equal(canvas[2, ..., 2:], zt[2])
    assert not v[..., :2].any() and np.allclose(v[..., 2:], zt - x0)


def test_triplet_tasks():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((1, 8, 8))
    m = np.zeros((8, 8), bool)
    m[2:5, 3:6] = True
    r = apply_edit("recolor", z, m, 2)
    assert np.array_equal(r[..., ~m], z[..., ~m]) and np.array_equal(r[..., m], -z[..., m])
    assert not apply_edit("remove", z, m, 2)[..., m].any()
    assert np.array_equal(apply_edit("translate", z, m, 2), np.roll(z, 2, -1))
    assert np.array_equal(apply_edit("no-op", z, m, 2), z)
    with pytest.raises(UnknownEditTask):
        apply_edit("blur", z, m, 2)


def test_triplet_source_properties():
    src = EditTripletSource(("recolor", "no-op"))
    Z_S, Z_T, ids, masks = src.sample(np.random.default_rng(5), 40, 8)
    assert Z_S.shape == Z_T.shape == (40, 1, 8, 8) and masks.shape == (40, 8, 8)
    assert set(ids) <= {EDIT_INSTRUCTIONS["recolor"], EDIT_INSTRUCTIONS["no-op"]}
    for zs, zt, i, m in zip(Z_S, Z_T, ids, masks):
        assert np.array_equal(zs[..., ~m], zt[..., ~m])
        if i == EDIT_INSTRUCTIONS["no-op"]:
            assert np.array_equal(zs, zt)
    trip = next(synth_edit_triplets("remove", np.random.default_rng(0)))
    assert trip.instruction_id == EDIT_INSTRUCTIONS["remove"]


def test_edit_apply_clamps_source_half():
    model = SparseDiT.create(tiny_config("f64", height=4, width=8), seed=1, zero_init=False)
    enc = PromptEncoder(tiny_encoder(16))
    zs = np.random.default_rng(6).standard_normal((2, 1, 4, 4))
    out, canvas = edit_apply(model, zs, 11, 5, 2.0, enc, np.random.default_rng(0), return_canvas=True)
    assert out.shape == zs.shape and np.array_equal(canvas[..., :4], zs)


def test_change_stats():
    zs = np.zeros((1, 2, 2))
    out = np.array([[[1.0, 0.0], [0.0, 0.2]]])
    m = np.array([[True, False], [False, False]])
    inside, outside = change_stats(zs, out, m)
    assert inside == 1.0 and outside == pytest.approx(0.2 / 3)


def test_edit_train_artifacts(tmp_path):
    model = SparseDiT.create(tiny_config("f32", height=4, width=8), seed=0)
    cfg = EditConfig(steps=3, batch_size=2, resolution=4)
    res = edit_train(model, EditTripletSource(), cfg, PromptEncoder(tiny_encoder(16)), np.random.default_rng(0), tmp_path)
    assert len(res.metrics) == 3 and np.isfinite([m["loss"] for m in res.metrics]).all()
    assert len(list(csv.reader(open(tmp_path / "edit_metrics.csv")))) == 4
    loaded, meta = load_model(tmp_path / "edit.ckpt", "edit")
    assert loaded.checksum() == model.checksum()
