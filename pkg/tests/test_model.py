import numpy as np
import pytest

from moeflow.conditioning import PromptEncoder
from moeflow.core import ShapeError, Tensor, no_grad
from moeflow.model import (
    CheckpointError,
    RoutingConfigError,
    SparseDiT,
    ada_ln_modulate,
    load_model,
    moe_flops_per_token,
    moe_forward,
    param_count,
    patchify,
    qk_normalize,
    save_model,
    timestep_features,
    unpatchify,
)
from moeflow.verify import tiny_config, tiny_encoder

from . import oracles


def _rand_model(seed=0, **kw):
    return SparseDiT.create(tiny_config("f64", **kw), seed=seed, zero_init=False)


# -- patches and embeddings ---------------------------------------------------
def test_patchify_shape_and_order():
    x = np.arange(16.0).reshape(1, 4, 4)
    tok = patchify(x, 2).data
    assert tok.shape == (4, 4)
    # hand-labelled: top-left, top-right, bottom-left, bottom-right
    np.testing.assert_array_equal(tok[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tok[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tok[2], [8, 9, 12, 13])
    np.testing.assert_array_equal(tok[3], [10, 11, 14, 15])


@pytest.mark.parametrize("shape,p", [((2, 3, 8, 4), 2), ((1, 1, 6, 6), 3), ((4, 2, 4, 8), 4)])
def test_patchify_roundtrip_bit_exact(shape, p):
    x = np.random.default_rng(0).standard_normal(shape)
    back = unpatchify(patchify(x, p), p, shape[1], shape[2], shape[3]).data
    assert back.tobytes() == x.tobytes()


def test_patchify_rejects_bad_size():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 4)), 2)


def test_timestep_zero():
    f = timestep_features(0.0, 8)[0]
    np.testing.assert_array_equal(f[0::2], 0.0)
    np.testing.assert_array_equal(f[1::2], 1.0)


def test_timestep_reference_value():
    t, d = 0.37, 8
    ref = []
    for j in range(4):
        w = 10000.0 ** (j / 3)
        ref += [np.sin(t * w), np.cos(t * w)]
    np.testing.assert_allclose(timestep_features(t, d)[0], ref, atol=1e-12)


# -- adaLN and attention -----------------------------------------------------
def test_ada_ln_zero_modulation_is_layer_norm():
    x = np.random.default_rng(1).standard_normal((2, 5, 8))
    z = Tensor(np.zeros((2, 1, 8)))
    y = ada_ln_modulate(Tensor(x), z, z).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_qk_norm_scale_invariant_and_bounded():
    rng = np.random.default_rng(2)
    q, k = rng.standard_normal((2, 2, 5, 8)), rng.standard_normal((2, 2, 5, 8))
    g = Tensor(np.array([1.5, 0.7]).reshape(2, 1, 1))
    a, b = qk_normalize(Tensor(q), Tensor(k), g, g)
    a2, b2 = qk_normalize(Tensor(q * 37.0), Tensor(k * 0.5), g, g)
    # exact up to the eps inside the RMS
    np.testing.assert_allclose(a.data, a2.data, rtol=1e-5)
    np.testing.assert_allclose(b.data, b2.data, rtol=1e-5)
    logits = np.einsum("bhnd,bhmd->bhnm", a.data, b.data)
    bound = (g.data**2 * 8)[None]
    assert (np.abs(logits) <= bound + 1e-9).all()


# -- mixture of experts ------------------------------------------------------
def _moe_params(rng, d, E, hid, shared=True):
    p = {"m.router": Tensor(rng.standard_normal((d, E)))}
    names = [f"expert{e}" for e in range(E)] + (["shared"] if shared else [])
    for n in names:
        for w, s in (("gate", (d, hid)), ("up", (d, hid)), ("down", (hid, d))):
            p[f"m.{n}.{w}"] = Tensor(rng.standard_normal(s) * 0.4)
    return p


def _weights(p, name):
    return tuple(p[f"m.{name}.{w}"].data for w in ("gate", "up", "down"))


def test_moe_matches_dense_reference():
    rng = np.random.default_rng(3)
    d, E, k = 6, 4, 2
    p = _moe_params(rng, d, E, 5)
    x = rng.standard_normal((8, d))
    out = moe_forward(Tensor(x), p, "m", E, k, shared=True)
    ref, probs = oracles.dense_moe(x, p["m.router"].data, [_weights(p, f"expert{e}") for e in range(E)], k, _weights(p, "shared"))
    np.testing.assert_allclose(out.out.data, ref, atol=1e-10)
    np.testing.assert_allclose(out.decision.probs, probs, atol=1e-12)
    assert all(len(set(r)) == k for r in out.decision.indices.tolist())


def test_single_expert_is_dense():
    rng = np.random.default_rng(4)
    p = _moe_params(rng, 6, 1, 5, shared=False)
    x = rng.standard_normal((10, 6))
    out = moe_forward(Tensor(x), p, "m", 1, 1, shared=False).out.data
    np.testing.assert_allclose(out, oracles.swiglu(x, *_weights(p, "expert0")), atol=1e-12)


def test_shared_expert_is_additive():
    rng = np.random.default_rng(5)
    p = _moe_params(rng, 6, 4, 5)
    x = rng.standard_normal((7, 6))
    with_s = moe_forward(Tensor(x), p, "m", 4, 2, shared=True).out.data
    without = moe_forward(Tensor(x), p, "m", 4, 2, shared=False).out.data
    np.testing.assert_allclose(with_s - without, oracles.swiglu(x, *_weights(p, "shared")), atol=1e-10)


def test_topk_invariant_to_positive_logit_scaling():
    rng = np.random.default_rng(6)
    p = _moe_params(rng, 6, 5, 4)
    x = rng.standard_normal((20, 6))
    a = moe_forward(Tensor(x), p, "m", 5, 2, shared=False).decision.indices
    p["m.router"] = Tensor(p["m.router"].data * 3.0)
    b = moe_forward(Tensor(x), p, "m", 5, 2, shared=False).decision.indices
    np.testing.assert_array_equal(a, b)


def test_aux_loss_formula():
    rng = np.random.default_rng(7)
    E, k, beta = 4, 2, 0.01
    p = _moe_params(rng, 6, E, 4)
    x = rng.standard_normal((30, 6))
    out = moe_forward(Tensor(x), p, "m", E, k, shared=True, balance_coeff=beta)
    probs = out.decision.probs
    counts = np.bincount(out.decision.indices.ravel(), minlength=E)
    ref = beta * E * np.sum(counts / (30 * k) * probs.mean(0))
    assert abs(float(out.aux_loss.data) - ref) < 1e-12


def test_bad_topk_rejected():
    with pytest.raises(RoutingConfigError):
        tiny_config(n_experts=2, top_k=3)


# -- blocks ----------------------------------------------------------------
def _cond(model, rng, B=2):
    leaves = model.leaves(False)
    c = model.condition_vector(leaves, rng.standard_normal((B, model.cfg.d)), rng.random(B))
    return leaves, c


def test_dual_block_permutation_equivariant():
    model = _rand_model(8)
    rng = np.random.default_rng(0)
    leaves, c = _cond(model, rng)
    img = rng.standard_normal((2, 6, 16))
    txt = rng.standard_normal((2, 3, 16))
    perm = rng.permutation(6)
    with no_grad():
        a, ta, _ = model.dual_block(leaves, 0, Tensor(img), Tensor(txt), c)
        b, tb, _ = model.dual_block(leaves, 0, Tensor(img[:, perm]), Tensor(txt), c)
    np.testing.assert_allclose(a.data[:, perm], b.data, atol=1e-10)
    np.testing.assert_allclose(ta.data, tb.data, atol=1e-10)


def test_single_block_equals_tied_dual_block():
    model = _rand_model(9)
    rng = np.random.default_rng(1)
    leaves, c = _cond(model, rng)
    tied = dict(leaves)
    for name, t in leaves.items():
        if name.startswith("single0."):
            rest = name[len("single0."):]
            tied[f"dual0.img.{rest}"] = t
            tied[f"dual0.txt.{rest}"] = t
    img, txt = rng.standard_normal((2, 4, 16)), rng.standard_normal((2, 3, 16))
    with no_grad():
        di, dt, _ = model.dual_block(tied, 0, Tensor(img), Tensor(txt), c)
        s, _ = model.single_block(tied, 0, Tensor(np.concatenate([txt, img], 1)), c)
    np.testing.assert_allclose(np.concatenate([dt.data, di.data], 1), s.data, atol=1e-10)


def test_text_output_depends_on_image_input():
    model = _rand_model(10)
    rng = np.random.default_rng(2)
    leaves, c = _cond(model, rng)
    img = Tensor(rng.standard_normal((2, 4, 16)), requires_grad=True)
    _, txt, _ = model.dual_block(leaves, 0, img, Tensor(rng.standard_normal((2, 3, 16))), c)
    (txt * txt).sum().backward()
    assert np.abs(img.grad).max() > 0


# -- whole model -------------------------------------------------------------
def test_zero_init_is_identity_zero_velocity():
    model = SparseDiT.create(tiny_config("f32", height=8, width=8), seed=1)
    enc = PromptEncoder(tiny_encoder(16))
    v = model(np.random.default_rng(0).standard_normal((3, 1, 8, 8)), enc.batch([1, 2, 0]), [0.1, 0.5, 0.9])
    assert np.abs(v).max() == 0.0


def test_output_shape_16():
    model = _rand_model(11, height=16, width=16)
    enc = PromptEncoder(tiny_encoder(16))
    v = model(np.zeros((2, 1, 16, 16)), enc.batch([1, 2]), 0.3)
    assert v.shape == (2, 1, 16, 16) and np.isfinite(v).all()


def test_wrong_channels_rejected():
    model = _rand_model(12)
    enc = PromptEncoder(tiny_encoder(16))
    with pytest.raises(ShapeError):
        model(np.zeros((1, 2, 4, 4)), enc(1), 0.3)


def test_param_count_linear_in_experts():
    c = [param_count(tiny_config(n_experts=E, top_k=1)) for E in (2, 4, 6, 8)]
    assert len({b - a for a, b in zip(c, c[1:])}) == 1 and c[1] > c[0]


def test_flops_scale_with_k_not_experts():
    base = tiny_config(n_experts=4, top_k=2)
    more_e = tiny_config(n_experts=16, top_k=2)
    more_k = tiny_config(n_experts=4, top_k=3)
    router_delta = 2 * base.d * 12
    assert moe_flops_per_token(more_e) - moe_flops_per_token(base) == router_delta
    expert = 3 * 2 * base.d * base.expert_hidden + base.expert_hidden
    assert moe_flops_per_token(more_k) - moe_flops_per_token(base) == expert


def test_checkpoint_roundtrip(tmp_path):
    model = _rand_model(13)
    save_model(tmp_path / "m.ckpt", model, "teacher")
    loaded, meta = load_model(tmp_path / "m.ckpt", "teacher")
    assert loaded.checksum() == model.checksum() and loaded.cfg == model.cfg
    save_model(tmp_path / "n.ckpt", loaded, "teacher")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m.ckpt", "student")


def test_cast_preserves_values():
    m = SparseDiT.create(tiny_config("f32"), seed=2, zero_init=False)
    m64 = m.cast("f64")
    assert all(m64.params[k].dtype == np.float64 for k in m64.params)
    assert all(np.array_equal(m.params[k], m64.params[k]) for k in m.params)
