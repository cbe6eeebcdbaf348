import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeflow.core import (
    AdamW,
    AdamWState,
    NonFiniteError,
    ShapeError,
    Tensor,
    adamw_step,
    check_gradients,
    concat,
    exp,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    rms_norm,
    scaled_dot_attention,
    scatter_rows,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    square,
    stop_gradient,
    swapaxes,
    swiglu,
    transpose,
    tsum,
    warmup_lr,
)

from . import oracles

FD_TOL = 1e-5


def _grad_ok(fn, *inputs, tol=FD_TOL):
    errs = check_gradients(fn, [np.asarray(x, dtype=np.float64) for x in inputs])
    assert max(errs) < tol, errs


# -- matmul -------------------------------------------------------------------------
def test_matmul_identity_and_hand_case():
    B = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), B).data, B.data)
    assert matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]]))).data.tolist() == [[11.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_is_ones_times_bt(rng):
    A = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    B = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    tsum(matmul(A, B)).backward()
    np.testing.assert_allclose(A.grad, np.ones((5, 3)) @ B.data.T, rtol=1e-12)
    np.testing.assert_allclose(B.grad, A.data.T @ np.ones((5, 3)), rtol=1e-12)
    _grad_ok(lambda a, b: tsum(matmul(a, b)), A.data, B.data, tol=1e-4)


# -- softmax -----------------------------------------------------------------------
def test_softmax_uniform_and_reference():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data, e / e.sum(), rtol=1e-14)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_and_shift_invariance(seed, c):
    x = np.random.default_rng(seed).standard_normal((4, 6)) * 5
    p = softmax(Tensor(x), axis=-1).data
    assert np.abs(p.sum(-1) - 1).max() < 1e-6
    assert (p > 0).all()
    np.testing.assert_allclose(softmax(Tensor(x + c), axis=-1).data, p, atol=1e-6)


def test_softmax_large_logits_stable():
    p = softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)


# -- normalizations ------------------------------------------------------------------
def test_layer_norm_constant_row_zero():
    np.testing.assert_allclose(layer_norm(Tensor(np.full((2, 5), 3.0))).data, 0.0, atol=1e-12)


def test_layer_norm_moments(rng):
    y = layer_norm(Tensor(rng.standard_normal((8, 32)) * 4 + 2)).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-5)


def test_rms_norm_unit_rms():
    y = rms_norm(Tensor(np.array([[3.0, 0.0, 0.0, 0.0]]))).data
    assert abs(np.sqrt((y**2).mean()) - 1) < 1e-6


# -- activations and blocks -----------------------------------------------------------
def test_silu_zero_and_definition(rng):
    assert silu(Tensor(np.array([0.0]))).data[0] == 0.0
    x = rng.standard_normal(20)
    np.testing.assert_allclose(silu(Tensor(x)).data, x / (1 + np.exp(-x)), rtol=1e-14)


def test_swiglu_matches_oracle_and_saturates(rng):
    x = rng.uniform(0.5, 1.0, (3, 4))
    wg, wu, wd = rng.standard_normal((4, 8)), rng.standard_normal((4, 8)), rng.standard_normal((8, 4))
    got = swiglu(Tensor(x), Tensor(wg), Tensor(wu), Tensor(wd)).data
    np.testing.assert_allclose(got, oracles.swiglu(x, wg, wu, wd), rtol=1e-12)
    # large positive gate pre-activations: silu(z) -> z
    big = np.full((4, 8), 50.0)
    sat = swiglu(Tensor(x), Tensor(big), Tensor(wu), Tensor(wd)).data
    np.testing.assert_allclose(sat, ((x @ big) * (x @ wu)) @ wd, rtol=1e-12)


def test_swiglu_shape_error():
    with pytest.raises(ShapeError):
        swiglu(Tensor(np.ones((2, 4))), Tensor(np.ones((4, 8))), Tensor(np.ones((4, 7))), Tensor(np.ones((8, 4))))


def test_swiglu_gradients(rng):
    _grad_ok(
        lambda x, a, b, c: tsum(square(swiglu(x, a, b, c))),
        rng.standard_normal((3, 4)), rng.standard_normal((4, 8)), rng.standard_normal((4, 8)), rng.standard_normal((8, 4)),
        tol=1e-4,
    )


# -- attention ---------------------------------------------------------------------------
def test_attention_single_token_returns_v(rng):
    q, k, v = (Tensor(rng.standard_normal((2, 1, 4))) for _ in range(3))
    np.testing.assert_array_equal(scaled_dot_attention(q, k, v).data, v.data)


def test_attention_identical_keys_uniform(rng):
    q = Tensor(rng.standard_normal((1, 3, 4)))
    k = Tensor(np.broadcast_to(rng.standard_normal(4), (1, 3, 4)).copy())
    v = Tensor(rng.standard_normal((1, 3, 4)))
    out = scaled_dot_attention(q, k, v).data
    np.testing.assert_allclose(out, np.broadcast_to(v.data.mean(1, keepdims=True), out.shape), rtol=1e-12)


def test_attention_two_heads_reference(rng):
    q, k, v = (rng.standard_normal((2, 3, 4)) for _ in range(3))
    ref = np.empty_like(v)
    for h in range(2):
        s = q[h] @ k[h].T / 2.0
        w = np.exp(s - s.max(1, keepdims=True))
        ref[h] = (w / w.sum(1, keepdims=True)) @ v[h]
    np.testing.assert_allclose(scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data, ref, rtol=1e-12)


def test_attention_gradients(rng):
    _grad_ok(lambda q, k, v: tsum(square(scaled_dot_attention(q, k, v))), *(rng.standard_normal((2, 3, 4)) for _ in range(3)))


# -- gradients of every op on randomized shapes --------------------------------------------
UNARY = {
    "exp": lambda a: exp(a),
    "log": lambda a: log(mul(a, a) + 1.0),
    "sqrt": lambda a: sqrt(mul(a, a) + 0.5),
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "square": square,
    "softmax": lambda a: softmax(a, axis=-1),
    "layer_norm": layer_norm,
    "rms_norm": rms_norm,
    "transpose": lambda a: mul(transpose(a), Tensor(np.arange(a.size, dtype=float).reshape(a.shape[::-1]))),
    "reshape": lambda a: mul(reshape(a, (-1,)), Tensor(np.linspace(-1, 1, a.size))),
    "mean": lambda a: mean(square(a), axis=0),
    "neg_div": lambda a: 1.0 / (mul(a, a) + 1.0) - a,
}


# width >= 3: a 2-wide normalization outputs +-1 with a near-zero gradient that FD cannot resolve
@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 4), cols=st.integers(3, 6))
def test_unary_op_gradients(name, seed, rows, cols):
    x = np.random.default_rng(seed).standard_normal((rows, cols))
    w = np.random.default_rng(seed + 1).standard_normal(UNARY[name](Tensor(x)).shape)
    _grad_ok(lambda a: tsum(mul(UNARY[name](a), Tensor(w))), x)


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 4), m=st.integers(1, 4))
def test_broadcast_binary_gradients(seed, n, m):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal((n, m)), r.standard_normal((1, m)), r.standard_normal(())
    _grad_ok(lambda x, y, z: tsum(square(x * y - x / (y * y + 1.0) + z)), a, b, c)


@given(seed=st.integers(0, 2**31 - 1))
def test_indexing_concat_scatter_gradients(seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((5, 3)), r.standard_normal((2, 3))
    idx = np.array([4, 0, 4])

    def fn(a, b):
        picked = getitem(a, idx)  # repeated index accumulates
        sl = getitem(a, (slice(1, 3), slice(None)))
        cat = concat([sl, b], axis=0)
        back = scatter_rows(b, np.array([1, 3]), 5)
        return tsum(square(picked)) + tsum(mul(cat, cat)) + tsum(mul(back, a)) + tsum(swapaxes(reshape(a, (5, 3, 1)), 0, 2))

    _grad_ok(fn, x, y)


def test_backward_shared_subexpression_accumulates(rng):
    x = rng.standard_normal(4)
    a = Tensor(x, requires_grad=True)
    s = mul(a, a)
    tsum(s + s).backward()
    # equivalent graph with duplicated inputs
    b1, b2 = Tensor(x, requires_grad=True), Tensor(x, requires_grad=True)
    tsum(mul(b1, b1) + mul(b2, b2)).backward()
    np.testing.assert_allclose(a.grad, b1.grad + b2.grad, rtol=1e-15)
    np.testing.assert_allclose(a.grad, 4 * x, rtol=1e-15)


def test_backward_trivial_cases(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    y = Tensor(rng.standard_normal(3), requires_grad=True)
    tsum(y * 0.0).backward()
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_stop_gradient_blocks(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    tsum(mul(x, stop_gradient(x))).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_no_grad_records_nothing_and_is_thread_local():
    x = Tensor(np.ones(2), requires_grad=True)
    seen = {}

    def other():
        seen["other"] = (x * 2.0).requires_grad

    with no_grad():
        assert not (x * 2.0).requires_grad
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert seen["other"] is True
    assert (x * 2.0).requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([-1.0])))
    with pytest.raises(NonFiniteError):
        exp(Tensor(np.array([1e4])))


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_float32_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (softmax(x) * 2.0).dtype == np.float32
    assert matmul(x, x).dtype == np.float32


def test_forward_determinism(rng):
    x = rng.standard_normal((4, 8))
    a = layer_norm(softmax(Tensor(x))).data
    b = layer_norm(softmax(Tensor(x.copy()))).data
    assert a.tobytes() == b.tobytes()


# -- optimizer ---------------------------------------------------------------------------
def test_adamw_zero_grad_no_decay_unchanged():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_warmup_half():
    assert warmup_lr(1e-4, 500, 1000) == pytest.approx(0.5e-4, rel=1e-12)
    assert warmup_lr(1e-4, 5000, 1000) == 1e-4


def test_adamw_hand_unrolled_quadratic():
    # f(w) = 0.5 * a * w^2, two steps
    a, w0, lr, b1, b2, eps, wd = 3.0, 2.0, 0.1, 0.9, 0.999, 1e-8, 0.01
    p = {"w": np.array(w0)}
    state = AdamWState()
    w, m, v = w0, 0.0, 0.0
    for t in (1, 2):
        g = a * p["w"].item()
        adamw_step(p, {"w": np.array(g)}, state, lr, (b1, b2), eps, wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert p["w"].item() == pytest.approx(w, rel=1e-12)


def test_adamw_wrapper_warmup_and_skip():
    p = {"a": np.ones(2), "b": np.ones(2)}
    opt = AdamW(p, lr=1.0, warmup_steps=4)
    assert opt.step({"a": np.ones(2)}) == 0.25
    np.testing.assert_array_equal(p["b"], np.ones(2))
    assert p["a"][0] < 1.0
