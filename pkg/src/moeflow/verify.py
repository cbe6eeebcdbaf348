"""Self-check suites run by ``moeflow verify``.

Each check returns a :class:`CheckResult`; ``run_all`` is the entry point.
Everything here is fast enough to run on a fresh checkout.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import EncoderStubConfig, PromptEncoder
from .core import Tensor, analytic_grads, no_grad, reference_grads, rel_error, swiglu
from .datapipe import all_pairs_dedup, dedup_features
from .flow import euler_sample, fm_loss, make_flow_sample
from .model import SparseDiT, SparseDiTConfig, load_model, moe_forward, save_model

GRAD_TOL = {"f32": 1e-3, "f64": 1e-5}


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def tiny_config(precision: str = "f64", **kw) -> SparseDiTConfig:
    base = dict(
        d=16, n_heads=2, L_dual=1, L_single=1, patch_size=2, in_channels=1,
        n_experts=4, top_k=2, shared_expert=True, expert_hidden=16,
        height=4, width=4, precision=precision,
    )
    base.update(kw)
    return SparseDiTConfig(**base)


def tiny_encoder(d: int = 16) -> EncoderStubConfig:
    return EncoderStubConfig(d_t5=8, d_llm=8, d=d, M_t5=2, M_llm=2, L=2, d_clip=8)


def grad_config(precision: str = "f64") -> SparseDiTConfig:
    """Smallest config that still exercises every block type and sparse routing."""
    return tiny_config(precision, n_experts=2, top_k=1, expert_hidden=8)


def model_gradient_errors(precisions=("f64", "f32"), seed: int = 0, batch: int = 1) -> dict[str, dict[str, float]]:
    """Norm-wise relative error of every parameter gradient of fm_loss + balance term.

    Parameters are drawn in float32 so the same values exist at both
    precisions; one float64 central-difference reference serves all of them.
    """
    cfg = grad_config("f32")
    model = SparseDiT.create(cfg, seed=seed, zero_init=False)
    rng = np.random.default_rng(seed + 1)
    enc = PromptEncoder(tiny_encoder(cfg.d))
    bundle = enc.batch(np.arange(1, batch + 1))
    fs = make_flow_sample(dataset_like(rng, batch, cfg), rng)
    names = sorted(model.params)
    models = {"f32": model, "f64": model.cast("f64")}

    def loss_fn(precision):
        m = models[precision]

        def fn(*leaves):
            p = dict(zip(names, leaves))
            res = m.forward(fs.Xt.astype(m.cfg.dtype), bundle, fs.t, p)
            loss = fm_loss(res.velocity, fs.V_target.astype(m.cfg.dtype))
            return loss + res.aux_loss if res.aux_loss is not None else loss

        return fn

    ref = reference_grads(loss_fn("f64"), [models["f64"].params[k] for k in names])
    out = {}
    for precision in precisions:
        grads = analytic_grads(loss_fn(precision), [models[precision].params[k] for k in names])
        out[precision] = {k: rel_error(g, r) for k, g, r in zip(names, grads, ref)}
    return out


def dataset_like(rng, batch, cfg) -> np.ndarray:
    x = 0.8 + 0.3 * rng.standard_normal((batch, cfg.in_channels, cfg.height, cfg.width))
    return x.astype(cfg.dtype)


def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failed check, not an abort of the suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def check_model_gradients():
    all_errs = model_gradient_errors()
    ok, parts = True, []
    for precision, errs in all_errs.items():
        worst = max(errs, key=errs.get)
        ok &= errs[worst] < GRAD_TOL[precision]
        parts.append(f"{precision} max rel err {errs[worst]:.2e} ({worst})")
    return ok, "; ".join(parts) + f" over {len(errs)} arrays"


def check_path(n: int = 100_000):
    rng = np.random.default_rng(0)
    X1 = rng.standard_normal((n, 4))
    fs = make_flow_sample(X1, rng)
    t = fs.t[:, None]
    e1 = np.abs(fs.Xt - ((1 - t) * fs.X0 + t * X1)).max()
    e2 = np.abs(fs.V_target - (X1 - fs.X0)).max()
    # moving along the target velocity from X0 reaches Xt exactly
    e3 = np.abs(fs.X0 + t * fs.V_target - fs.Xt).max()
    err = max(e1, e2, e3)
    return err < 1e-12, f"max identity error {err:.1e}"


def check_routing(n_tokens: int = 10_000):
    rng = np.random.default_rng(0)
    d, E, k, hid = 8, 6, 2, 8
    params = {"m.router": Tensor(rng.standard_normal((d, E)))}
    for e in range(E):
        params[f"m.expert{e}.gate"] = Tensor(rng.standard_normal((d, hid)) * 0.3)
        params[f"m.expert{e}.up"] = Tensor(rng.standard_normal((d, hid)) * 0.3)
        params[f"m.expert{e}.down"] = Tensor(rng.standard_normal((hid, d)) * 0.3)
    x = Tensor(rng.standard_normal((n_tokens, d)))
    with no_grad():
        out = moe_forward(x, params, "m", E, k, shared=False)
    dec = out.decision
    distinct = all(len(set(row)) == k for row in dec.indices.tolist())
    simplex = np.abs(dec.gates.sum(-1) - 1).max() < 1e-6 and (dec.gates >= 0).all()

    dense_p = {"m.router": Tensor(rng.standard_normal((d, 1)))}
    for w in ("gate", "up", "down"):
        dense_p[f"m.expert0.{w}"] = params[f"m.expert0.{w}"]
    with no_grad():
        moe = moe_forward(x, dense_p, "m", 1, 1, shared=False).out.data
        dense = swiglu(x, *(params[f"m.expert0.{w}"] for w in ("gate", "up", "down"))).data
    derr = np.abs(moe - dense).max()
    return distinct and simplex and derr < 1e-6, f"top-k distinct={distinct} simplex={simplex} dense err {derr:.1e}"


def check_init_identity(n: int = 100):
    cfg = tiny_config("f32", height=8, width=8)
    model = SparseDiT.create(cfg, seed=3)
    enc = PromptEncoder(tiny_encoder(cfg.d))
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(n):
        x = rng.standard_normal((1, 1, 8, 8)) * 3
        v = model(x, enc(int(rng.integers(0, 5))), rng.random())
        worst = max(worst, float(np.abs(v).max()))
    return worst == 0.0, f"max |output| {worst:.1e} over {n} inputs"


def check_euler_oracle():
    c = np.array([[[[0.3, -1.2], [2.0, 0.5]]]])
    field = lambda x, b, t: np.broadcast_to(c, x.shape)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 1, 2, 2))
    worst = 0.0
    for steps in (1, 7, 50):
        out = euler_sample(field, None, steps, 1.0, rng, x0.shape, x0=x0, dtype=np.float64)
        worst = max(worst, float(np.abs(out - (x0 + c)).max()))
    return worst < 1e-6, f"max error {worst:.1e} for steps 1, 7, 50"


def check_checkpoint_roundtrip():
    model = SparseDiT.create(tiny_config("f32"), seed=5, zero_init=False)
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_model(a, model, "model")
        loaded, _ = load_model(a, "model")
        save_model(b, loaded, "model")
        same = a.read_bytes() == b.read_bytes()
    return same and loaded.checksum() == model.checksum(), f"byte-identical resave={same}"


def check_dedup_k1():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((60, 16))
    X = np.concatenate([base, base[:20] + 0.02 * rng.standard_normal((20, 16))])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    ids = np.arange(len(X))
    two = dedup_features(ids, X, K=1, theta=0.95)
    ref = all_pairs_dedup(ids, X, 0.95)
    norm = lambda idx: sorted(sorted(g) for g in idx.groups)
    same = norm(two) == norm(ref) and two.removed == ref.removed
    return same, f"{len(ref.groups)} groups, identical={same}"


SUITES = {
    "gradients": check_model_gradients,
    "flow-path": check_path,
    "routing": check_routing,
    "init-identity": check_init_identity,
    "euler-oracle": check_euler_oracle,
    "checkpoint": check_checkpoint_roundtrip,
    "dedup-k1": check_dedup_k1,
}


def run_all(names=None, emit=print) -> list[CheckResult]:
    results = []
    for name in names or SUITES:
        r = _timed(name, SUITES[name])
        emit(r.line())
        results.append(r)
    return results
