"""Dual-stream then single-stream sparse-MoE diffusion transformer."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..conditioning import ConditioningBundle
from ..core import (
    ShapeError,
    Tensor,
    concat,
    getitem,
    layer_norm,
    linear,
    mul,
    no_grad,
    reshape,
    rms_norm,
    scaled_dot_attention,
    silu,
    transpose,
)
from .embed import image_positions, patchify, text_positions, timestep_features, unpatchify
from .moe import RouterDecision, RoutingConfigError, moe_forward

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class SparseDiTConfig:
    d: int = 64
    n_heads: int = 4
    L_dual: int = 2
    L_single: int = 2
    patch_size: int = 2
    in_channels: int = 1
    n_experts: int = 4
    top_k: int = 2
    shared_expert: bool = True
    expert_hidden: int = 128
    load_balance_coeff: float = 0.01
    height: int = 16
    width: int = 16
    precision: str = "f32"
    eps: float = 1e-6

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % 4:
            raise ValueError("d must be divisible by 4 for 2D positional features")
        if not 1 <= self.top_k <= self.n_experts:
            raise RoutingConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ShapeError(f"patch size {self.patch_size} must divide {self.height}x{self.width}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.L_dual < 0 or self.L_single < 0 or self.L_dual + self.L_single == 0:
            raise ValueError("need at least one transformer block")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def n_blocks(self) -> int:
        return self.L_dual + self.L_single

    def replace(self, **kw) -> "SparseDiTConfig":
        return SparseDiTConfig(**{**asdict(self), **kw})


def _stream_shapes(cfg: SparseDiTConfig, prefix: str) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.expert_hidden
    shapes = {
        f"{prefix}.ada.w": (d, 6 * d),
        f"{prefix}.ada.b": (6 * d,),
        f"{prefix}.q.w": (d, d),
        f"{prefix}.k.w": (d, d),
        f"{prefix}.v.w": (d, d),
        f"{prefix}.q_gain": (cfg.n_heads, 1, 1),
        f"{prefix}.k_gain": (cfg.n_heads, 1, 1),
        f"{prefix}.out.w": (d, d),
        f"{prefix}.out.b": (d,),
        f"{prefix}.moe.router": (d, cfg.n_experts),
    }
    experts = [f"expert{e}" for e in range(cfg.n_experts)]
    if cfg.shared_expert:
        experts.append("shared")
    for name in experts:
        shapes[f"{prefix}.moe.{name}.gate"] = (d, h)
        shapes[f"{prefix}.moe.{name}.up"] = (d, h)
        shapes[f"{prefix}.moe.{name}.down"] = (h, d)
    return shapes


def param_shapes(cfg: SparseDiTConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "x_embed.w": (cfg.patch_dim, d),
        "x_embed.b": (d,),
        "txt_in.w": (d, d),
        "txt_in.b": (d,),
        "pool_in.w": (d, d),
        "pool_in.b": (d,),
        "t_mlp.w1": (d, d),
        "t_mlp.b1": (d,),
        "t_mlp.w2": (d, d),
        "t_mlp.b2": (d,),
    }
    for i in range(cfg.L_dual):
        shapes.update(_stream_shapes(cfg, f"dual{i}.img"))
        shapes.update(_stream_shapes(cfg, f"dual{i}.txt"))
    for i in range(cfg.L_single):
        shapes.update(_stream_shapes(cfg, f"single{i}"))
    shapes.update(
        {
            "final.ada.w": (d, 2 * d),
            "final.ada.b": (2 * d,),
            "final.head.w": (d, cfg.patch_dim),
            "final.head.b": (cfg.patch_dim,),
        }
    )
    return shapes


def param_count(cfg: SparseDiTConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: SparseDiTConfig, seed: int = 0, zero_init: bool = True) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights; adaLN and output head zeroed when ``zero_init``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("_gain",)):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        if zero_init and (".ada." in name or name.startswith("final.head")):
            arr = np.zeros(shape)
        params[name] = arr.astype(cfg.dtype)
    return params


@dataclass
class ForwardResult:
    velocity: Tensor
    aux_loss: Tensor | None
    features: dict[int, Tensor] = field(default_factory=dict)
    decisions: list[RouterDecision] = field(default_factory=list)


def _modulation(p: dict[str, Tensor], prefix: str, cond: Tensor, n_chunks: int) -> list[Tensor]:
    mods = linear(silu(cond), p[prefix + ".ada.w"], p[prefix + ".ada.b"])
    B = mods.shape[0]
    mods = reshape(mods, (B, 1, mods.shape[-1]))
    d = mods.shape[-1] // n_chunks
    return [getitem(mods, (slice(None), slice(None), slice(i * d, (i + 1) * d))) for i in range(n_chunks)]


def ada_ln_modulate(x: Tensor, shift: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """``layer_norm(x) * (1 + scale) + shift``."""
    return layer_norm(x, eps) * (scale + 1.0) + shift


def qk_normalize(q: Tensor, k: Tensor, q_gain: Tensor, k_gain: Tensor, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """RMS-normalize each head vector of ``[B, H, n, d_head]`` and apply a per-head gain."""
    return rms_norm(q, eps) * q_gain, rms_norm(k, eps) * k_gain


class _Stream:
    """Parameter view for one modality stream (or the unified single stream)."""

    def __init__(self, model: "SparseDiT", p: dict[str, Tensor], prefix: str):
        self.cfg = model.cfg
        self.p = p
        self.prefix = prefix

    def modulation(self, cond: Tensor) -> list[Tensor]:
        return _modulation(self.p, self.prefix, cond, 6)

    def qkv(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, n, d = h.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        p, pre = self.p, self.prefix

        def heads(w):
            return transpose(reshape(linear(h, p[w]), (B, n, H, dh)), (0, 2, 1, 3))

        q, k = qk_normalize(heads(pre + ".q.w"), heads(pre + ".k.w"), p[pre + ".q_gain"], p[pre + ".k_gain"], self.cfg.eps)
        return q, k, heads(pre + ".v.w")

    def project_out(self, attn: Tensor) -> Tensor:
        B, H, n, dh = attn.shape
        merged = reshape(transpose(attn, (0, 2, 1, 3)), (B, n, H * dh))
        return linear(merged, self.p[self.prefix + ".out.w"], self.p[self.prefix + ".out.b"])

    def ffn(self, x: Tensor, shift: Tensor, scale: Tensor, gate: Tensor):
        cfg = self.cfg
        res = moe_forward(
            ada_ln_modulate(x, shift, scale, cfg.eps),
            self.p,
            self.prefix + ".moe",
            cfg.n_experts,
            cfg.top_k,
            cfg.shared_expert,
            cfg.load_balance_coeff,
        )
        return x + mul(gate, res.out), res


class SparseDiT:
    """Velocity model ``u(X_t, y, t)`` over ``[B, C, H, W]`` latents.

    Parameters live in ``self.params`` as plain arrays. ``forward`` takes an
    optional dict of leaf Tensors so callers control which weights receive
    gradients (teacher weights stay frozen by passing non-grad leaves).
    """

    def __init__(self, cfg: SparseDiTConfig, params: dict[str, np.ndarray]):
        want = param_shapes(cfg)
        if set(want) != set(params):
            missing = sorted(set(want) - set(params))[:3]
            extra = sorted(set(params) - set(want))[:3]
            raise ValueError(f"parameter set does not match config (missing {missing}, unexpected {extra})")
        for name, shape in want.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = {k: np.ascontiguousarray(v, dtype=cfg.dtype) for k, v in params.items()}

    @classmethod
    def create(cls, cfg: SparseDiTConfig, seed: int = 0, zero_init: bool = True) -> "SparseDiT":
        return cls(cfg, init_params(cfg, seed, zero_init))

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "SparseDiT":
        return SparseDiT(self.cfg, copy.deepcopy(self.params))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def cast(self, precision: str) -> "SparseDiT":
        return SparseDiT(self.cfg.replace(precision=precision), self.params)

    # -- pieces --------------------------------------------------------
    def condition_vector(self, p: dict[str, Tensor], pooled: np.ndarray, t: np.ndarray) -> Tensor:
        dt = self.cfg.dtype
        raw = Tensor(timestep_features(t, self.cfg.d).astype(dt))
        temb = linear(silu(linear(raw, p["t_mlp.w1"], p["t_mlp.b1"])), p["t_mlp.w2"], p["t_mlp.b2"])
        return temb + linear(Tensor(pooled.astype(dt)), p["pool_in.w"], p["pool_in.b"])

    def dual_block(self, p, i: int, img: Tensor, txt: Tensor, cond: Tensor):
        s_img = _Stream(self, p, f"dual{i}.img")
        s_txt = _Stream(self, p, f"dual{i}.txt")
        m_img, m_txt = s_img.modulation(cond), s_txt.modulation(cond)
        eps = self.cfg.eps
        qi, ki, vi = s_img.qkv(ada_ln_modulate(img, m_img[0], m_img[1], eps))
        qt, kt, vt = s_txt.qkv(ada_ln_modulate(txt, m_txt[0], m_txt[1], eps))
        n_txt = txt.shape[1]
        attn = scaled_dot_attention(concat([qt, qi], axis=2), concat([kt, ki], axis=2), concat([vt, vi], axis=2))
        a_txt = getitem(attn, (slice(None), slice(None), slice(0, n_txt)))
        a_img = getitem(attn, (slice(None), slice(None), slice(n_txt, None)))
        img = img + mul(m_img[2], s_img.project_out(a_img))
        txt = txt + mul(m_txt[2], s_txt.project_out(a_txt))
        img, r_img = s_img.ffn(img, m_img[3], m_img[4], m_img[5])
        txt, r_txt = s_txt.ffn(txt, m_txt[3], m_txt[4], m_txt[5])
        return img, txt, [r_img, r_txt]

    def single_block(self, p, i: int, tokens: Tensor, cond: Tensor):
        s = _Stream(self, p, f"single{i}")
        m = s.modulation(cond)
        q, k, v = s.qkv(ada_ln_modulate(tokens, m[0], m[1], self.cfg.eps))
        tokens = tokens + mul(m[2], s.project_out(scaled_dot_attention(q, k, v)))
        tokens, r = s.ffn(tokens, m[3], m[4], m[5])
        return tokens, [r]

    # -- full model ----------------------------------------------------
    def forward(
        self,
        x,
        cond: ConditioningBundle,
        t,
        params: dict[str, Tensor] | None = None,
        taps: tuple[int, ...] = (),
    ) -> ForwardResult:
        cfg = self.cfg
        p = params if params is not None else self.leaves(requires_grad=False)
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=cfg.dtype))
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        B, C, H, W = x.shape
        if C != cfg.in_channels or H % cfg.patch_size or W % cfg.patch_size:
            raise ShapeError(
                f"latent {x.shape[1:]} incompatible with in_channels={cfg.in_channels}, patch={cfg.patch_size}"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        pooled = np.broadcast_to(cond.pooled, (B, cfg.d))
        seq = cond.sequence
        if seq.ndim == 2:
            seq = np.broadcast_to(seq, (B,) + seq.shape)
        if seq.shape[0] != B or seq.shape[-1] != cfg.d:
            raise ShapeError(f"conditioning sequence {seq.shape} does not match batch {B} / width {cfg.d}")

        hp, wp = H // cfg.patch_size, W // cfg.patch_size
        img = patchify(x, cfg.patch_size, (p["x_embed.w"], p["x_embed.b"]))
        img = img + Tensor(image_positions(hp, wp, cfg.d).astype(cfg.dtype))
        n_txt = seq.shape[1]
        txt = linear(Tensor(seq.astype(cfg.dtype)), p["txt_in.w"], p["txt_in.b"])
        txt = txt + Tensor(text_positions(n_txt, cfg.d).astype(cfg.dtype))
        c = self.condition_vector(p, pooled, t)

        results = []
        features: dict[int, Tensor] = {}
        for i in range(cfg.L_dual):
            img, txt, r = self.dual_block(p, i, img, txt, c)
            results += r
            if i in taps:
                features[i] = img
        tokens = concat([txt, img], axis=1)
        for j in range(cfg.L_single):
            tokens, r = self.single_block(p, j, tokens, c)
            results += r
            if cfg.L_dual + j in taps:
                features[cfg.L_dual + j] = getitem(tokens, (slice(None), slice(n_txt, None)))
        img = getitem(tokens, (slice(None), slice(n_txt, None)))

        shift, scale = _modulation(p, "final", c, 2)
        out = linear(ada_ln_modulate(img, shift, scale, cfg.eps), p["final.head.w"], p["final.head.b"])
        velocity = unpatchify(out, cfg.patch_size, C, H, W)

        aux = None
        for r in results:
            aux = r.aux_loss if aux is None else aux + r.aux_loss
        return ForwardResult(velocity, aux, features, [r.decision for r in results])

    def __call__(self, x, cond: ConditioningBundle, t) -> np.ndarray:
        """Inference-only velocity as a plain array."""
        with no_grad():
            return self.forward(x, cond, t).velocity.data

    def default_taps(self) -> tuple[int, ...]:
        taps = []
        if self.cfg.L_dual:
            taps.append(self.cfg.L_dual - 1)
        if self.cfg.L_single:
            taps.append(self.cfg.n_blocks - 1)
        return tuple(taps)
