"""Synthetic stand-ins for the hybrid text encoders.

No text is tokenized. A prompt is an integer id; every pseudo-embedding is
a deterministic function of (seed, prompt_id, role, layer, position) via a
splitmix64 hash followed by a Box-Muller transform. Id 0 is reserved for
the null (unconditional) prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NULL_PROMPT_ID = 0

_ROLE_T5 = 1
_ROLE_LLM = 2
_ROLE_POOLED = 3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderStubConfig:
    d_t5: int = 32
    d_llm: int = 32
    d: int = 64
    M_t5: int = 4
    M_llm: int = 4
    L: int = 2
    d_clip: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("d_t5", "d_llm", "d", "M_t5", "M_llm", "L", "d_clip"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder stub dimension {name} must be positive")

    @property
    def n_tokens(self) -> int:
        return self.M_t5 + self.M_llm


@dataclass(frozen=True)
class ConditioningBundle:
    """Pooled global vector plus text token sequence for one prompt (or a batch)."""

    pooled: np.ndarray
    sequence: np.ndarray
    prompt_id: int | tuple[int, ...]

    @property
    def batched(self) -> bool:
        return self.pooled.ndim == 2


def splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x.astype(np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _key(*fields: int) -> np.uint64:
    h = np.zeros((), dtype=np.uint64)
    for f in fields:
        h = splitmix64(h ^ np.uint64(f & 0xFFFFFFFFFFFFFFFF))
    return h


def pseudo_normal(shape: tuple[int, ...], *fields: int) -> np.ndarray:
    """Unit-variance pseudo-normal array keyed by integer ``fields``."""
    n = int(np.prod(shape))
    base = _key(*fields)
    idx = np.arange(2 * n, dtype=np.uint64)
    bits = splitmix64(base ^ splitmix64(idx))
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(shape)


def make_projections(cfg: EncoderStubConfig, dtype=np.float64) -> dict[str, np.ndarray]:
    """Fixed random projections into model width ``d`` (fan-in scaled)."""
    proj = {
        "t5": pseudo_normal((cfg.d_t5, cfg.d), cfg.seed, 101) / np.sqrt(cfg.d_t5),
        "llm": pseudo_normal((cfg.L * cfg.d_llm, cfg.d), cfg.seed, 102) / np.sqrt(cfg.L * cfg.d_llm),
        "pooled": pseudo_normal((cfg.d_clip, cfg.d), cfg.seed, 103) / np.sqrt(cfg.d_clip),
    }
    return {k: v.astype(dtype) for k, v in proj.items()}


def _check_projections(cfg: EncoderStubConfig, proj: dict[str, np.ndarray]) -> None:
    want = {
        "t5": (cfg.d_t5, cfg.d),
        "llm": (cfg.L * cfg.d_llm, cfg.d),
        "pooled": (cfg.d_clip, cfg.d),
    }
    for k, shape in want.items():
        if k not in proj or proj[k].shape != shape:
            got = None if k not in proj else proj[k].shape
            raise ConfigError(f"projection {k!r} must have shape {shape}, got {got}")


def encode_prompt(prompt_id: int, cfg: EncoderStubConfig, projections: dict[str, np.ndarray]) -> ConditioningBundle:
    _check_projections(cfg, projections)
    dtype = projections["t5"].dtype
    h_t5 = np.stack([pseudo_normal((cfg.d_t5,), cfg.seed, prompt_id, _ROLE_T5, 0, m) for m in range(cfg.M_t5)])
    # per token: L tapped layers concatenated along features -> (M_llm, L*d_llm)
    h_llm = np.stack(
        [
            np.concatenate(
                [pseudo_normal((cfg.d_llm,), cfg.seed, prompt_id, _ROLE_LLM, layer, m) for layer in range(cfg.L)]
            )
            for m in range(cfg.M_llm)
        ]
    )
    seq = np.concatenate([h_t5 @ projections["t5"], h_llm @ projections["llm"]], axis=0)
    raw = pseudo_normal((cfg.d_clip,), cfg.seed, prompt_id, _ROLE_POOLED)
    pooled = raw @ projections["pooled"]
    pooled = pooled / np.linalg.norm(pooled)
    return ConditioningBundle(pooled.astype(dtype), seq.astype(dtype), int(prompt_id))


def null_condition(cfg: EncoderStubConfig, dtype=np.float64) -> ConditioningBundle:
    return ConditioningBundle(
        np.zeros(cfg.d, dtype=dtype),
        np.zeros((cfg.n_tokens, cfg.d), dtype=dtype),
        NULL_PROMPT_ID,
    )


def stack_bundles(bundles: list[ConditioningBundle]) -> ConditioningBundle:
    return ConditioningBundle(
        np.stack([b.pooled for b in bundles]),
        np.stack([b.sequence for b in bundles]),
        tuple(int(b.prompt_id) for b in bundles),
    )


class PromptEncoder:
    """Memoizing front end for :func:`encode_prompt` with fixed projections."""

    def __init__(self, cfg: EncoderStubConfig, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.projections = make_projections(cfg, dtype)
        self._cache: dict[int, ConditioningBundle] = {}

    def __call__(self, prompt_id: int) -> ConditioningBundle:
        prompt_id = int(prompt_id)
        hit = self._cache.get(prompt_id)
        if hit is None:
            if prompt_id == NULL_PROMPT_ID:
                hit = null_condition(self.cfg, self.dtype)
            else:
                hit = encode_prompt(prompt_id, self.cfg, self.projections)
            self._cache[prompt_id] = hit
        return hit

    def batch(self, prompt_ids) -> ConditioningBundle:
        return stack_bundles([self(int(p)) for p in prompt_ids])

    def null(self, batch: int | None = None) -> ConditioningBundle:
        b = self(NULL_PROMPT_ID)
        return b if batch is None else stack_bundles([b] * batch)


def load_prompt_table(path: str | Path) -> dict[int, str]:
    """Read an optional ``{prompt_id: label}`` JSON table used for log lines."""
    raw = json.loads(Path(path).read_text())
    return {int(k): str(v) for k, v in raw.items()}
