"""Patch tokenization and fixed sinusoidal features."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..core import ShapeError, Tensor, linear, reshape, transpose


def patchify(latent, p: int, embed: tuple[Tensor, Tensor | None] | None = None) -> Tensor:
    """Cut ``[B,] C, H, W`` latents into row-major p x p patches.

    Each token is the flattened ``(C, p, p)`` patch, optionally followed by
    the linear ``embed = (weight, bias)``.
    """
    x = latent if isinstance(latent, Tensor) else Tensor(latent)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ShapeError(f"patch size {p} does not divide latent {H}x{W}")
    hp, wp = H // p, W // p
    x = reshape(x, (B, C, hp, p, wp, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    tokens = reshape(x, (B, hp * wp, C * p * p))
    if embed is not None:
        tokens = linear(tokens, *embed)
    if squeeze:
        tokens = reshape(tokens, tokens.shape[1:])
    return tokens


def unpatchify(tokens, p: int, channels: int, height: int, width: int, unembed=None) -> Tensor:
    """Inverse of :func:`patchify` (after the optional ``unembed`` projection)."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if unembed is not None:
        x = linear(x, *unembed)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if height % p or width % p:
        raise ShapeError(f"patch size {p} does not divide latent {height}x{width}")
    hp, wp = height // p, width // p
    B = x.shape[0]
    if x.shape[1:] != (hp * wp, channels * p * p):
        raise ShapeError(f"tokens {x.shape} do not match a {channels}x{height}x{width} latent with p={p}")
    x = reshape(x, (B, hp, wp, channels, p, p))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    out = reshape(x, (B, channels, height, width))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def timestep_features(t, d: int, max_freq: float = 10000.0) -> np.ndarray:
    """Interleaved ``[sin(t w_j), cos(t w_j)]`` with w_j geometric from 1 to ``max_freq``."""
    if d % 2:
        raise ShapeError(f"timestep embedding width must be even, got {d}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = max_freq ** (np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _sincos_1d(pos: np.ndarray, d: int) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(d // 2) / (d // 2))
    ang = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@lru_cache(maxsize=64)
def _pos2d(hp: int, wp: int, d: int) -> np.ndarray:
    if d % 4:
        raise ShapeError(f"2D positional embedding needs width divisible by 4, got {d}")
    rows, cols = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    emb = np.concatenate(
        [_sincos_1d(rows.reshape(-1).astype(np.float64), d // 2), _sincos_1d(cols.reshape(-1).astype(np.float64), d // 2)],
        axis=1,
    )
    emb.setflags(write=False)
    return emb


@lru_cache(maxsize=64)
def _pos1d(n: int, d: int) -> np.ndarray:
    emb = _sincos_1d(np.arange(n, dtype=np.float64), d)
    emb.setflags(write=False)
    return emb


def image_positions(hp: int, wp: int, d: int) -> np.ndarray:
    """Fixed 2D sin/cos table for an ``hp x wp`` patch grid, shape (hp*wp, d)."""
    return _pos2d(hp, wp, d)


def text_positions(n: int, d: int) -> np.ndarray:
    return _pos1d(n, d)
