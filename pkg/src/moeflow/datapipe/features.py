"""Unit-norm image descriptors for near-duplicate search."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import ImageRecord, read_jsonl

POOL = 8


@dataclass
class FeatureVector:
    vector: np.ndarray
    degenerate: bool = False


def _block_means(img: np.ndarray, out: int) -> np.ndarray:
    """Area-average pool a 2-D array onto an ``out x out`` grid."""
    H, W = img.shape
    rows = np.linspace(0, H, out + 1)
    cols = np.linspace(0, W, out + 1)
    # integral image gives exact fractional-area box sums
    ii = np.zeros((H + 1, W + 1))
    ii[1:, 1:] = img.cumsum(0).cumsum(1)

    def integral(y, x):
        y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
        y1, x1 = np.minimum(y0 + 1, H), np.minimum(x0 + 1, W)
        fy, fx = y - y0, x - x0
        return (
            ii[y0][:, x0] * (1 - fy)[:, None] * (1 - fx)
            + ii[y1][:, x0] * fy[:, None] * (1 - fx)
            + ii[y0][:, x1] * (1 - fy)[:, None] * fx
            + ii[y1][:, x1] * fy[:, None] * fx
        )

    S = integral(rows, cols)
    box = S[1:, 1:] - S[:-1, 1:] - S[1:, :-1] + S[:-1, :-1]
    area = np.diff(rows)[:, None] * np.diff(cols)[None, :]
    return box / area


def canonical_vector(dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = 1.0
    return v


def builtin_features(pixels: np.ndarray) -> FeatureVector:
    """8x8 average pool of the channel mean, centred and L2-normalized."""
    grey = np.asarray(pixels, dtype=np.float64)
    if grey.ndim == 3:
        grey = grey.mean(axis=0)
    v = _block_means(grey, POOL).reshape(-1)
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-12 * max(1.0, np.abs(grey).max()):
        return FeatureVector(canonical_vector(v.size), degenerate=True)
    return FeatureVector(v / norm)


class ExternalFeatures:
    """Descriptors read from a JSONL sidecar of ``{id, vector}`` rows."""

    def __init__(self, path: str | Path):
        self.table = {int(r["id"]): np.asarray(r["vector"], dtype=np.float64) for r in read_jsonl(path)}

    def __call__(self, record: ImageRecord) -> FeatureVector:
        v = self.table[record.id]
        norm = np.linalg.norm(v)
        if norm == 0:
            return FeatureVector(canonical_vector(v.size), degenerate=True)
        return FeatureVector(v / norm)


def extract_features(record: ImageRecord, extractor="builtin-downsample") -> FeatureVector:
    if extractor == "builtin-downsample":
        return builtin_features(record.pixels)
    if callable(extractor):
        return extractor(record)
    raise ValueError(f"unknown extractor {extractor!r}")
