"""JPEG-like compressibility proxy: 8x8 DCT, quantization, coded-size estimate.

Not bit-compatible JPEG. Bit costs follow the baseline scheme's structure
(DC difference category, AC run/size symbols, EOB and ZRL codes) with
fixed symbol lengths instead of fitted Huffman tables.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn

# ITU-T T.81 Annex K luminance table
LUMA_Q = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

SYMBOL_BITS = 4  # fixed cost of a run/size or DC-category symbol
EOB_BITS = 4
ZRL_BITS = 11


def _zigzag() -> np.ndarray:
    order = sorted(((i, j) for i in range(8) for j in range(8)), key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]))
    return np.array([i * 8 + j for i, j in order])


ZIGZAG = _zigzag()


def quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    q = min(max(int(quality), 1), 100)
    scale = 5000 / q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((LUMA_Q * scale + 50) / 100), 1, 255)


def _category(v: np.ndarray) -> np.ndarray:
    """Magnitude category (bit length of |v|), 0 for zero."""
    a = np.abs(v).astype(np.int64)
    out = np.zeros(a.shape, dtype=np.int64)
    nz = a > 0
    out[nz] = np.floor(np.log2(a[nz])).astype(np.int64) + 1
    return out


def _to_levels(pixels: np.ndarray) -> np.ndarray:
    x = np.asarray(pixels)
    if x.ndim == 3:
        x = x.mean(axis=0)
    if x.dtype == np.uint8:
        return x.astype(np.float64)
    return np.clip(x.astype(np.float64), 0.0, 1.0) * 255.0


def coded_bits(pixels: np.ndarray, quality: int = 75) -> int:
    img = _to_levels(pixels)
    H, W = img.shape
    ph, pw = (-H) % 8, (-W) % 8
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    hb, wb = img.shape[0] // 8, img.shape[1] // 8
    blocks = img.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8) - 128.0
    coef = dctn(blocks, axes=(1, 2), norm="ortho")
    q = np.round(coef / quant_table(quality)).astype(np.int64).reshape(-1, 64)[:, ZIGZAG]

    dc = q[:, 0]
    dc_diff = np.diff(dc, prepend=0)
    bits = int((SYMBOL_BITS + _category(dc_diff)).sum())

    ac = q[:, 1:]
    nz = ac != 0
    bits += int((SYMBOL_BITS * nz + _category(ac) * nz).sum())
    for row, mask in zip(ac, nz):
        pos = np.flatnonzero(mask)
        if pos.size:
            gaps = np.diff(pos, prepend=-1) - 1
            bits += ZRL_BITS * int((gaps // 16).sum())
            if pos[-1] != 62:
                bits += EOB_BITS
        else:
            bits += EOB_BITS
    return bits


def bytes_per_pixel(record_or_pixels, quality: int = 75) -> float:
    """Estimated compressed bytes divided by pixel count (always > 0)."""
    pixels = getattr(record_or_pixels, "pixels", record_or_pixels)
    img = _to_levels(pixels)
    n = img.shape[0] * img.shape[1]
    return coded_bits(pixels, quality) / 8.0 / n
