"""Toy latent datasets, the identity latent codec, and a latent cache file."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .model.checkpoint import load_arrays, save_arrays

DATASETS = ("gaussian", "two-gaussians", "shapes", "checker")
CACHE_VERSION = 1


class UnknownDatasetError(KeyError):
    pass


class LatentCodec:
    """Identity encoder/decoder standing in for a pretrained VAE."""

    def encode(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(images)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        return np.asarray(latents)


@dataclass
class Batch:
    latents: np.ndarray  # (n, C, H, W)
    prompt_ids: np.ndarray  # (n,) int
    masks: np.ndarray | None = None  # (n, H, W) bool shape support, shapes only


@dataclass
class ToyItem:
    latent: np.ndarray
    prompt_id: int
    mask: np.ndarray | None = None


@dataclass
class ShapeSpec:
    """Random rectangle (class 1) or disc (class 2) on a zero background."""

    min_extent: float = 0.25  # fraction of image side
    max_extent: float = 0.5
    min_value: float = 0.6
    max_value: float = 1.0
    class_regions: bool = True  # rectangles left half, discs right half


def draw_shape(rng: np.random.Generator, size: int, cls: int, spec: ShapeSpec) -> np.ndarray:
    """Boolean mask with exactly one shape of class ``cls`` (1 rectangle, 2 disc)."""
    lo = max(1, int(round(spec.min_extent * size)))
    hi = max(lo, int(round(spec.max_extent * size)))
    half = size // 2
    if spec.class_regions:
        col_lo, col_hi = (0, half) if cls == 1 else (half, size)
    else:
        col_lo, col_hi = 0, size
    yy, xx = np.mgrid[:size, :size]
    if cls == 1:
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, min(hi, col_hi - col_lo) + 1))
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(col_lo, col_hi - w + 1))
        return (yy >= r0) & (yy < r0 + h) & (xx >= c0) & (xx < c0 + w)
    diam = int(rng.integers(lo, min(hi, col_hi - col_lo) + 1))
    rad = diam / 2.0
    cy = rng.uniform(rad, size - rad)
    cx = rng.uniform(col_lo + rad, col_hi - rad)
    mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= rad * rad
    if not mask.any():
        mask[int(cy), int(cx)] = True
    return mask


class ToyDataset:
    """Deterministic synthetic latents with known statistics.

    Prompt ids: gaussian and checker use id 1; two-gaussians uses ids 1/2
    for the positive/negative mode; shapes uses 1 (rectangle) and 2 (disc).
    """

    def __init__(
        self,
        name: str,
        channels: int = 1,
        mu: float = 0.8,
        sigma: float = 0.3,
        shape_spec: ShapeSpec | None = None,
    ):
        if name not in DATASETS:
            raise UnknownDatasetError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
        self.name = name
        self.channels = channels
        self.mu = mu
        self.sigma = sigma
        self.shape_spec = shape_spec or ShapeSpec()

    def sample(self, rng: np.random.Generator, n: int, size: int) -> Batch:
        C = self.channels
        if self.name == "gaussian":
            x = self.mu + self.sigma * rng.standard_normal((n, C, size, size))
            return Batch(x, np.ones(n, dtype=np.int64))
        if self.name == "two-gaussians":
            cls = rng.integers(1, 3, size=n)
            sign = np.where(cls == 1, 1.0, -1.0)[:, None, None, None]
            x = sign * 0.7 + 0.2 * rng.standard_normal((n, C, size, size))
            return Batch(x, cls.astype(np.int64))
        if self.name == "checker":
            x = np.empty((n, C, size, size))
            yy, xx = np.mgrid[:size, :size]
            for i in range(n):
                cell = int(rng.choice([2, 4]))
                phase = int(rng.integers(0, 2))
                x[i] = (((yy // cell + xx // cell + phase) % 2) * 2.0 - 1.0)[None]
            return Batch(x, np.ones(n, dtype=np.int64))
        cls = rng.integers(1, 3, size=n)
        x = np.zeros((n, C, size, size))
        masks = np.zeros((n, size, size), dtype=bool)
        spec = self.shape_spec
        for i in range(n):
            masks[i] = draw_shape(rng, size, int(cls[i]), spec)
            value = rng.uniform(spec.min_value, spec.max_value)
            x[i][:, masks[i]] = value
        return Batch(x, cls.astype(np.int64), masks)


def toy_datasets(name: str, rng: np.random.Generator, size: int = 16, channels: int = 1, **kw) -> Iterator[ToyItem]:
    """Endless per-item stream drawn from :class:`ToyDataset`."""
    ds = ToyDataset(name, channels=channels, **kw)
    while True:
        b = ds.sample(rng, 1, size)
        yield ToyItem(b.latents[0], int(b.prompt_ids[0]), None if b.masks is None else b.masks[0])


# -- latent cache -------------------------------------------------------------
def write_latent_cache(path, batch: Batch, seed: int) -> None:
    arrays = {"latents": batch.latents, "prompt_ids": batch.prompt_ids}
    if batch.masks is not None:
        arrays["masks"] = batch.masks
    header = {"version": CACHE_VERSION, "seed": int(seed), "count": int(len(batch.latents)), "shape": list(batch.latents.shape[1:])}
    save_arrays(path, arrays, {"kind": "latent_cache", **header})


def read_latent_cache(path) -> tuple[Batch, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "latent_cache" or meta.get("version") != CACHE_VERSION:
        raise ValueError(f"{path}: not a version-{CACHE_VERSION} latent cache")
    return Batch(arrays["latents"], arrays["prompt_ids"], arrays.get("masks")), meta


class CachedDataset:
    """Serves batches from a precomputed pool in a seed-determined order."""

    def __init__(self, batch: Batch):
        self.pool = batch

    @classmethod
    def from_file(cls, path) -> "CachedDataset":
        return cls(read_latent_cache(path)[0])

    def sample(self, rng: np.random.Generator, n: int, size: int) -> Batch:
        if self.pool.latents.shape[-1] != size:
            raise ValueError(f"cache holds {self.pool.latents.shape[-1]}px latents, stage wants {size}px")
        idx = rng.integers(0, len(self.pool.latents), size=n)
        masks = None if self.pool.masks is None else self.pool.masks[idx]
        return Batch(self.pool.latents[idx], self.pool.prompt_ids[idx], masks)


# -- image output ------------------------------------------------------------
def to_uint8(x: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.clip(np.round((x - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def make_grid(latents: np.ndarray, ncol: int | None = None, pad: int = 1, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Tile ``(n, C, H, W)`` latents (first channel) into one 8-bit image."""
    n, _, H, W = latents.shape
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    grid = np.zeros((nrow * (H + pad) + pad, ncol * (W + pad) + pad), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, ncol)
        y, x = pad + r * (H + pad), pad + c * (W + pad)
        grid[y : y + H, x : x + W] = to_uint8(latents[i, 0], lo, hi)
    return grid


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit greyscale."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)
