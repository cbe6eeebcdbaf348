"""Corpus records, manifests, and sidecar files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import read_pgm


@dataclass
class ImageRecord:
    id: int
    pixels: np.ndarray  # C x H x W, float in [0, 1]
    metadata: dict[str, str] = field(default_factory=dict)
    scores: dict[str, float] = field(default_factory=dict)


class DuplicateIdError(ValueError):
    pass


def check_unique_ids(records) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise DuplicateIdError(f"record id {r.id} appears more than once")
        seen.add(r.id)


def read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        img = read_pgm(path)
    else:
        from PIL import Image

        img = np.asarray(Image.open(path).convert("L"))
    return (img.astype(np.float64) / 255.0)[None]


def load_manifest(path) -> list[ImageRecord]:
    """Read a JSONL manifest of ``{id, path, metadata}``; paths are manifest-relative."""
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        img_path = Path(row["path"])
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        records.append(ImageRecord(int(row["id"]), read_image(img_path), {str(k): str(v) for k, v in row.get("metadata", {}).items()}))
    check_unique_ids(records)
    return records


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def load_scores(path) -> dict[int, float]:
    """Score sidecar: JSONL rows of ``{id, score}``."""
    return {int(r["id"]): float(r["score"]) for r in read_jsonl(path)}


def attach_scores(records, name: str, scores: dict[int, float]) -> None:
    for r in records:
        if r.id in scores:
            r.scores[name] = scores[r.id]
