"""Ordered filter chain with first-failure drop attribution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .bpp import bytes_per_pixel

MISSING_POLICIES = ("drop", "keep", "error")


class MissingScoreError(KeyError):
    pass


@dataclass
class FilterStage:
    """Keep a record when ``score >= threshold`` (direction "min") or ``<=`` ("max").

    ``scorer`` is either a callable on the record or the name of an
    externally supplied score in ``record.scores``.
    """

    name: str
    scorer: str | Callable
    threshold: float
    direction: str = "min"

    def __post_init__(self):
        if self.direction not in ("min", "max"):
            raise ValueError(f"direction must be 'min' or 'max', got {self.direction!r}")

    def score(self, record) -> float | None:
        if callable(self.scorer):
            return float(self.scorer(record))
        return record.scores.get(self.scorer)

    def passes(self, value: float) -> bool:
        return value >= self.threshold if self.direction == "min" else value <= self.threshold


@dataclass
class FilterResult:
    kept: list
    drop_counts: dict[str, int]
    dropped_by: dict[int, str] = field(default_factory=dict)


def filter_chain(records, chain: list[FilterStage], missing: str = "error") -> FilterResult:
    if missing not in MISSING_POLICIES:
        raise ValueError(f"missing-score policy must be one of {MISSING_POLICIES}")
    counts = {s.name: 0 for s in chain}
    kept, dropped = [], {}
    for r in records:
        failed = None
        for stage in chain:
            value = stage.score(r)
            if value is None:
                if missing == "error":
                    raise MissingScoreError(f"record {r.id} has no score for stage {stage.name!r}")
                if missing == "keep":
                    continue
                failed = stage.name
                break
            if not stage.passes(value):
                failed = stage.name
                break
        if failed is None:
            kept.append(r)
        else:
            counts[failed] += 1
            dropped[r.id] = failed
    return FilterResult(kept, counts, dropped)


def bpp_stage(threshold: float, quality: int = 75, name: str = "bytes_per_pixel") -> FilterStage:
    """Technical filter dropping unusually compressible images."""
    return FilterStage(name, lambda r: bytes_per_pixel(r, quality), threshold, "min")


def external_stage(name: str, threshold: float, direction: str = "min") -> FilterStage:
    """Stage backed by a sidecar score (NSFW, aesthetic, watermark, IQA)."""
    return FilterStage(name, name, threshold, direction)
