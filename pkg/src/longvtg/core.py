"""Span arithmetic, dot products and score normalization shared by all stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GroundingError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(GroundingError, ValueError):
    pass


class EmptyInput(GroundingError, ValueError):
    pass


class EmptyRange(GroundingError, ValueError):
    pass


@dataclass(frozen=True, order=True)
class Span:
    """Half-open time interval ``[start, end)`` in seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValueError(f"non-finite span {self.start!r}, {self.end!r}")
        if self.start > self.end:
            raise ValueError(f"span start {self.start} > end {self.end}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def intersection(self, other: "Span") -> float:
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))


def iou(a: Span, b: Span) -> float:
    inter = a.intersection(b)
    union = a.duration + b.duration - inter
    if union <= 0.0 or a.duration <= 0.0 or b.duration <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(starts_a, ends_a, starts_b, ends_b) -> np.ndarray:
    """Pairwise IoU between two sets of intervals, shape ``(len(a), len(b))``."""
    sa = np.asarray(starts_a, dtype=np.float64)[:, None]
    ea = np.asarray(ends_a, dtype=np.float64)[:, None]
    sb = np.asarray(starts_b, dtype=np.float64)[None, :]
    eb = np.asarray(ends_b, dtype=np.float64)[None, :]
    inter = np.clip(np.minimum(ea, eb) - np.maximum(sa, sb), 0.0, None)
    union = (ea - sa) + (eb - sb) - inter
    valid = (union > 0) & (ea > sa) & (eb > sb)
    out = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=valid)
    return out


def dot(a, b) -> float:
    """Left-to-right accumulated dot product of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension {a.size} != {b.size}")
    total = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        total += x * y
    return total


def min_max_normalize(scores) -> np.ndarray:
    """Affinely map scores onto [0, 1]; all-equal input maps to 0.5."""
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInput("cannot normalize an empty score list")
    if not np.all(np.isfinite(x)):
        raise ValueError("scores must be finite")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full(x.shape, 0.5)
    return (x - lo) / (hi - lo)
