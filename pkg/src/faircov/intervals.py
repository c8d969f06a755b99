"""Prediction intervals as unions of closed components.

A calibrated prediction is the union over label bins of the band
``[q_lo - r, q_hi + r]`` intersected with the bin, where the shift ``r``
depends on the record's group and the bin. Components touching at a bin
bound merge, and bin pieces are closed at merge time (a measure-zero
change from the half-open bins), so every prediction is a set of closed,
pairwise disjoint, ascending intervals. When every piece is empty the
prediction degenerates to a zero-width fallback point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .core import ValidationError

if TYPE_CHECKING:  # pragma: no cover - import only for type checkers
    from .fair_calibration import ThresholdTable

__all__ = [
    "IntervalSet",
    "predict_interval",
    "contains",
    "total_width",
    "union_widths",
    "union_covered",
]


@dataclass(frozen=True)
class IntervalSet:
    """Union of closed intervals, or a single fallback point if empty."""

    components: tuple[tuple[float, float], ...]
    fallback_point: float | None = None

    def __post_init__(self):
        for a, b in self.components:
            if b < a:
                raise ValidationError(f"interval component ({a}, {b}) is inverted")
        for (_, b), (a2, _) in zip(self.components, self.components[1:]):
            if a2 <= b:
                raise ValidationError("interval components must be disjoint and ascending")
        if self.components and self.fallback_point is not None:
            raise ValidationError("fallback point only applies to empty unions")
        if not self.components and self.fallback_point is None:
            raise ValidationError("an empty union requires a fallback point")

    @classmethod
    def from_pieces(
        cls,
        pieces: list[tuple[float, float]],
        fallback: float | None = None,
    ) -> "IntervalSet":
        """Normalize raw pieces: drop inverted ones, merge touching ones."""
        kept = sorted((a, b) for a, b in pieces if b >= a)
        merged: list[tuple[float, float]] = []
        for a, b in kept:
            if merged and a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], b))
            else:
                merged.append((a, b))
        if merged:
            return cls(components=tuple(merged))
        if fallback is None:
            raise ValidationError("all pieces empty and no fallback point supplied")
        return cls(components=(), fallback_point=float(fallback))

    def contains(self, y: float) -> bool:
        if not self.components:
            return y == self.fallback_point
        return any(a <= y <= b for a, b in self.components)

    def total_width(self) -> float:
        """Sum of component lengths; zero for a fallback-only prediction."""
        return float(sum(b - a for a, b in self.components))

    def hull_width(self) -> float:
        """Width of the convex hull of the union (secondary diagnostic)."""
        if not self.components:
            return 0.0
        return self.components[-1][1] - self.components[0][0]

    def as_text(self) -> str:
        return ";".join(f"{repr(a)}:{repr(b)}" for a, b in self.components)


def contains(interval_set: IntervalSet, y: float) -> bool:
    """Whether the union (or its fallback point) contains the label."""
    return interval_set.contains(y)


def total_width(interval_set: IntervalSet) -> float:
    """Total length of the union; the fallback point has zero width."""
    return interval_set.total_width()


def predict_interval(
    q_lo: float,
    q_hi: float,
    group: int,
    table: "ThresholdTable",
    median: float | None = None,
) -> IntervalSet:
    """Build the union-of-bins prediction for one record.

    Each bin contributes ``[q_lo - r, q_hi + r]`` clipped to the bin,
    where ``r`` is the table entry for (bin, group). ``median`` seeds the
    fallback point when every piece is empty; without one the band
    midpoint is used. The fallback is clipped to the label domain.
    """
    if q_lo > q_hi:
        raise ValidationError("q_lo exceeds q_hi; quantile bands must be ordered")
    if not 0 <= group < table.group_count:
        raise ValidationError(f"group id {group} outside [0, {table.group_count})")
    bounds = table.partition.bounds
    pieces: list[tuple[float, float]] = []
    for m in range(table.partition.m):
        r = float(table.r_hat[m, group])
        a = max(q_lo - r, bounds[m])
        b = min(q_hi + r, bounds[m + 1])
        if b >= a:
            pieces.append((a, b))
    lo, hi = table.partition.label_domain
    center = median if median is not None else (q_lo + q_hi) / 2.0
    fallback = float(min(max(center, lo), hi))
    return IntervalSet.from_pieces(pieces, fallback=fallback)


def union_widths(
    q_lo: np.ndarray,
    q_hi: np.ndarray,
    group: np.ndarray,
    r_hat: np.ndarray,
    bounds: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized union widths.

    Returns ``(width, has_piece)`` arrays over records; semantics match
    :func:`predict_interval` exactly (zero-width pieces count as pieces).
    """
    r = r_hat[:, group]  # (M, n)
    a = np.maximum(q_lo[None, :] - r, bounds[:-1, None])
    b = np.minimum(q_hi[None, :] + r, bounds[1:, None])
    length = b - a
    valid = length >= 0.0
    width = np.where(valid, length, 0.0).sum(axis=0)
    return width, valid.any(axis=0)


def union_covered(
    q_lo: np.ndarray,
    q_hi: np.ndarray,
    y: np.ndarray,
    group: np.ndarray,
    r_hat: np.ndarray,
    bounds: np.ndarray,
    fallback: np.ndarray,
) -> np.ndarray:
    """Vectorized membership test mirroring :meth:`IntervalSet.contains`."""
    r = r_hat[:, group]
    a = np.maximum(q_lo[None, :] - r, bounds[:-1, None])
    b = np.minimum(q_hi[None, :] + r, bounds[1:, None])
    valid = b >= a
    inside = valid & (a <= y[None, :]) & (y[None, :] <= b)
    covered = inside.any(axis=0)
    no_piece = ~valid.any(axis=0)
    return np.where(no_piece, y == fallback, covered)
