"""Equal-mass partitioning of the label axis.

Bins carry roughly equal numbers of calibration labels. Interior bounds
sit at the midpoint between adjacent order statistics so no observed
label lies exactly on a cut when labels are distinct. Bins are numbered
1..M publicly; each bin is half-open ``[l_m, l_{m+1})`` except the last,
which is closed above so the partition tiles the label domain exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ValidationError

__all__ = ["BinPartition", "equal_mass_bins", "assign_bin", "bin_indices"]


@dataclass(frozen=True)
class BinPartition:
    """Ascending bin bounds over the label domain plus realized counts."""

    bounds: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.bounds) < 2:
            raise ValidationError("a partition needs at least two bounds")
        if any(b <= a for a, b in zip(self.bounds, self.bounds[1:])):
            raise ValidationError(f"bin bounds must be strictly ascending, got {self.bounds}")
        if len(self.counts) != len(self.bounds) - 1:
            raise ValidationError("one count per bin is required")
        if any(c < 1 for c in self.counts):
            raise ValidationError("every bin must hold at least one label")

    @property
    def m(self) -> int:
        return len(self.bounds) - 1

    @property
    def label_domain(self) -> tuple[float, float]:
        return self.bounds[0], self.bounds[-1]

    def to_payload(self) -> dict:
        return {"M": self.m, "bounds": list(self.bounds), "counts": list(self.counts)}

    @classmethod
    def from_payload(cls, payload: dict) -> "BinPartition":
        return cls(bounds=tuple(payload["bounds"]), counts=tuple(payload["counts"]))


def equal_mass_bins(labels, m: int, label_domain: tuple[float, float]) -> BinPartition:
    """Build M equal-mass bins from observed labels.

    The cut before bin m+1 is the midpoint between the ``ceil(m*N/M)``-th
    and the next smallest label. Outer bounds snap to the label domain.
    Duplicate labels can make the realized masses unequal; the cuts are
    kept and the realized counts reported, but a bin left empty by heavy
    duplication is an error.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValidationError("labels must be a non-empty vector")
    lo, hi = float(label_domain[0]), float(label_domain[1])
    if not lo < hi:
        raise ValidationError(f"label domain must be ordered, got {label_domain}")
    if y.min() < lo or y.max() > hi:
        raise ValidationError("labels fall outside the declared label domain")
    n = y.size
    if m < 1:
        raise ValidationError(f"bin count must be at least 1, got {m}")
    if m > n:
        raise ValidationError(f"cannot build {m} bins from {n} labels")
    ys = np.sort(y)
    if m > 1 and ys[0] == ys[-1]:
        raise ValidationError("degenerate labels: all values identical, cannot split into bins")
    bounds = [lo]
    for j in range(1, m):
        k = math.ceil(j * n / m)  # rank of the last label belonging to bin j
        cut = (ys[k - 1] + ys[k]) / 2.0
        bounds.append(float(cut))
    bounds.append(hi)
    if any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ValidationError(
            "degenerate labels: duplicate values collapse adjacent bin cuts; reduce the bin count"
        )
    partition = BinPartition(bounds=tuple(bounds), counts=tuple([1] * m))
    counts = np.bincount(bin_indices(partition, y), minlength=m)
    if counts.min() < 1:
        empty = int(np.argmin(counts)) + 1
        raise ValidationError(
            f"degenerate labels leave bin {empty} empty; reduce the bin count"
        )
    return BinPartition(bounds=tuple(bounds), counts=tuple(int(c) for c in counts))


def bin_indices(partition: BinPartition, labels) -> np.ndarray:
    """Vectorized 0-based bin index for labels inside the domain."""
    y = np.asarray(labels, dtype=np.float64)
    lo, hi = partition.label_domain
    if y.size and (y.min() < lo or y.max() > hi):
        bad = float(y[np.argmax((y < lo) | (y > hi))])
        raise ValidationError(f"label {bad!r} falls outside the label domain [{lo}, {hi}]")
    interior = np.asarray(partition.bounds[1:-1], dtype=np.float64)
    return np.searchsorted(interior, y, side="right").astype(np.int64)


def assign_bin(partition: BinPartition, y: float) -> int:
    """Bin number in 1..M for a label; the top bin is closed above."""
    return int(bin_indices(partition, np.asarray([y]))[0]) + 1
