"""Per-(bin, group) threshold tables and coverage-equalizing optimization.

A threshold table generalizes the single calibrated shift: every label
bin and group gets its own shift ``r_hat[m, s]``. Starting from the
global shift everywhere, the optimizer repeatedly moves one covered
calibration sample from the most over-covered group to the most
under-covered one, choosing bins by the width change per unit of
coverage (the local slope of the empirical score quantile), until every
group's bin-averaged coverage sits within one sample of the target.

Within a cell, a threshold only matters through which of the cell's
scores it covers, so during optimization thresholds are re-expressed on
the cell score order statistics; moving to the adjacent order statistic
is exactly "cover one fewer (or one more) sample". Cells covering at
most one record are never drained further, which keeps every exchange
width-bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binning import BinPartition, bin_indices, equal_mass_bins
from .conformal import band_columns, conformity_scores, cqr_calibrate, empirical_quantile
from .core import Dataset, EmptyCellError, ValidationError
from .intervals import union_widths
from .quantile_model import QuantileModel

__all__ = [
    "CONVERGED",
    "SLOPE_CROSSOVER",
    "MAX_ITERS",
    "ThresholdTable",
    "CoverageState",
    "IterationRecord",
    "OptimizerTrace",
    "init_thresholds",
    "measure_coverage",
    "slope_decrease",
    "slope_increase",
    "eoc_optimize",
    "fair_calibrate",
    "cqr_calibrate_groupwise",
    "calibration_objective",
    "brute_force_oracle",
]

CONVERGED = "converged"
SLOPE_CROSSOVER = "slope_crossover"
MAX_ITERS = "max_iters"


@dataclass(frozen=True)
class ThresholdTable:
    """Calibrated shifts indexed by (bin, group)."""

    r_hat: np.ndarray  # (M, S)
    global_r_hat: float
    alpha: float
    partition: BinPartition
    group_count: int

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.r_hat, dtype=np.float64))
        r.setflags(write=False)
        object.__setattr__(self, "r_hat", r)
        if r.shape != (self.partition.m, self.group_count):
            raise ValidationError(
                f"threshold table must have shape ({self.partition.m}, {self.group_count}), got {r.shape}"
            )
        if not np.all(np.isfinite(r)):
            raise ValidationError("thresholds must be finite")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")

    def to_payload(self, extras: dict | None = None) -> dict:
        payload = {
            "alpha": self.alpha,
            "M": self.partition.m,
            "S": self.group_count,
            "bounds": list(self.partition.bounds),
            "counts": list(self.partition.counts),
            "global_r_hat": self.global_r_hat,
            "r_hat": [[float(v) for v in row] for row in self.r_hat],
        }
        if extras:
            payload.update(extras)
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "ThresholdTable":
        partition = BinPartition(
            bounds=tuple(payload["bounds"]), counts=tuple(payload["counts"])
        )
        return cls(
            r_hat=np.asarray(payload["r_hat"], dtype=np.float64),
            global_r_hat=float(payload["global_r_hat"]),
            alpha=float(payload["alpha"]),
            partition=partition,
            group_count=int(payload["S"]),
        )


@dataclass(frozen=True)
class CoverageState:
    """Per-cell coverage rates and their unweighted per-group bin means."""

    beta: np.ndarray  # (M, S)
    per_group_mean: np.ndarray  # (S,)
    cell_counts: np.ndarray  # (M, S) ints


@dataclass(frozen=True)
class IterationRecord:
    """One optimizer step. Bin numbers are 1-based.

    A paired exchange fills both sides. A one-sided rebalancing move
    (taken when no counterparty group sits on the other side of the
    target) marks the absent side with group -1, bin 0, and a NaN slope.
    """

    step: int
    donor_group: int
    recipient_group: int
    donor_bin: int
    recipient_bin: int
    slope_decrease: float
    slope_increase: float
    per_group_mean: tuple[float, ...]


@dataclass(frozen=True)
class OptimizerTrace:
    initial_per_group_mean: tuple[float, ...]
    iterations: tuple[IterationRecord, ...]
    termination_reason: str

    def gaps(self) -> list[float]:
        """Max-minus-min group mean before and after each step."""
        seq = [self.initial_per_group_mean] + [it.per_group_mean for it in self.iterations]
        return [max(m) - min(m) for m in seq]

    def summary(self) -> dict:
        final = (
            self.iterations[-1].per_group_mean
            if self.iterations
            else self.initial_per_group_mean
        )
        return {
            "termination_reason": self.termination_reason,
            "iterations": len(self.iterations),
            "initial_per_group_mean": list(self.initial_per_group_mean),
            "final_per_group_mean": list(final),
            "final_gap": max(final) - min(final),
        }


def _cell_scores(
    cal: Dataset, model: QuantileModel | None, partition: BinPartition, alpha: float
) -> tuple[list[list[np.ndarray]], np.ndarray]:
    """Sorted conformity scores per (bin, group) cell; errors on empty cells."""
    scores = conformity_scores(cal, model, alpha)
    bins0 = bin_indices(partition, cal.y)
    m_bins, s_groups = partition.m, cal.group_count
    cells: list[list[np.ndarray]] = []
    counts = np.zeros((m_bins, s_groups), dtype=np.int64)
    for m in range(m_bins):
        row = []
        for s in range(s_groups):
            cell = np.sort(scores[(bins0 == m) & (cal.group == s)])
            if cell.size == 0:
                raise EmptyCellError(m + 1, s)
            counts[m, s] = cell.size
            row.append(cell)
        cells.append(row)
    return cells, counts


def measure_coverage(cal: Dataset, model: QuantileModel | None, table: ThresholdTable) -> CoverageState:
    """Coverage rate of every calibration cell under the current table.

    A record counts as covered when its conformity score is at most the
    threshold of its own (bin, group) cell, which is exactly membership
    in the closed calibrated band.
    """
    cells, counts = _cell_scores(cal, model, table.partition, table.alpha)
    m_bins, s_groups = counts.shape
    beta = np.zeros((m_bins, s_groups))
    for m in range(m_bins):
        for s in range(s_groups):
            k = int(np.searchsorted(cells[m][s], table.r_hat[m, s], side="right"))
            beta[m, s] = k / counts[m, s]
    return CoverageState(beta=beta, per_group_mean=beta.mean(axis=0), cell_counts=counts)


def init_thresholds(
    cal: Dataset, model: QuantileModel | None, partition: BinPartition, alpha: float
) -> tuple[ThresholdTable, CoverageState]:
    """Seed every cell with the global calibrated shift."""
    global_threshold = cqr_calibrate(cal, model, alpha)
    table = ThresholdTable(
        r_hat=np.full((partition.m, cal.group_count), global_threshold.r_hat),
        global_r_hat=global_threshold.r_hat,
        alpha=alpha,
        partition=partition,
        group_count=cal.group_count,
    )
    return table, measure_coverage(cal, model, table)


def _covered_count(cell: np.ndarray, threshold: float) -> int:
    return int(np.searchsorted(cell, threshold, side="right"))


def _dec_slope(cell: np.ndarray, k: int) -> float:
    # width saved per record when the k-th covered sample is dropped; k >= 2
    return float(cell[k - 1] - cell[k - 2]) / cell.size


def _inc_slope(cell: np.ndarray, k: int, current: float) -> float:
    # width paid per record when the (k+1)-th sample is covered; k < size
    base = float(cell[k - 1]) if k >= 1 else float(current)
    return max(0.0, float(cell[k]) - base) / cell.size


def slope_decrease(cell_scores, r_hat: float) -> float:
    """Width saved per record by covering exactly one fewer record.

    The gap between the largest covered score and the next order
    statistic below it, divided by the cell size. Tied scores make the
    change free (slope zero). Raises when the cell covers no record, or
    only one: dropping the last covered sample has no order statistic to
    land on and is never performed.
    """
    cell = np.sort(np.asarray(cell_scores, dtype=np.float64))
    if cell.size == 0:
        raise ValidationError("cell has no scores")
    k = _covered_count(cell, float(r_hat))
    if k == 0:
        raise ValidationError("cell covers no records at the current threshold; cannot decrease")
    if k == 1:
        raise ValidationError("cell covers a single record; no lower order statistic to move to")
    return _dec_slope(cell, k)


def slope_increase(cell_scores, r_hat: float) -> float:
    """Width paid per record by covering exactly one more record.

    The gap between the smallest uncovered score and the largest covered
    one (or the current threshold when nothing is covered), divided by
    the cell size and floored at zero. Raises when the cell is fully
    covered already.
    """
    cell = np.sort(np.asarray(cell_scores, dtype=np.float64))
    if cell.size == 0:
        raise ValidationError("cell has no scores")
    k = _covered_count(cell, float(r_hat))
    if k == cell.size:
        raise ValidationError("cell covers every record already; cannot increase")
    return _inc_slope(cell, k, float(r_hat))


def eoc_optimize(
    cal: Dataset,
    model: QuantileModel | None,
    table0: ThresholdTable,
    state0: CoverageState,
    alpha: float,
    max_iters: int | None = None,
) -> tuple[ThresholdTable, OptimizerTrace]:
    """Equalize per-group coverage by single-sample threshold moves.

    While some group sits above its parking window and another below the
    target, each iteration pairs them: it drops one covered sample from
    the donor bin with the largest decrease slope and covers one more
    sample in the recipient bin with the smallest increase slope. A
    paired exchange keeps the pooled covered count essentially
    unchanged, so validity is never spent. Once every group is on the
    same side, the loop switches to one-sided moves: lone drops from the
    most over-covered group, taken only while the pooled covered count
    stays at or above its floor of ``ceil(n * (1 - alpha))``, or lone
    additions to the most under-covered group, which only add coverage.
    Every iteration moves exactly one sample per side, so the pooled
    covered count changes by at most one.

    Terminates ``converged`` when every group parks inside the one-sided
    window ``[1 - alpha, 1 - alpha + stop]`` with ``stop`` one move
    quantum (one sample of the group's smallest cell, averaged over
    bins), which keeps it inside the documented tolerance band;
    ``slope_crossover`` when no realizable move remains (donor with
    nothing left to give, recipient already fully covered, a lone drop
    blocked by the covered-count floor, or tie-locked thresholds);
    ``max_iters`` at the iteration cap, returning the table reached so
    far. Slopes are recorded per iteration so the width economics of
    every move stay observable in the trace.

    Before iterating, every threshold is re-expressed on the covering
    order statistic of its cell, which releases pure slack as width
    without touching coverage. After the loop converges, a width cleanup
    alternates two greedy passes until neither moves: a trim pass sheds
    covered records the floors do not need, widest spacing first, and a
    descent pass trades one covered sample between any two cells while
    the largest decrease slope strictly exceeds the smallest increase
    slope, stopping at that crossover. Cleanup feasibility is judged on
    post-move group means, so every group stays inside its parking
    window and the covered count never falls below its floor.

    With a single group there is nothing to trade and the input table is
    returned unchanged.
    """
    if max_iters is None:
        max_iters = 10 * cal.n
    if max_iters < 1:
        raise ValidationError("max_iters must be positive")
    target = 1.0 - alpha
    s_groups = table0.group_count
    m_bins = table0.partition.m
    init_means = tuple(float(v) for v in state0.per_group_mean)
    if s_groups == 1:
        return table0, OptimizerTrace(init_means, (), CONVERGED)

    cells, counts = _cell_scores(cal, model, table0.partition, alpha)
    thr = np.array(table0.r_hat, dtype=np.float64)
    k = np.zeros((m_bins, s_groups), dtype=np.int64)
    for m in range(m_bins):
        for s in range(s_groups):
            k[m, s] = _covered_count(cells[m][s], thr[m, s])
    # Re-express thresholds on the covering order statistic of each cell.
    # Coverage is unchanged, pure threshold slack is released as width,
    # and every later move lands exactly on an adjacent order statistic.
    # Cells covering nothing keep their seed threshold below the minimum.
    for m in range(m_bins):
        for s in range(s_groups):
            if k[m, s] >= 1:
                thr[m, s] = cells[m][s][k[m, s] - 1]

    band = 1.0 / counts.min(axis=0)  # documented tolerance per group
    # Park each group in the one-sided window [target, target + stop],
    # where stop = one move quantum (a move shifts a bin-averaged mean by
    # at most 1/(M * smallest cell)). The coverage requirement is
    # one-sided, so groups park at or above the target; the window is
    # absorbing because a drop from above it lands at or above the target
    # and an add from below lands at or below target + stop. The pooled
    # covered count keeps its own floor, ceil(n * (1 - alpha)), enforced
    # at every spending move.
    eps = 1e-12
    k_floor = math.ceil(cal.n * target - 1e-9)
    level = target
    stop = band / m_bins
    cell_weight = 1.0 / (m_bins * s_groups)

    def group_means() -> np.ndarray:
        return (k / counts).mean(axis=0)

    iterations: list[IterationRecord] = []
    reason: str | None = None
    for step in range(1, max_iters + 1):
        mu = group_means()
        over_band = (mu - level) > stop + eps
        under = mu < level - eps
        if not bool(over_band.any()) and not bool(under.any()):
            reason = CONVERGED
            break
        if bool(over_band.any()) and bool(under.any()):
            s1 = int(np.argmax(np.where(over_band, mu, -np.inf)))
            s2 = int(np.argmin(np.where(under, mu, np.inf)))
        elif bool(over_band.any()):
            s1, s2 = int(np.argmax(mu)), -1  # every group at or above level
        else:
            s1, s2 = -1, int(np.argmin(mu))  # every group at or below window

        best_dec, m1 = -np.inf, -1
        if s1 >= 0:
            for m in range(m_bins):
                if k[m, s1] >= 2:
                    slope = _dec_slope(cells[m][s1], int(k[m, s1]))
                    if slope > best_dec:
                        best_dec, m1 = slope, m
            if m1 < 0:
                reason = SLOPE_CROSSOVER  # donor has nothing left to give
                break
        best_inc, m2 = np.inf, -1
        if s2 >= 0:
            for m in range(m_bins):
                if k[m, s2] < counts[m, s2]:
                    slope = _inc_slope(cells[m][s2], int(k[m, s2]), float(thr[m, s2]))
                    if slope < best_inc:
                        best_inc, m2 = slope, m
            if m2 < 0:
                reason = SLOPE_CROSSOVER  # recipient is fully covered everywhere
                break
        if s1 >= 0 and s2 < 0:
            # a lone drop spends pooled coverage; keep the covered count
            # at or above the overall floor
            if int(k.sum()) - 1 < k_floor:
                reason = SLOPE_CROSSOVER
                break

        moved = False
        if s1 >= 0:
            new_thr1 = float(cells[m1][s1][k[m1, s1] - 2])
            if new_thr1 != thr[m1, s1]:
                thr[m1, s1] = new_thr1
                k[m1, s1] = _covered_count(cells[m1][s1], new_thr1)
                moved = True
        if s2 >= 0:
            new_thr2 = float(cells[m2][s2][k[m2, s2]])
            if new_thr2 != thr[m2, s2]:
                thr[m2, s2] = new_thr2
                k[m2, s2] = _covered_count(cells[m2][s2], new_thr2)
                moved = True
        if not moved:
            reason = SLOPE_CROSSOVER  # tie-locked, no realizable move
            break
        iterations.append(
            IterationRecord(
                step=step,
                donor_group=s1,
                recipient_group=s2,
                donor_bin=m1 + 1 if s1 >= 0 else 0,
                recipient_bin=m2 + 1 if s2 >= 0 else 0,
                slope_decrease=float(best_dec) if s1 >= 0 else float("nan"),
                slope_increase=float(best_inc) if s2 >= 0 else float("nan"),
                per_group_mean=tuple(float(v) for v in group_means()),
            )
        )
    if reason is None:
        reason = MAX_ITERS

    if reason == CONVERGED:
        # Width cleanup, alternating two greedy passes until neither
        # moves. Trim sheds covered records the floors do not need,
        # widest spacing first; a drop must keep its group at or above
        # the target and the pooled count at or above its floor. Descent
        # trades one covered sample between two cells while the best
        # width saving strictly exceeds the cheapest width cost;
        # feasibility is judged on the post-exchange means, so a
        # same-group rebalance is allowed even when its drop alone would
        # dip below the target. Stops at the slope crossover, where no
        # exchange pays for itself.
        step0 = iterations[-1].step if iterations else 0

        def record(step, s1, s2, m1, m2, d_slope, i_slope):
            iterations.append(
                IterationRecord(
                    step=step,
                    donor_group=s1,
                    recipient_group=s2,
                    donor_bin=m1 + 1 if s1 >= 0 else 0,
                    recipient_bin=m2 + 1 if s2 >= 0 else 0,
                    slope_decrease=float(d_slope),
                    slope_increase=float(i_slope),
                    per_group_mean=tuple(float(v) for v in group_means()),
                )
            )

        progress = True
        while progress and step0 < max_iters:
            progress = False

            while int(k.sum()) > k_floor and step0 < max_iters:
                mu = group_means()
                best = None
                for m in range(m_bins):
                    for s in range(s_groups):
                        if (
                            k[m, s] >= 2
                            and mu[s] - cell_weight * s_groups / counts[m, s]
                            >= level - eps
                        ):
                            slope = _dec_slope(cells[m][s], int(k[m, s]))
                            if best is None or slope > best[0]:
                                best = (slope, m, s)
                if best is None:
                    break
                d_slope, m1, s1 = best
                thr[m1, s1] = float(cells[m1][s1][k[m1, s1] - 2])
                k[m1, s1] = _covered_count(cells[m1][s1], thr[m1, s1])
                step0 += 1
                progress = True
                record(step0, s1, -1, m1, 0, d_slope, float("nan"))

            while step0 < max_iters:
                mu = group_means()
                decs = [
                    (_dec_slope(cells[m][s], int(k[m, s])), m, s)
                    for m in range(m_bins)
                    for s in range(s_groups)
                    if k[m, s] >= 2
                ]
                incs = [
                    (_inc_slope(cells[m][s], int(k[m, s]), float(thr[m, s])), m, s)
                    for m in range(m_bins)
                    for s in range(s_groups)
                    if k[m, s] < counts[m, s]
                ]
                best_gain = 0.0
                move = None
                for d_slope, m1, s1 in decs:
                    for i_slope, m2, s2 in incs:
                        if (m1, s1) == (m2, s2) or d_slope - i_slope <= best_gain:
                            continue
                        mu1 = mu[s1] - cell_weight * s_groups / counts[m1, s1]
                        mu2 = mu[s2] + cell_weight * s_groups / counts[m2, s2]
                        if s1 == s2:
                            post = (
                                mu[s1]
                                - cell_weight * s_groups / counts[m1, s1]
                                + cell_weight * s_groups / counts[m2, s2]
                            )
                            ok = level - eps <= post <= level + stop[s1] + eps
                        else:
                            ok = (
                                mu1 >= level - eps
                                and mu2 <= level + stop[s2] + eps
                            )
                        if ok:
                            best_gain = d_slope - i_slope
                            move = (m1, s1, m2, s2, d_slope, i_slope)
                if move is None:
                    break
                m1, s1, m2, s2, d_slope, i_slope = move
                thr[m1, s1] = float(cells[m1][s1][k[m1, s1] - 2])
                k[m1, s1] = _covered_count(cells[m1][s1], thr[m1, s1])
                thr[m2, s2] = float(cells[m2][s2][k[m2, s2]])
                k[m2, s2] = _covered_count(cells[m2][s2], thr[m2, s2])
                step0 += 1
                progress = True
                record(step0, s1, s2, m1, m2, d_slope, i_slope)

    table = ThresholdTable(
        r_hat=thr,
        global_r_hat=table0.global_r_hat,
        alpha=alpha,
        partition=table0.partition,
        group_count=s_groups,
    )
    return table, OptimizerTrace(init_means, tuple(iterations), reason)


def fair_calibrate(
    cal: Dataset,
    model: QuantileModel | None,
    bins: int | BinPartition,
    alpha: float,
    max_iters: int | None = None,
) -> tuple[ThresholdTable, OptimizerTrace]:
    """Full fairness-aware calibration: bin, seed, optimize."""
    partition = (
        bins
        if isinstance(bins, BinPartition)
        else equal_mass_bins(cal.y, bins, cal.label_domain)
    )
    table0, state0 = init_thresholds(cal, model, partition, alpha)
    return eoc_optimize(cal, model, table0, state0, alpha, max_iters=max_iters)


def cqr_calibrate_groupwise(
    cal: Dataset, model: QuantileModel | None, alpha: float
) -> ThresholdTable:
    """Independent calibration per group over a single label bin."""
    scores = conformity_scores(cal, model, alpha)
    partition = BinPartition(bounds=cal.label_domain, counts=(cal.n,))
    r = np.zeros((1, cal.group_count))
    for s in range(cal.group_count):
        group_scores = scores[cal.group == s]
        if group_scores.size == 0:
            raise EmptyCellError(1, s)
        r[0, s] = empirical_quantile(group_scores, 1.0 - alpha)
    return ThresholdTable(
        r_hat=r,
        global_r_hat=empirical_quantile(scores, 1.0 - alpha),
        alpha=alpha,
        partition=partition,
        group_count=cal.group_count,
    )


def calibration_objective(cal: Dataset, model: QuantileModel | None, table: ThresholdTable) -> float:
    """Mean total interval width over the calibration set."""
    q_lo, q_hi, _ = band_columns(cal, model, table.alpha)
    width, _ = union_widths(
        q_lo, q_hi, cal.group, table.r_hat, np.asarray(table.partition.bounds)
    )
    return float(width.mean())


def brute_force_oracle(
    cal: Dataset, model: QuantileModel | None, partition: BinPartition, alpha: float
) -> ThresholdTable:
    """Exhaustive width-minimal table on small instances.

    Candidate thresholds per cell are the cell's distinct scores plus a
    sentinel just below the minimum (covering nothing). Feasible tables
    must hold every group's bin-averaged coverage at or above the target
    and cover at least the target share of calibration records. Ties
    resolve toward the first candidate combination in ascending
    per-cell, bin-major, group-major order. Limited to at most 4 cells
    and two million candidate tables.
    """
    m_bins, s_groups = partition.m, cal.group_count
    if m_bins * s_groups > 4:
        raise ValidationError("oracle search is limited to at most 4 cells")
    cells, counts = _cell_scores(cal, model, partition, alpha)
    if float(np.prod(counts + 1.0)) > 2e6:
        raise ValidationError("oracle search is limited to two million candidate tables")
    q_lo, q_hi, _ = band_columns(cal, model, alpha)
    bounds = np.asarray(partition.bounds)
    n_total = cal.n
    target = 1.0 - alpha
    k_floor = min(n_total, math.ceil(n_total * target - 1e-9))

    # Candidates, covered counts, and width contributions per cell. A
    # cell's threshold prices the band piece inside that bin for every
    # record of the cell's group.
    cand: list[list[np.ndarray]] = []
    cand_k: list[list[np.ndarray]] = []
    cand_w: list[list[np.ndarray]] = []
    for m in range(m_bins):
        crow, krow, wrow = [], [], []
        for s in range(s_groups):
            cell = cells[m][s]
            eps = 1e-9 * max(1.0, abs(float(cell[0])))
            values = np.concatenate(([cell[0] - eps], np.unique(cell)))
            crow.append(values)
            krow.append(np.searchsorted(cell, values, side="right"))
            in_group = cal.group == s
            lo_g, hi_g = q_lo[in_group], q_hi[in_group]
            widths = np.empty(values.size)
            for c, t in enumerate(values):
                a = np.maximum(lo_g - t, bounds[m])
                b = np.minimum(hi_g + t, bounds[m + 1])
                widths[c] = np.clip(b - a, 0.0, None).sum()
            wrow.append(widths)
        cand.append(crow)
        cand_k.append(krow)
        cand_w.append(wrow)

    # Per-group enumeration over bin candidate choices, kept in
    # lexicographic (bin-major) order for deterministic tie-breaks.
    group_choices: list[np.ndarray] = []
    group_w: list[np.ndarray] = []
    group_k: list[np.ndarray] = []
    group_ok: list[np.ndarray] = []
    for s in range(s_groups):
        sizes = [cand[m][s].size for m in range(m_bins)]
        grids = np.meshgrid(*[np.arange(sz) for sz in sizes], indexing="ij")
        choices = np.stack([g.ravel() for g in grids], axis=1)  # (n_combo, M)
        w = np.zeros(choices.shape[0])
        ktot = np.zeros(choices.shape[0], dtype=np.int64)
        beta_mean = np.zeros(choices.shape[0])
        for m in range(m_bins):
            idx = choices[:, m]
            w += cand_w[m][s][idx]
            ktot += cand_k[m][s][idx]
            beta_mean += cand_k[m][s][idx] / counts[m, s]
        beta_mean /= m_bins
        group_choices.append(choices)
        group_w.append(w)
        group_k.append(ktot)
        group_ok.append(beta_mean >= target - 1e-12)

    total_w = np.zeros(1)
    total_k = np.zeros(1, dtype=np.int64)
    total_ok = np.ones(1, dtype=bool)
    for s in range(s_groups):
        total_w = (total_w[:, None] + group_w[s][None, :]).ravel()
        total_k = (total_k[:, None] + group_k[s][None, :]).ravel()
        total_ok = (total_ok[:, None] & group_ok[s][None, :]).ravel()
    feasible = total_ok & (total_k >= k_floor)
    if not feasible.any():
        raise ValidationError("oracle found no feasible threshold table")
    masked = np.where(feasible, total_w, np.inf)
    best = int(np.argmin(masked))  # first minimum: lexicographic tie-break

    r = np.zeros((m_bins, s_groups))
    rem = best
    for s in reversed(range(s_groups)):
        n_comb = group_choices[s].shape[0]
        rem, combo = divmod(rem, n_comb)
        for m in range(m_bins):
            r[m, s] = cand[m][s][group_choices[s][combo, m]]
    return ThresholdTable(
        r_hat=r,
        global_r_hat=cqr_calibrate(cal, model, alpha).r_hat,
        alpha=alpha,
        partition=partition,
        group_count=s_groups,
    )
