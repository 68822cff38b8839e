"""Wall-clock benchmark of the grounding pipeline against the number of selected windows.

Timings exclude NMS post-processing; feature extraction never happens here
since features are loaded up front.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field

import numpy as np

from .core import GroundingError
from .ranking import TimingRecord, ground

STAGES = ("slice_ns", "select_ns", "score_ns", "rank_ns", "nms_ns")


class InsufficientPoints(GroundingError, ValueError):
    pass


@dataclass
class BenchRow:
    k: int | None
    windows_processed: float
    stage_ns: dict[str, float]
    total_ns: float
    repetitions: int
    records: list[list[TimingRecord]] = field(default_factory=list, repr=False)

    @property
    def label(self) -> str:
        return "all" if self.k is None else str(self.k)


def _run_once(instances, cfg, scorer, adapter):
    return [ground(inst, cfg, scorer, adapter).timing for inst in instances]


def bench_pipeline(instances, k_values, cfg, scorer, adapter=None, repetitions: int = 5, warmup: int = 3):
    """Median per-corpus stage times for each ``k`` (``None`` means every window).

    Each repetition grounds every instance once; stage times are summed over
    the corpus, then the median is taken across repetitions.
    """
    instances = list(instances)
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    rows = []
    for k in k_values:
        if k is None:
            from .windowing import slice_windows

            k_eff = max(len(slice_windows(len(i.video), cfg.window_length)) for i in instances)
        else:
            k_eff = int(k)
        run_cfg = cfg.replace(top_k_windows=k_eff)
        for _ in range(warmup):
            _run_once(instances, run_cfg, scorer, adapter)
        reps = [_run_once(instances, run_cfg, scorer, adapter) for _ in range(repetitions)]
        stage = {s: statistics.median(sum(getattr(r, s) for r in rep) for rep in reps) for s in STAGES}
        total = statistics.median(sum(r.total_ns for r in rep) for rep in reps)
        wp = float(np.mean([r.windows_processed for r in reps[0]]))
        rows.append(BenchRow(k, wp, stage, total, repetitions, reps))
    return rows


def linearity_check(points):
    """Least-squares fit ``y = slope * x + intercept`` over ``(x, y)`` pairs.

    Returns ``(slope, intercept, r_squared)``. Needs at least three distinct x.
    """
    pts = np.asarray(list(points), dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) < 3:
        raise InsufficientPoints("need at least 3 distinct x values")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def scoring_points(rows):
    return [(row.windows_processed, row.stage_ns["score_ns"]) for row in rows]


def bench_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "windows_processed", *STAGES, "total_ns", "repetitions"])
    for row in rows:
        writer.writerow(
            [row.label, f"{row.windows_processed:.4f}"]
            + [f"{row.stage_ns[s]:.0f}" for s in STAGES]
            + [f"{row.total_ns:.0f}", row.repetitions]
        )
    return buf.getvalue()
