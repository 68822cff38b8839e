"""Fine-grained proposal ranking and the end-to-end grounding pipeline."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterParams, adapt_sequence, proposal_feature
from .config import PipelineConfig
from .core import EmptyInput, Span, iou_matrix, min_max_normalize
from .scorer import Proposal, ScorerParams, context_bounds, score_window
from .selection import frame_scores, select_top_k, window_scores
from .windowing import slice_windows


def matching_score(feature_range, video_adapted, q_cls) -> float:
    h = proposal_feature(video_adapted, *feature_range)
    return float(h @ np.asarray(q_cls, dtype=np.float64))


def matching_scores(ranges, video_adapted, q_cls) -> np.ndarray:
    """Vectorized ``matching_score`` over many frame ranges."""
    ranges = np.asarray(ranges, dtype=np.int64).reshape(-1, 2)
    per_frame = np.asarray(video_adapted, dtype=np.float64) @ np.asarray(q_cls, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(per_frame)])
    return (csum[ranges[:, 1]] - csum[ranges[:, 0]]) / (ranges[:, 1] - ranges[:, 0])


@dataclass
class RankedResult:
    proposals: list[Proposal]
    r: np.ndarray
    s_norm: np.ndarray
    m_norm: np.ndarray
    m: np.ndarray
    total: int

    def __len__(self) -> int:
        return len(self.proposals)

    def take(self, idx) -> "RankedResult":
        idx = list(idx)
        return RankedResult(
            [self.proposals[i] for i in idx],
            self.r[idx],
            self.s_norm[idx],
            self.m_norm[idx],
            self.m[idx],
            self.total,
        )


def _normalize(values, groups, pool):
    if pool == "global":
        return min_max_normalize(values)
    out = np.empty(len(values))
    for g in np.unique(groups):
        sel = groups == g
        out[sel] = min_max_normalize(values[sel])
    return out


def fuse_and_rank(proposals, m, use_fusion: bool = True, pool: str = "global") -> RankedResult:
    """Rank by ``minmax(s) + minmax(m)`` (or by ``minmax(s)`` alone without fusion).

    Ties go to the earlier start second, then the lower window index.
    """
    proposals = list(proposals)
    if not proposals:
        raise EmptyInput("no candidate proposals to rank")
    s = np.array([p.score for p in proposals], dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != s.shape:
        raise ValueError(f"{len(m)} matching scores for {len(s)} proposals")
    groups = np.array([p.window_index for p in proposals])
    s_norm = _normalize(s, groups, pool)
    m_norm = _normalize(m, groups, pool)
    r = s_norm + m_norm if use_fusion else s_norm
    starts = np.array([p.span.start for p in proposals])
    order = np.lexsort((groups, starts, -r))
    return RankedResult(
        [proposals[i] for i in order], r[order], s_norm[order], m_norm[order], m[order], len(proposals)
    )


def nms(ranked: RankedResult, iou_threshold: float = 0.5) -> RankedResult:
    """Greedy suppression of later proposals whose IoU with a kept one exceeds the threshold."""
    n = len(ranked)
    if n == 0:
        return ranked
    starts = np.array([p.span.start for p in ranked.proposals])
    ends = np.array([p.span.end for p in ranked.proposals])
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.nonzero(alive[i + 1 :])[0] + i + 1
        if rest.size:
            ov = iou_matrix(starts[i : i + 1], ends[i : i + 1], starts[rest], ends[rest])[0]
            alive[rest[ov > iou_threshold]] = False
    return ranked.take(keep)


@dataclass
class TimingRecord:
    query_id: str
    slice_ns: int = 0
    select_ns: int = 0
    score_ns: int = 0
    rank_ns: int = 0
    nms_ns: int = 0
    windows_processed: int = 0
    num_windows: int = 0

    @property
    def total_ns(self) -> int:
        """Timed region: everything except post-processing (NMS)."""
        return self.slice_ns + self.select_ns + self.score_ns + self.rank_ns


@dataclass
class Prediction:
    query_id: str
    rank: int
    span: Span
    score: float

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "rank": self.rank,
            "start_sec": self.span.start,
            "end_sec": self.span.end,
            "score": self.score,
        }


def dump_predictions(predictions) -> str:
    """Predictions JSONL text: one compact, key-sorted record per line."""
    return "".join(json.dumps(p.to_record(), sort_keys=True, separators=(",", ":")) + "\n" for p in predictions)


def load_predictions(path) -> list[Prediction]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(
                Prediction(str(rec["query_id"]), int(rec["rank"]), Span(rec["start_sec"], rec["end_sec"]), rec["score"])
            )
    return out


@dataclass
class GroundingOutput:
    predictions: list[Prediction]
    timing: TimingRecord
    selected_windows: list[int] = field(default_factory=list)
    ranked: RankedResult | None = None


def ground(
    instance,
    cfg: PipelineConfig,
    scorer: ScorerParams | None = None,
    adapter: AdapterParams | None = None,
    external: list[Proposal] | None = None,
) -> GroundingOutput:
    """slice -> select top-k windows -> score proposals -> fuse and rank -> NMS -> top-K.

    Pass ``external`` proposals (already validated against the window set) to
    skip the internal scoring head. Only selected windows are adapted and
    scored, so the scoring cost grows with ``top_k_windows``.
    """
    if scorer is None and external is None:
        raise ValueError("need scorer params or external proposals")
    clock = time.perf_counter_ns
    timing = TimingRecord(instance.query_id)
    frames = instance.video.f64
    fps = instance.video.fps
    q = instance.query.cls.astype(np.float64)
    adapter = adapter if cfg.use_adapter else None

    t0 = clock()
    ws = slice_windows(len(frames), cfg.window_length)
    t1 = clock()
    a = frame_scores(instance.video, q, adapter if cfg.use_adapter_for_selection else None)
    selected = select_top_k(window_scores(ws, a), cfg.top_k_windows)
    t2 = clock()

    by_window: dict[int, list[Proposal]] = {}
    if external is not None:
        for p in external:
            by_window.setdefault(p.window_index, []).append(p)
    proposals: list[Proposal] = []
    m_parts = []
    match_ns = 0
    for wi in selected:
        w = ws[wi]
        if external is None:
            ranges, s, lo, block = score_window(w, frames, q, scorer, adapter)
            props = [
                Proposal(wi, b, e, Span(b / fps, e / fps), score)
                for (b, e), score in zip(ranges.tolist(), s.tolist())
            ]
        else:
            props = by_window.get(wi, [])
            if not props:
                continue
            lo, hi = context_bounds(w, len(frames))
            block = adapt_sequence(frames[lo:hi], adapter)
            ranges = np.array([p.feature_range for p in props], dtype=np.int64)
        tm = clock()
        m_parts.append(matching_scores(ranges - lo, block, q))
        match_ns += clock() - tm
        proposals.extend(props)
    t3 = clock()

    preds: list[Prediction] = []
    ranked = None
    if proposals:
        ranked = fuse_and_rank(proposals, np.concatenate(m_parts), cfg.use_fusion, cfg.normalization_pool)
    t4 = clock()
    if ranked is not None:
        kept = nms(ranked, cfg.nms_iou_threshold)
        for rank, (p, r) in enumerate(zip(kept.proposals[: cfg.prediction_count], kept.r), 1):
            preds.append(Prediction(instance.query_id, rank, p.span, float(r)))
    t5 = clock()

    timing.slice_ns, timing.select_ns = t1 - t0, t2 - t1
    timing.score_ns, timing.rank_ns, timing.nms_ns = t3 - t2 - match_ns, t4 - t3 + match_ns, t5 - t4
    timing.windows_processed = len(selected)
    timing.num_windows = len(ws)
    return GroundingOutput(preds, timing, selected, ranked)
