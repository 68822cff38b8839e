"""Proposal generation and scoring inside windows, with joint contrastive training.

The scoring head is a logistic model over

    x = [h, q, h * q, (h - c) * q]

where ``h`` is the mean adapted feature of the proposal, ``q`` the query [CLS]
vector and ``c`` the mean adapted feature of the frames flanking the proposal
(one proposal width on each side). The flank term lets
the head tell a well-aligned proposal from a short one sitting inside the
moment, which pooled features alone cannot do.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .adapter import AdapterParams, InsufficientData, adapt_sequence, pooled_backward
from .optim import make_optimizer
from .core import DimensionMismatch, EmptyRange, GroundingError, Span, iou_matrix
from .windowing import NoNegativeWindow, Window, WindowSet, label_window, slice_windows

log = logging.getLogger(__name__)

SCORER_MAGIC = b"CFS1"
_SCORER_HEADER = struct.Struct("<4sI")
FEATURE_BLOCKS = 4
SCORE_CLAMP = 1e-6


class UnknownWindowIndex(GroundingError, IndexError):
    pass


class MalformedLine(GroundingError, ValueError):
    pass


@dataclass
class Proposal:
    window_index: int
    start: int
    end: int
    span: Span
    score: float

    @property
    def feature_range(self) -> tuple[int, int]:
        return self.start, self.end


@dataclass
class ScorerParams:
    theta: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.bias = float(self.bias)
        if self.theta.size % FEATURE_BLOCKS or self.theta.size == 0:
            raise DimensionMismatch(f"theta length {self.theta.size} is not a positive multiple of 4")

    @property
    def dim(self) -> int:
        return self.theta.size // FEATURE_BLOCKS

    @classmethod
    def zeros(cls, dim: int) -> "ScorerParams":
        return cls(np.zeros(FEATURE_BLOCKS * dim), 0.0)

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.theta.copy(), self.bias)

    def blocks(self):
        return np.split(self.theta, FEATURE_BLOCKS)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


@lru_cache(maxsize=256)
def _anchor_grid(length: int) -> tuple[tuple[int, int], ...]:
    if length < 1:
        raise EmptyRange("window must hold at least one frame")
    widths = sorted({min(length, max(1, math.ceil(length / f))) for f in (8, 4, 2, 1)})
    anchors = []
    seen = set()
    for w in widths:
        stride = max(1, w // 2)
        starts = list(range(0, length - w + 1, stride))
        if starts[-1] != length - w:
            starts.append(length - w)
        for s in starts:
            if (s, s + w) not in seen:
                seen.add((s, s + w))
                anchors.append((s, s + w))
    return tuple(anchors)


def enumerate_proposals(window) -> list[tuple[int, int]]:
    """Multi-scale anchors over a window.

    Widths ``ceil(L/8), ceil(L/4), ceil(L/2), L``, each slid at stride
    ``max(1, width // 2)``, plus a last anchor flush with the window end.
    Accepts a ``Window`` (absolute frame ranges) or a bare length (relative).
    """
    if isinstance(window, Window):
        return [(window.start + s, window.start + e) for s, e in _anchor_grid(window.length)]
    return list(_anchor_grid(int(window)))


def proposal_inputs(adapted, ranges, q_cls, window_bounds=None) -> np.ndarray:
    """Scoring-head inputs for frame ranges over an adapted video.

    Pooling uses prefix sums over the window plus its flank margin, so each
    proposal costs O(d). Flanks extend one proposal width on either side and
    are clipped to the video, not the window.
    """
    adapted = np.asarray(adapted, dtype=np.float64)
    q = np.asarray(q_cls, dtype=np.float64)
    if adapted.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"feature dim {adapted.shape[1]} != query dim {q.shape[0]}")
    r = np.asarray(ranges, dtype=np.int64).reshape(-1, 2)
    starts, ends = r[:, 0], r[:, 1]
    width = ends - starts
    lo, hi = window_bounds if window_bounds is not None else (0, len(adapted))
    if width.min() <= 0:
        raise EmptyRange("proposal with empty frame range")
    if starts.min() < lo or ends.max() > hi:
        raise EmptyRange("proposal range outside window")
    fl = np.maximum(0, starts - width)
    fr = np.minimum(len(adapted), ends + width)
    base, top = int(fl.min()), int(fr.max())
    d = adapted.shape[1]
    csum = np.zeros((top - base + 1, d))
    np.cumsum(adapted[base:top], axis=0, out=csum[1:])
    s0, e0, fl, fr = starts - base, ends - base, fl - base, fr - base
    out = np.empty((len(r), FEATURE_BLOCKS * d))
    h = out[:, :d]
    np.divide(csum[e0] - csum[s0], width[:, None], out=h)
    out[:, d : 2 * d] = q
    np.multiply(h, q, out=out[:, 2 * d : 3 * d])
    # flank mean; an empty flank (whole-video proposal) contributes zero
    n_ctx = np.maximum((s0 - fl) + (fr - e0), 1)
    c = ((csum[s0] - csum[fl]) + (csum[fr] - csum[e0])) / n_ctx[:, None]
    np.multiply(h - c, q, out=out[:, 3 * d :])
    return out


def proposal_logits(X, p: ScorerParams) -> np.ndarray:
    if X.shape[1] != p.theta.size:
        raise DimensionMismatch(f"input width {X.shape[1]} != theta length {p.theta.size}")
    return X @ p.theta + p.bias


def score_proposal(feature_range, video_adapted, q_cls, p: ScorerParams, window_bounds=None) -> float:
    X = proposal_inputs(video_adapted, [feature_range], q_cls, window_bounds)
    return float(sigmoid(proposal_logits(X, p))[0])


def context_bounds(window: Window, video_length: int) -> tuple[int, int]:
    """Frames a window's proposals can touch, flanks included."""
    return max(0, window.start - window.length), min(video_length, window.end + window.length)


def score_window(window: Window, frames, q_cls, p: ScorerParams, adapter: AdapterParams | None = None):
    """Score every anchor of one window from raw frames.

    Only the window and its flank margin are adapted. Returns
    ``(absolute ranges, scores, lo, adapted block starting at frame lo)``.
    """
    lo, hi = context_bounds(window, len(frames))
    block = adapt_sequence(frames[lo:hi], adapter)
    ranges = np.array(enumerate_proposals(window), dtype=np.int64)
    X = proposal_inputs(block, ranges - lo, q_cls, (window.start - lo, window.end - lo))
    return ranges, sigmoid(proposal_logits(X, p)), lo, block


def iou_targets(ious, t_min: float = 0.3, t_max: float = 0.7) -> np.ndarray:
    return np.clip((np.asarray(ious, dtype=np.float64) - t_min) / (t_max - t_min), 0.0, 1.0)


def _bce(s, y):
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(y > 0, -y * np.log(s), 0.0)
        neg = np.where(y < 1, -(1 - y) * np.log1p(-s), 0.0)
    return pos + neg


def _spans_ious(spans, gt: Span) -> np.ndarray:
    starts = [sp.start for sp in spans]
    ends = [sp.end for sp in spans]
    return iou_matrix(starts, ends, [gt.start], [gt.end])[:, 0]


def intra_window_loss(scores, spans, gt: Span, t_min: float = 0.3, t_max: float = 0.7) -> float:
    """Mean BCE between proposal scores and their IoU-scaled targets."""
    y = iou_targets(_spans_ious(spans, gt), t_min, t_max)
    return float(np.mean(_bce(scores, y)))


def positive_mask(ious, threshold: float = 0.7) -> np.ndarray:
    """Proposals with IoU above threshold; falls back to the single best one."""
    ious = np.asarray(ious, dtype=np.float64)
    mask = ious > threshold
    if not mask.any() and ious.size:
        mask[int(np.argmax(ious))] = True
    return mask


def inter_window_contrastive_loss(pos_scores, pos_spans, neg_scores, gt: Span, threshold: float = 0.7) -> float:
    """``-sum log s`` over positives of the positive window ``- sum log(1 - s)`` over the negative window."""
    mask = positive_mask(_spans_ious(pos_spans, gt), threshold)
    pos = np.asarray(pos_scores, dtype=np.float64)[mask]
    neg = np.asarray(neg_scores, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return float(-np.log(pos).sum() - np.log1p(-neg).sum())


@dataclass
class JointTrainConfig:
    learning_rate: float = 1e-4
    lambda_con: float = 1.0
    lambda_adapt: float = 0.2
    positive_iou_threshold: float = 0.7
    t_min: float = 0.3
    t_max: float = 0.7
    batch_size: int = 32
    seed: int = 0
    epochs: int = 20
    joint: bool = False
    adapter_learning_rate: float = 1e-5
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max <= 1:
            raise ValueError("need 0 < t_min < t_max <= 1")
        if self.lambda_con < 0:
            raise ValueError("lambda_con must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class WindowBatchItem:
    """Everything the joint loss needs for one (query, positive window, negative window)."""

    frames: np.ndarray
    q: np.ndarray
    gt: Span
    fps: float
    pos_window: Window
    neg_window: Window | None
    pos_ranges: np.ndarray = field(init=False)
    neg_ranges: np.ndarray = field(init=False)
    targets: np.ndarray = field(init=False)
    pos_mask: np.ndarray = field(init=False)

    def prepare(self, cfg: JointTrainConfig) -> "WindowBatchItem":
        self.pos_ranges = np.array(enumerate_proposals(self.pos_window), dtype=np.int64)
        if self.neg_window is not None:
            self.neg_ranges = np.array(enumerate_proposals(self.neg_window), dtype=np.int64)
        else:
            self.neg_ranges = np.zeros((0, 2), dtype=np.int64)
        sec = self.pos_ranges / self.fps
        ious = iou_matrix(sec[:, 0], sec[:, 1], [self.gt.start], [self.gt.end])[:, 0]
        self.targets = iou_targets(ious, cfg.t_min, cfg.t_max)
        self.pos_mask = positive_mask(ious, cfg.positive_iou_threshold)
        return self


def _window_inputs(adapted, ranges, window, q):
    if len(ranges) == 0:
        return np.zeros((0, FEATURE_BLOCKS * len(q)))
    return proposal_inputs(adapted, ranges, q, (window.start, window.end))


def _item_logit_grads(item: WindowBatchItem, adapted, p: ScorerParams, cfg: JointTrainConfig):
    """Per-instance loss and d(loss)/d(logit) for both windows."""
    Xp = _window_inputs(adapted, item.pos_ranges, item.pos_window, item.q)
    Xn = _window_inputs(adapted, item.neg_ranges, item.neg_window, item.q) if len(item.neg_ranges) else None
    zp = proposal_logits(Xp, p)
    sp = sigmoid(zp)
    n = len(zp)
    # BCE(sigmoid(z), y) = softplus(z) - y z
    loss = float(np.mean(np.logaddexp(0.0, zp) - item.targets * zp))
    gp = (sp - item.targets) / n
    lam = cfg.lambda_con
    gn = np.zeros(0)
    if lam:
        m = item.pos_mask
        loss += lam * float(np.logaddexp(0.0, -zp[m]).sum())
        gp = gp + lam * np.where(m, sp - 1.0, 0.0)
        if Xn is not None:
            zn = proposal_logits(Xn, p)
            loss += lam * float(np.logaddexp(0.0, zn).sum())
            gn = lam * sigmoid(zn)
    return loss, Xp, gp, Xn, gn


def joint_loss(items, p: ScorerParams, adapter: AdapterParams | None, cfg: JointTrainConfig) -> float:
    """Mean over instances of ``L_ori + lambda_con * L_con``, plus ``lambda_adapt * L_adapt`` in joint mode."""
    total = 0.0
    cache: dict[int, np.ndarray] = {}
    for item in items:
        adapted = _adapted(item.frames, adapter, cache)
        total += _item_logit_grads(item, adapted, p, cfg)[0]
    total /= len(items)
    if cfg.joint and adapter is not None and cfg.lambda_adapt:
        total += cfg.lambda_adapt * _batch_adapter_nce(items, adapter)
    return total


def _adapted(frames, adapter, cache):
    key = id(frames)
    if key not in cache:
        cache[key] = adapt_sequence(frames, adapter)
    return cache[key]


def _gt_block(item: WindowBatchItem) -> np.ndarray:
    b = int(math.floor(item.gt.start * item.fps + 1e-9))
    e = max(b + 1, int(math.ceil(item.gt.end * item.fps - 1e-9)))
    return item.frames[b : min(e, len(item.frames))]


def _batch_adapter_nce(items, adapter) -> float:
    from .adapter import batch_nce_loss

    if len(items) < 2:
        return 0.0
    return batch_nce_loss([(_gt_block(it), it.q) for it in items], adapter)


def _proposal_blocks(frames, ranges):
    """Raw frame blocks behind the pooled and flank features of each proposal."""
    pooled, flanks = [], []
    for s, e in ranges.tolist():
        pooled.append(frames[s:e])
        left = frames[max(0, 2 * s - e) : s]
        right = frames[e : min(len(frames), 2 * e - s)]
        flanks.append(np.vstack([left, right]) if len(left) + len(right) else frames[0:0])
    return pooled, flanks


def joint_grad(items, p: ScorerParams, adapter: AdapterParams | None, cfg: JointTrainConfig):
    """Gradients of ``joint_loss`` w.r.t. scorer params and, in joint mode, adapter params."""
    g_theta = np.zeros_like(p.theta)
    g_bias = 0.0
    flow = cfg.joint and adapter is not None
    g_adapter = AdapterParams.zeros(adapter.dim, adapter.bottleneck) if flow else None
    th_h, _, th_hq, th_ctr = p.blocks()
    cache: dict[int, np.ndarray] = {}
    n = len(items)
    for item in items:
        adapted = _adapted(item.frames, adapter, cache)
        _, Xp, gp, Xn, gn = _item_logit_grads(item, adapted, p, cfg)
        g_theta += Xp.T @ gp / n
        g_bias += gp.sum() / n
        if Xn is not None and len(gn):
            g_theta += Xn.T @ gn / n
            g_bias += gn.sum() / n
        if flow:
            for ranges, window, g in ((item.pos_ranges, item.pos_window, gp), (item.neg_ranges, item.neg_window, gn)):
                if len(g) == 0:
                    continue
                pooled, flanks = _proposal_blocks(item.frames, ranges)
                gh = np.outer(g, th_h + (th_hq + th_ctr) * item.q) / n
                gc = np.outer(g, -th_ctr * item.q) / n
                # flank gradient only matters where the flank is non-empty
                keep = [i for i, f in enumerate(flanks) if len(f)]
                part = pooled_backward(pooled, gh, adapter)
                part = part.axpy(1.0, pooled_backward([flanks[i] for i in keep], gc[keep], adapter))
                g_adapter = g_adapter.axpy(1.0, part)
    if flow and cfg.lambda_adapt and n >= 2:
        from .adapter import adapter_grad

        g_nce = adapter_grad([(_gt_block(it), it.q) for it in items], adapter)
        g_adapter = g_adapter.axpy(cfg.lambda_adapt, g_nce)
    return ScorerParams(g_theta, g_bias), g_adapter


def best_positive_window(ws: WindowSet, gt: Span, fps: float) -> Window:
    """The window overlapping the ground truth the most (lowest index on ties)."""
    overlaps = [w.span(fps).intersection(gt) for w in ws]
    return ws[int(np.argmax(overlaps))]


def build_items(instances, window_length: int, cfg: JointTrainConfig, rng, normalize: bool = False):
    """One training item per instance with a freshly sampled negative window."""
    items = []
    for inst in instances:
        frames = inst.video.vectors.astype(np.float64)
        ws = slice_windows(len(frames), window_length)
        pos = best_positive_window(ws, inst.gt, inst.fps)
        negatives = [w for w in ws if not label_window(w, inst.gt, inst.fps)]
        neg = negatives[int(rng.integers(len(negatives)))] if negatives else None
        items.append(
            WindowBatchItem(frames, inst.query.cls.astype(np.float64), inst.gt, inst.fps, pos, neg).prepare(cfg)
        )
    return items


@dataclass
class ScorerHistory:
    train_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)


def train_scorer(
    instances,
    adapter: AdapterParams | None,
    cfg: JointTrainConfig,
    window_length: int,
    init: ScorerParams | None = None,
):
    """Minimize ``L_ori + lambda_con * L_con`` over the scoring head.

    Negative windows are resampled every epoch. Progress is monitored on a
    fixed negative draw; an epoch that raises that loss is rolled back and
    the learning rate halved. In joint mode the adapter is updated too, with
    ``lambda_adapt * L_adapt`` added. Returns ``(scorer, adapter, history)``.
    """
    instances = list(instances)
    if len(instances) < 2:
        raise InsufficientData("scorer training needs at least 2 instances")
    dim = instances[0].video.dim
    rng = np.random.default_rng(cfg.seed)
    monitor_rng = np.random.default_rng([cfg.seed, 1])
    monitor = build_items(instances, window_length, cfg, monitor_rng)
    p = init.copy() if init is not None else ScorerParams.zeros(dim)
    a = adapter.copy() if adapter is not None else None
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    opt_a = make_optimizer(cfg.optimizer, cfg.adapter_learning_rate) if a is not None else None
    hist = ScorerHistory()
    prev = joint_loss(monitor, p, a, cfg)
    hist.train_loss.append(prev)
    hist.learning_rate.append(opt.lr)
    for epoch in range(cfg.epochs):
        items = build_items(instances, window_length, cfg, rng)
        order = rng.permutation(len(items))
        cand_p, cand_a = p.copy(), a.copy() if a is not None else None
        cand_opt, cand_opt_a = opt.clone(), opt_a.clone() if opt_a is not None else None
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            gp, ga = joint_grad(batch, cand_p, cand_a, cfg)
            theta, bias = cand_opt.step([cand_p.theta, np.array([cand_p.bias])], [gp.theta, np.array([gp.bias])])
            cand_p = ScorerParams(theta, bias[0])
            if ga is not None:
                cand_a = AdapterParams(*cand_opt_a.step(cand_a.arrays(), ga.arrays()))
        loss = joint_loss(monitor, cand_p, cand_a, cfg)
        if np.isfinite(loss) and loss <= prev:
            p, a, prev = cand_p, cand_a, loss
            opt, opt_a = cand_opt, cand_opt_a
        else:
            opt.lr *= 0.5
            if opt_a is not None:
                opt_a.lr *= 0.5
        hist.train_loss.append(prev)
        hist.learning_rate.append(opt.lr)
        log.debug("scorer epoch %d loss %.6f lr %g", epoch, prev, opt.lr)
    return p, a, hist


def write_scorer(path, p: ScorerParams) -> None:
    body = np.ascontiguousarray(np.append(p.theta, p.bias), dtype="<f4").tobytes()
    Path(path).write_bytes(_SCORER_HEADER.pack(SCORER_MAGIC, p.dim) + body)


def read_scorer(path) -> ScorerParams:
    from .datastore import BadMagic, TruncatedFile

    data = Path(path).read_bytes()
    if len(data) < _SCORER_HEADER.size:
        raise TruncatedFile(f"{path}: shorter than scorer header")
    magic, d = _SCORER_HEADER.unpack_from(data)
    if magic != SCORER_MAGIC:
        raise BadMagic(f"{path}: bad scorer magic {magic!r}")
    n = FEATURE_BLOCKS * d + 1
    if len(data) != _SCORER_HEADER.size + 4 * n:
        raise TruncatedFile(f"{path}: scorer body has wrong size")
    flat = np.frombuffer(data, dtype="<f4", offset=_SCORER_HEADER.size).astype(np.float64)
    return ScorerParams(flat[:-1], float(flat[-1]))


EXTERNAL_FIELDS = ("window_index", "start_sec", "end_sec", "score")


def read_external_rows(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            for key in EXTERNAL_FIELDS:
                if key not in row:
                    raise KeyError(key)
            row["window_index"] = int(row["window_index"])
            for key in ("start_sec", "end_sec", "score"):
                row[key] = float(row[key])
                if not math.isfinite(row[key]):
                    raise ValueError(f"{key} is not finite")
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedLine(f"{path}:{lineno}: {exc}") from exc
        rows.append(row)
    return rows


def proposals_from_rows(rows, ws: WindowSet, fps: float) -> list[Proposal]:
    """Validate externally produced proposals against a window set.

    Spans are clipped to their window and scores clamped into ``(0, 1)``.
    """
    out = []
    for row in rows:
        wi = row["window_index"]
        if not 0 <= wi < len(ws):
            raise UnknownWindowIndex(f"window {wi} not in [0, {len(ws)})")
        w = ws[wi]
        wspan = w.span(fps)
        start = min(max(row["start_sec"], wspan.start), wspan.end)
        end = min(max(row["end_sec"], wspan.start), wspan.end)
        if end <= start:
            raise MalformedLine(f"proposal [{row['start_sec']}, {row['end_sec']}) misses window {wi}")
        f0 = min(max(int(math.floor(start * fps + 1e-9)), w.start), w.end - 1)
        f1 = max(min(int(math.ceil(end * fps - 1e-9)), w.end), f0 + 1)
        score = min(max(row["score"], SCORE_CLAMP), 1.0 - SCORE_CLAMP)
        out.append(Proposal(wi, f0, f1, Span(start, end), score))
    return out


def load_external_scores(path, ws: WindowSet, fps: float, query_id: str | None = None) -> list[Proposal]:
    rows = read_external_rows(path)
    if query_id is not None:
        rows = [r for r in rows if r.get("query_id") == query_id]
    return proposals_from_rows(rows, ws, fps)
