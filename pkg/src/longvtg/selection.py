"""Query-guided coarse window selection."""

from __future__ import annotations

import heapq

import numpy as np

from .adapter import AdapterParams
from .core import DimensionMismatch
from .windowing import WindowSet


def frame_scores(video, q_cls, adapter: AdapterParams | None = None) -> np.ndarray:
    """Dot product of every (optionally adapted) frame with the query [CLS] vector.

    With an adapter the adapted frames are never materialized:
    ``adapt(v) . q = relu(W1 v + b1) . (W2^T q) + b2 . q + v . q``.
    """
    frames = video.f64 if hasattr(video, "f64") else np.asarray(video, dtype=np.float64)
    q = np.asarray(q_cls, dtype=np.float64)
    if frames.shape[-1] != q.shape[-1]:
        raise DimensionMismatch(f"frame dim {frames.shape[-1]} != query dim {q.shape[-1]}")
    raw = frames @ q
    if adapter is None:
        return raw
    if adapter.dim != q.shape[-1]:
        raise DimensionMismatch(f"adapter dim {adapter.dim} != query dim {q.shape[-1]}")
    hidden = np.maximum(frames @ adapter.W1.T + adapter.b1, 0.0)
    return hidden @ (adapter.W2.T @ q) + adapter.b2 @ q + raw


def window_scores(ws: WindowSet, a) -> np.ndarray:
    """Max frame score inside each window."""
    a = np.asarray(a, dtype=np.float64)
    if len(a) != ws.video_length:
        raise ValueError(f"expected {ws.video_length} frame scores, got {len(a)}")
    if all(w.length == ws.windows[0].length for w in ws):
        # equal-length windows: one strided view instead of a Python loop
        length = ws.windows[0].length
        view = np.lib.stride_tricks.sliding_window_view(a, length)
        return view[ws.starts].max(axis=1)
    return np.array([a[w.start : w.end].max() for w in ws])


def select_top_k(A, k: int) -> list[int]:
    """Indices of the ``k`` highest scores, descending; ties go to the lower index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    A = np.asarray(A, dtype=np.float64)
    # bounded heap keyed on (score, -index): the root is the weakest kept entry
    heap: list[tuple[float, int]] = []
    for i, score in enumerate(A.tolist()):
        item = (score, -i)
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    return [-neg for _, neg in sorted(heap, reverse=True)]


def select_windows(ws: WindowSet, video, q_cls, k: int, adapter=None):
    """Return ``(frame scores, window scores, selected window indices)``."""
    a = frame_scores(video, q_cls, adapter)
    A = window_scores(ws, a)
    return a, A, select_top_k(A, k)
