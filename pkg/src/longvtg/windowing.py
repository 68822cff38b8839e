"""Fixed-length, half-overlapping windows over a frame-feature sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GroundingError, Span

DEFAULT_WINDOW_LENGTH = {1.875: 90, 5.0: 125}


class InvalidWindowLength(GroundingError, ValueError):
    pass


class NoNegativeWindow(GroundingError, LookupError):
    pass


@dataclass(frozen=True)
class Window:
    index: int
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length

    def span(self, fps: float) -> Span:
        return Span(self.start / fps, self.end / fps)


@dataclass(frozen=True)
class WindowSet:
    windows: tuple[Window, ...]
    window_length: int
    stride: int
    video_length: int

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, i) -> Window:
        return self.windows[i]

    @property
    def starts(self) -> np.ndarray:
        return np.array([w.start for w in self.windows], dtype=np.int64)


def slice_windows(video_length: int, window_length: int) -> WindowSet:
    """Windows start at 0, s, 2s, ... with ``s = window_length // 2``.

    A final full-length window anchored at ``video_length - window_length``
    covers any unaligned tail. Videos no longer than one window get a single
    window over the whole video.
    """
    if window_length < 2:
        raise InvalidWindowLength(f"window length must be >= 2, got {window_length}")
    if video_length < 1:
        raise ValueError(f"video length must be >= 1, got {video_length}")
    stride = window_length // 2
    if video_length <= window_length:
        return WindowSet((Window(0, 0, video_length),), window_length, stride, video_length)
    starts = list(range(0, video_length - window_length + 1, stride))
    tail = video_length - window_length
    if starts[-1] != tail:
        starts.append(tail)
    windows = tuple(Window(i, s, window_length) for i, s in enumerate(starts))
    return WindowSet(windows, window_length, stride, video_length)


def label_window(window: Window, gt: Span, fps: float) -> bool:
    """True when the window's time span has a non-empty overlap with ``gt``."""
    return window.span(fps).intersection(gt) > 0.0


def positive_windows(ws: WindowSet, gt: Span, fps: float) -> list[int]:
    return [w.index for w in ws if label_window(w, gt, fps)]


def sample_negative_window(ws: WindowSet, gt: Span, fps: float, rng) -> Window:
    negatives = [w for w in ws if not label_window(w, gt, fps)]
    if not negatives:
        raise NoNegativeWindow("ground truth overlaps every window")
    return negatives[int(rng.integers(len(negatives)))]
