import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import THOROUGH
from longvtg.core import Span
from longvtg.windowing import (
    DEFAULT_WINDOW_LENGTH,
    InvalidWindowLength,
    NoNegativeWindow,
    Window,
    label_window,
    positive_windows,
    sample_negative_window,
    slice_windows,
)

FPS = 1.875


def test_slice_examples():
    assert list(slice_windows(90, 90).starts) == [0]
    assert slice_windows(90, 90)[0].length == 90
    assert list(slice_windows(100, 90).starts) == [0, 10]
    assert list(slice_windows(300, 90).starts) == [0, 45, 90, 135, 180, 210]


def test_slice_short_video_and_errors():
    ws = slice_windows(30, 90)
    assert len(ws) == 1 and ws[0].length == 30
    with pytest.raises(InvalidWindowLength):
        slice_windows(100, 1)


def test_default_lengths():
    assert DEFAULT_WINDOW_LENGTH[1.875] == 90
    assert DEFAULT_WINDOW_LENGTH[5.0] == 125


def _starts_ref(L_v, L_w):
    if L_v <= L_w:
        return [0]
    s = L_w // 2
    out, b = [], 0
    while b + L_w <= L_v:
        out.append(b)
        b += s
    if out[-1] + L_w < L_v:
        out.append(L_v - L_w)
    return out


@THOROUGH
@given(st.integers(1, 3000), st.integers(2, 300))
def test_slice_properties(L_v, L_w):
    ws = slice_windows(L_v, L_w)
    starts = list(ws.starts)
    assert starts == _starts_ref(L_v, L_w)
    assert ws.stride == L_w // 2
    assert all(a < b for a, b in zip(starts, starts[1:]))
    covered = np.zeros(L_v, dtype=bool)
    for w in ws:
        assert 0 <= w.start and w.end <= L_v
        assert w.length == (L_w if L_v >= L_w else L_v)
        covered[w.start : w.end] = True
    assert covered.all()
    assert len(ws) <= math.ceil(L_v / max(1, L_w // 2)) + 1
    # consecutive stride-aligned windows overlap by L_w - floor(L_w/2)
    for a, b in zip(ws.windows, ws.windows[1:]):
        if b.start - a.start == ws.stride:
            assert a.end - b.start == L_w - L_w // 2


def test_label_examples():
    w0 = Window(0, 0, 90)  # [0, 48) seconds
    assert label_window(w0, Span(40, 60), FPS)
    assert not label_window(w0, Span(48, 60), FPS)
    w1 = Window(1, 45, 90)  # [24, 72) seconds
    assert label_window(w1, Span(71.9, 80), FPS)


@THOROUGH
@given(st.integers(0, 500), st.integers(1, 200), st.floats(0, 400), st.floats(0, 100))
def test_label_is_positive_intersection(start, length, gs, glen):
    w = Window(0, start, length)
    gt = Span(gs, gs + glen)
    ws_, we_ = w.start / FPS, w.end / FPS
    inter = max(0.0, min(we_, gt.end) - max(ws_, gt.start))
    assert label_window(w, gt, FPS) == (inter > 0)


def test_sample_negative_membership_and_determinism():
    ws = slice_windows(300, 90)  # 6 windows
    gt = Span(50, 70)  # seconds
    pos = positive_windows(ws, gt, FPS)
    assert len(pos) == 2
    draws = {sample_negative_window(ws, gt, FPS, np.random.default_rng(s)).index for s in range(200)}
    assert draws == set(range(6)) - set(pos)
    a = sample_negative_window(ws, gt, FPS, np.random.default_rng(5))
    b = sample_negative_window(ws, gt, FPS, np.random.default_rng(5))
    assert a == b


def test_no_negative_window():
    ws = slice_windows(300, 90)
    with pytest.raises(NoNegativeWindow):
        sample_negative_window(ws, Span(0, 300 / FPS), FPS, np.random.default_rng(0))
