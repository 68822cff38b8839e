import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import THOROUGH
from longvtg.adapter import AdapterParams
from longvtg.core import Span
from longvtg.datastore import SynthSpec, corpus_instances, synthesize_corpus
from longvtg.scorer import (
    JointTrainConfig,
    MalformedLine,
    ScorerParams,
    UnknownWindowIndex,
    WindowBatchItem,
    build_items,
    enumerate_proposals,
    inter_window_contrastive_loss,
    intra_window_loss,
    iou_targets,
    joint_grad,
    joint_loss,
    load_external_scores,
    proposal_inputs,
    read_scorer,
    score_proposal,
    train_scorer,
    write_scorer,
)
from longvtg.windowing import Window, slice_windows
from oracles import gradient_error, iou_ref

LN2 = float(np.log(2.0))


def test_enumerate_examples():
    a8 = enumerate_proposals(8)
    assert (0, 8) in a8 and (0, 1) in a8
    assert {e - s for s, e in a8} == {1, 2, 4, 8}
    assert sorted(enumerate_proposals(2)) == [(0, 1), (0, 2), (1, 2)]


@THOROUGH
@given(st.integers(1, 200), st.integers(0, 1000))
def test_anchors_inside_window_and_unique(length, start):
    w = Window(0, start, length)
    anchors = enumerate_proposals(w)
    assert len(anchors) == len(set(anchors))
    assert all(w.start <= s < e <= w.end for s, e in anchors)
    widths = {min(length, max(1, -(-length // f))) for f in (8, 4, 2, 1)}
    assert {e - s for s, e in anchors} == widths
    # every width tiles the window: its anchors reach both ends
    for wd in widths:
        starts = [s for s, e in anchors if e - s == wd]
        assert min(starts) == w.start and max(starts) + wd == w.end


def test_score_examples(rng):
    frames = rng.normal(size=(10, 4))
    q = rng.normal(size=4)
    assert score_proposal((2, 5), frames, q, ScorerParams.zeros(4)) == 0.5
    assert score_proposal((2, 5), frames, q, ScorerParams(np.zeros(16), 10.0)) > 0.9999
    assert score_proposal((2, 5), frames, q, ScorerParams(np.zeros(16), -10.0)) < 0.0001
    p = ScorerParams(rng.normal(size=16), 0.3)
    assert score_proposal((2, 5), frames, q, p) == score_proposal((2, 5), frames, q, p)


def test_proposal_inputs_match_direct_pooling(rng):
    frames = rng.normal(size=(30, 5))
    q = rng.normal(size=5)
    ranges = [(0, 3), (4, 12), (20, 30), (10, 11)]
    X = proposal_inputs(frames, ranges, q)
    for row, (s, e) in zip(X, ranges):
        w = e - s
        h = frames[s:e].mean(axis=0)
        ctx = np.vstack([frames[max(0, s - w) : s], frames[e : min(30, e + w)]]).mean(axis=0)
        np.testing.assert_allclose(row, np.concatenate([h, q, h * q, (h - ctx) * q]), atol=1e-12)


def test_intra_window_examples():
    gt = Span(0, 10)
    assert intra_window_loss([1 - 1e-12], [Span(0, 10)], gt) < 1e-10
    # iou 0.5 -> target 0.5 -> BCE at s=0.5 is ln 2
    assert iou_targets([0.5])[0] == pytest.approx(0.5)
    assert intra_window_loss([0.5], [Span(0, 5)], gt) == pytest.approx(LN2)
    assert iou_targets([0.3, 0.1, 0.0])[0] == 0.0 and iou_targets([0.1])[0] == 0.0


@THOROUGH
@given(st.lists(st.floats(0, 1), min_size=2, max_size=10))
def test_iou_targets_monotone(ious):
    ious = sorted(ious)
    y = iou_targets(ious)
    assert all(b >= a for a, b in zip(y, y[1:]))
    assert np.all((y >= 0) & (y <= 1))


def test_contrastive_examples():
    gt = Span(0, 10)
    assert inter_window_contrastive_loss([1.0], [Span(0, 10)], [0.0, 0.0], gt) == 0.0
    assert inter_window_contrastive_loss([0.5], [Span(0, 10)], [0.5], gt) == pytest.approx(2 * LN2, abs=1e-9)
    hi_pos = inter_window_contrastive_loss([0.6], [Span(0, 10)], [0.5], gt)
    lo_neg = inter_window_contrastive_loss([0.5], [Span(0, 10)], [0.4], gt)
    assert hi_pos < 2 * LN2 and lo_neg < 2 * LN2


def test_contrastive_fallback_positive():
    gt = Span(0, 10)
    # no proposal above 0.7: the best one (iou 0.5) becomes the positive
    loss = inter_window_contrastive_loss([0.5, 0.9], [Span(0, 5), Span(50, 60)], [], gt)
    assert loss == pytest.approx(LN2)


unit = st.floats(1e-6, 1 - 1e-6)


@THOROUGH
@given(st.lists(st.tuples(unit, st.floats(0, 20)), min_size=1, max_size=6), st.lists(unit, max_size=6))
def test_contrastive_nonnegative_against_reference(pos, neg):
    gt = Span(0, 10)
    spans = [Span(s, s + 10) for _, s in pos]
    scores = [p for p, _ in pos]
    ious = [iou_ref((sp.start, sp.end), (0, 10)) for sp in spans]
    mask = [i > 0.7 for i in ious]
    if not any(mask):
        mask[int(np.argmax(ious))] = True
    ref = -sum(np.log(s) for s, m in zip(scores, mask) if m) - sum(np.log(1 - s) for s in neg)
    loss = inter_window_contrastive_loss(scores, spans, neg, gt)
    assert loss >= 0
    assert loss == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_contrastive_zero_iff_perfect():
    gt = Span(0, 10)
    assert inter_window_contrastive_loss([1.0, 0.3], [Span(0, 10), Span(30, 40)], [0.0], gt) == 0.0
    assert inter_window_contrastive_loss([0.999], [Span(0, 10)], [0.0], gt) > 0


def _grad_config(seed):
    rng = np.random.default_rng(seed)
    d = 8
    joint = seed % 2 == 0
    cfg = JointTrainConfig(lambda_con=float(rng.uniform(0, 2)), joint=joint)
    while True:
        adapter = AdapterParams(0.5 * rng.normal(size=(2, d)), 0.3 * rng.normal(size=2),
                                0.5 * rng.normal(size=(d, 2)), 0.3 * rng.normal(size=d))
        videos = [rng.normal(size=(32, d)) for _ in range(4)]
        if min(np.abs(v @ adapter.W1.T + adapter.b1).min() for v in videos) > 0.05:
            break
    p = ScorerParams(0.5 * rng.normal(size=4 * d), float(rng.normal()))
    items = []
    for frames in videos:
        gs = int(rng.integers(0, 20))
        gt = Span(gs, gs + int(rng.integers(2, 8)))
        pos = Window(0, min((gs // 4) * 4, 24), 8)
        neg = Window(1, 24 if pos.start < 16 else 0, 8)
        items.append(WindowBatchItem(frames, rng.normal(size=d), gt, 1.0, pos, neg).prepare(cfg))
    return cfg, p, (adapter if joint else None), items


@pytest.mark.parametrize("seed", range(100))
def test_joint_grad_finite_differences(seed):
    cfg, p, adapter, items = _grad_config(seed)
    g_p, g_a = joint_grad(items, p, adapter, cfg)
    theta, bias = p.theta.copy(), np.array([p.bias])
    arrays = [theta, bias] + (adapter.arrays() if adapter is not None else [])
    analytic = [g_p.theta, np.array([g_p.bias])] + (g_a.arrays() if g_a is not None else [])
    loss = lambda: joint_loss(items, ScorerParams(theta, float(bias[0])), adapter, cfg)  # noqa: E731
    assert gradient_error(loss, arrays, analytic, h=1e-3) <= 1e-4


def test_lambda_con_zero_is_intra_only():
    cfg0 = JointTrainConfig(lambda_con=0.0)
    _, p, _, items = _grad_config(3)
    items = [WindowBatchItem(i.frames, i.q, i.gt, i.fps, i.pos_window, i.neg_window).prepare(cfg0) for i in items]
    ref = 0.0
    for it in items:
        X = proposal_inputs(it.frames, it.pos_ranges, it.q, (it.pos_window.start, it.pos_window.end))
        s = 1 / (1 + np.exp(-(X @ p.theta + p.bias)))
        spans = [Span(a, b) for a, b in it.pos_ranges.tolist()]
        ref += intra_window_loss(s, spans, it.gt)
    assert joint_loss(items, p, None, cfg0) == pytest.approx(ref / len(items), rel=1e-9)


@pytest.fixture(scope="module")
def separable():
    spec = SynthSpec(num_videos=12, video_length_features=450, dim=32, noise_seed=21)
    return corpus_instances(synthesize_corpus(spec))


def test_training_deterministic_and_separates(separable):
    cfg = JointTrainConfig(learning_rate=0.2, epochs=8, seed=4)
    p1, _, h1 = train_scorer(separable, None, cfg, 90)
    p2, _, _ = train_scorer(separable, None, cfg, 90)
    assert p1.theta.tobytes() == p2.theta.tobytes() and p1.bias == p2.bias
    assert all(b <= a for a, b in zip(h1.train_loss, h1.train_loss[1:]))
    items = build_items(separable, 90, cfg, np.random.default_rng(0))
    pos, neg = [], []
    for it in items:
        for ranges, window, out in ((it.pos_ranges, it.pos_window, pos), (it.neg_ranges, it.neg_window, neg)):
            X = proposal_inputs(it.frames, ranges, it.q, (window.start, window.end))
            s = 1 / (1 + np.exp(-(X @ p1.theta + p1.bias)))
            if out is pos:
                sec = ranges / it.fps
                s = s[[iou_ref((a, b), (it.gt.start, it.gt.end)) > 0 for a, b in sec]]
            out.extend(s)
    assert np.mean(pos) > np.mean(neg)


def test_checkpoint_roundtrip(tmp_path, rng):
    p = ScorerParams(rng.normal(size=4 * 6), 0.25)
    write_scorer(tmp_path / "s.ckpt", p)
    back = read_scorer(tmp_path / "s.ckpt")
    assert back.dim == 6
    write_scorer(tmp_path / "t.ckpt", back)
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "t.ckpt").read_bytes()


def _rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_external_scores(tmp_path):
    ws = slice_windows(300, 90)
    rows = [
        {"query_id": "a", "window_index": 0, "start_sec": 1.0, "end_sec": 5.0, "score": 0.4},
        {"query_id": "a", "window_index": 2, "start_sec": 50.0, "end_sec": 60.0, "score": 1.2},
        {"query_id": "a", "window_index": 5, "start_sec": 120.0, "end_sec": 200.0, "score": -3},
    ]
    props = load_external_scores(_rows(tmp_path / "e.jsonl", rows), ws, 1.875)
    assert len(props) == 3
    assert props[1].score == 1 - 1e-6 and props[2].score == 1e-6
    last = ws[5].span(1.875)
    assert props[2].span.end == last.end  # clipped to its window
    bad = _rows(tmp_path / "bad.jsonl", [dict(rows[0], window_index=6)])
    with pytest.raises(UnknownWindowIndex):
        load_external_scores(bad, ws, 1.875)
    (tmp_path / "junk.jsonl").write_text("{not json\n")
    with pytest.raises(MalformedLine):
        load_external_scores(tmp_path / "junk.jsonl", ws, 1.875)
    missing = _rows(tmp_path / "m.jsonl", [{"window_index": 0, "start_sec": 1}])
    with pytest.raises(MalformedLine):
        load_external_scores(missing, ws, 1.875)
