import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import THOROUGH
from longvtg.datastore import (
    BadMagic,
    FeatureSequence,
    GtOutOfRange,
    InvalidSpec,
    MissingField,
    NonFiniteValue,
    SynthSpec,
    TruncatedFile,
    UnresolvedFeatureFile,
    ZeroDim,
    corpus_instances,
    decode_feature_file,
    encode_feature_file,
    read_feature_file,
    read_manifest,
    synthesize_corpus,
    write_corpus,
    write_feature_file,
    write_manifest,
)


def _cfv(dim, rows, payload):
    return b"CFV1" + struct.pack("<IQ", dim, rows) + np.asarray(payload, dtype="<f4").tobytes()


def test_header_roundtrip(tmp_path):
    p = tmp_path / "a.cfv"
    p.write_bytes(_cfv(2, 3, np.arange(6)))
    seq = read_feature_file(p)
    assert len(seq) == 3 and seq.dim == 2
    np.testing.assert_array_equal(seq.vectors, np.arange(6, dtype=np.float32).reshape(3, 2))


def test_header_layout_is_little_endian():
    data = encode_feature_file(np.ones((5, 3), dtype=np.float32))
    assert data[:4] == b"CFV1"
    assert struct.unpack("<I", data[4:8])[0] == 3
    assert struct.unpack("<Q", data[8:16])[0] == 5
    assert len(data) == 16 + 5 * 3 * 4


def test_truncated_mid_row(tmp_path):
    p = tmp_path / "t.cfv"
    p.write_bytes(_cfv(2, 3, np.arange(6))[:-3])
    with pytest.raises(TruncatedFile):
        read_feature_file(p)


def test_decode_errors():
    with pytest.raises(BadMagic):
        decode_feature_file(b"XXXX" + bytes(12))
    with pytest.raises(TruncatedFile):
        decode_feature_file(b"CFV1\x01")
    with pytest.raises(ZeroDim):
        decode_feature_file(_cfv(0, 3, []))
    with pytest.raises(NonFiniteValue):
        decode_feature_file(_cfv(2, 1, [1.0, np.nan]))
    with pytest.raises(NonFiniteValue):
        decode_feature_file(_cfv(1, 1, [np.inf]))


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@THOROUGH
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12), elements=finite32))
def test_read_write_bit_exact(arr):
    data = encode_feature_file(arr)
    back = decode_feature_file(data)
    assert back.tobytes() == arr.astype("<f4").tobytes()
    assert encode_feature_file(back) == data


def test_file_roundtrip_identity(tmp_path):
    seq = FeatureSequence(np.random.default_rng(0).normal(size=(7, 4)).astype(np.float32), fps=2.0)
    write_feature_file(tmp_path / "s.cfv", seq)
    back = read_feature_file(tmp_path / "s.cfv", fps=2.0)
    assert back == seq
    write_feature_file(tmp_path / "s2.cfv", back)
    assert (tmp_path / "s.cfv").read_bytes() == (tmp_path / "s2.cfv").read_bytes()


def test_feature_sequence_invariants():
    with pytest.raises(ValueError):
        FeatureSequence(np.ones((3, 2)), fps=0)
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[1.0, np.nan]]), fps=1)
    with pytest.raises(ValueError):
        FeatureSequence(np.ones((1, 2)), fps=1, kind="audio")
    with pytest.raises(ValueError):
        FeatureSequence(np.ones((0, 2)), fps=1)
    assert FeatureSequence(np.ones((1, 2)), fps=1, kind="query").cls.shape == (2,)


def _write_two(tmp_path, gt_end=5.0):
    (tmp_path / "v.cfv").write_bytes(encode_feature_file(np.ones((10, 2), dtype=np.float32)))
    (tmp_path / "q.cfv").write_bytes(encode_feature_file(np.ones((3, 2), dtype=np.float32)))
    base = dict(video_id="v", query_feature_file="q.cfv", video_feature_file="v.cfv", gt_start_sec=1.0, fps=1.0)
    recs = [dict(base, query_id="a", gt_end_sec=gt_end), dict(base, query_id="b", gt_end_sec=3.0)]
    write_manifest(tmp_path / "m.jsonl", recs)
    return tmp_path / "m.jsonl", recs


def test_manifest_two_lines(tmp_path):
    path, _ = _write_two(tmp_path)
    insts = read_manifest(path)
    assert [i.query_id for i in insts] == ["a", "b"]
    assert insts[0].video is insts[1].video


def test_manifest_gt_out_of_range(tmp_path):
    path, _ = _write_two(tmp_path, gt_end=10.5)
    with pytest.raises(GtOutOfRange):
        read_manifest(path)


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert read_manifest(tmp_path / "m.jsonl") == []


def test_manifest_missing_field_and_file(tmp_path):
    path, recs = _write_two(tmp_path)
    bad = dict(recs[0])
    del bad["fps"]
    (tmp_path / "bad.jsonl").write_text(json.dumps(bad) + "\n")
    with pytest.raises(MissingField):
        read_manifest(tmp_path / "bad.jsonl")
    (tmp_path / "v.cfv").unlink()
    with pytest.raises(UnresolvedFeatureFile):
        read_manifest(path)


def test_manifest_roundtrip_bytes(tmp_path, small_corpus):
    m1 = write_corpus(small_corpus, tmp_path / "a")
    insts = read_manifest(m1)
    write_manifest(tmp_path / "b.jsonl", insts)
    assert m1.read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_synth_alpha_one_planted_frames():
    corpus = synthesize_corpus(SynthSpec(num_videos=2, video_length_features=200, dim=32, noise_seed=1))
    inside, outside = [], []
    for inst in corpus_instances(corpus):
        v = inst.video.f64
        q = inst.query.cls.astype(np.float64)
        b, e = round(inst.gt.start * inst.fps), round(inst.gt.end * inst.fps)
        scores = v @ q
        inside.extend(scores[b:e])
        mask = np.ones(len(v), bool)
        mask[b:e] = False
        outside.extend(scores[mask])
    np.testing.assert_allclose(inside, 1.0, atol=1e-6)
    assert abs(np.mean(outside)) < 0.1


def test_synth_alpha_zero_indistinguishable():
    corpus = synthesize_corpus(
        SynthSpec(num_videos=20, video_length_features=300, dim=32, signal_strength=0.0, noise_seed=2)
    )
    scores = []
    for inst in corpus_instances(corpus):
        b, e = round(inst.gt.start * inst.fps), round(inst.gt.end * inst.fps)
        scores.extend(inst.video.f64[b:e] @ inst.query.cls)
    assert len(scores) >= 1000
    assert abs(np.mean(scores)) < 0.1


def test_synth_counts_and_validation():
    corpus = synthesize_corpus(SynthSpec(num_videos=2, queries_per_video=3, video_length_features=400))
    assert len(corpus.records) == 6
    for bad in (
        SynthSpec(signal_strength=1.5),
        SynthSpec(video_length_features=30, moment_length_features=(20, 40)),
        SynthSpec(moment_length_features=(5, 2)),
    ):
        with pytest.raises(InvalidSpec):
            synthesize_corpus(bad)


def test_synth_reproducible_bytes(tmp_path):
    spec = SynthSpec(num_videos=2, video_length_features=150, dim=8, noise_seed=9)
    write_corpus(synthesize_corpus(spec), tmp_path / "a")
    write_corpus(synthesize_corpus(spec), tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(40, 200))
def test_synth_gt_within_video(seed, qpv, length):
    spec = SynthSpec(num_videos=1, video_length_features=length, dim=4, queries_per_video=qpv,
                     moment_length_features=(5, 12), noise_seed=seed)
    for inst in corpus_instances(synthesize_corpus(spec)):
        assert 0 <= inst.gt.start < inst.gt.end <= inst.video.duration
