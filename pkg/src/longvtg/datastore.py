"""Feature files, dataset manifests and synthetic corpora.

Feature sequences are stored in the CFV binary layout::

    b"CFV1" | u32 dim | u64 count | count * dim float32, little-endian, row-major

Manifests are JSONL with one grounding instance per line; feature paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GroundingError, Span

CFV_MAGIC = b"CFV1"
_CFV_HEADER = struct.Struct("<4sIQ")

MANIFEST_FIELDS = (
    "query_id",
    "video_id",
    "query_feature_file",
    "video_feature_file",
    "gt_start_sec",
    "gt_end_sec",
    "fps",
)


class BadMagic(GroundingError, ValueError):
    pass


class TruncatedFile(GroundingError, ValueError):
    pass


class NonFiniteValue(GroundingError, ValueError):
    pass


class ZeroDim(GroundingError, ValueError):
    pass


class MissingField(GroundingError, KeyError):
    pass


class UnresolvedFeatureFile(GroundingError, FileNotFoundError):
    pass


class GtOutOfRange(GroundingError, ValueError):
    pass


class InvalidSpec(GroundingError, ValueError):
    pass


@dataclass(eq=False)
class FeatureSequence:
    """Row-per-frame (video) or row-per-token (query) embeddings.

    For queries, row 0 holds the sentence-level [CLS] embedding.
    """

    vectors: np.ndarray
    fps: float = 1.0
    kind: str = "video"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError("feature sequence must be a 2-D array")
        if self.vectors.shape[1] == 0:
            raise ZeroDim("feature dimension must be positive")
        if self.vectors.shape[0] == 0:
            raise ValueError("feature sequence must hold at least one row")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFiniteValue("feature sequence contains NaN or Inf")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.kind not in ("video", "query"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.fps

    @property
    def cls(self) -> np.ndarray:
        return self.vectors[0]

    @property
    def f64(self) -> np.ndarray:
        """Float64 copy of the vectors, computed once."""
        cached = self.__dict__.get("_f64")
        if cached is None:
            cached = self.__dict__["_f64"] = np.asarray(self.vectors, dtype=np.float64)
        return cached

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.fps == other.fps
            and self.vectors.dtype == other.vectors.dtype
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass
class GroundingInstance:
    query_id: str
    video_id: str
    query: FeatureSequence
    video: FeatureSequence
    gt: Span
    query_feature_file: str = ""
    video_feature_file: str = ""

    @property
    def fps(self) -> float:
        return self.video.fps

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "video_id": self.video_id,
            "query_feature_file": self.query_feature_file,
            "video_feature_file": self.video_feature_file,
            "gt_start_sec": self.gt.start,
            "gt_end_sec": self.gt.end,
            "fps": self.video.fps,
        }


def encode_feature_file(vectors) -> bytes:
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array")
    if arr.shape[1] == 0:
        raise ZeroDim("feature dimension must be positive")
    return _CFV_HEADER.pack(CFV_MAGIC, arr.shape[1], arr.shape[0]) + arr.tobytes()


def decode_feature_file(data: bytes) -> np.ndarray:
    if len(data) < _CFV_HEADER.size:
        if data[:4] != CFV_MAGIC[: len(data[:4])]:
            raise BadMagic("not a CFV feature file")
        raise TruncatedFile("file shorter than the CFV header")
    magic, dim, count = _CFV_HEADER.unpack_from(data)
    if magic != CFV_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if dim == 0:
        raise ZeroDim("header declares dim 0")
    expected = _CFV_HEADER.size + 4 * dim * count
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", count=dim * count, offset=_CFV_HEADER.size)
    arr = arr.reshape(count, dim).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("feature file contains NaN or Inf")
    return arr


def write_feature_file(path, seq) -> None:
    vectors = seq.vectors if isinstance(seq, FeatureSequence) else seq
    Path(path).write_bytes(encode_feature_file(vectors))


def read_feature_file(path, fps: float = 1.0, kind: str = "video") -> FeatureSequence:
    arr = decode_feature_file(Path(path).read_bytes())
    if arr.shape[0] == 0:
        raise TruncatedFile(f"{path}: feature file holds no rows")
    return FeatureSequence(arr, fps=fps, kind=kind)


def _dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_manifest(path, records) -> None:
    lines = [_dump_line(r.to_record() if isinstance(r, GroundingInstance) else r) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest_records(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise MissingField(f"{path}:{lineno}: missing {', '.join(missing)}")
        records.append(rec)
    return records


def read_manifest(path, normalize: bool = False) -> list[GroundingInstance]:
    """Load every instance in a manifest, resolving and validating feature files.

    Video files shared by several queries are read once.
    """
    path = Path(path)
    root = path.parent
    videos: dict[str, FeatureSequence] = {}
    out = []
    for rec in read_manifest_records(path):
        fps = float(rec["fps"])
        vpath = root / rec["video_feature_file"]
        qpath = root / rec["query_feature_file"]
        for p in (vpath, qpath):
            if not p.is_file():
                raise UnresolvedFeatureFile(str(p))
        key = str(vpath)
        if key not in videos:
            video = read_feature_file(vpath, fps=fps, kind="video")
            if normalize:
                video = normalize_sequence(video)
            videos[key] = video
        video = videos[key]
        query = read_feature_file(qpath, fps=fps, kind="query")
        if normalize:
            query = normalize_sequence(query)
        if query.dim != video.dim:
            raise GroundingError(f"{rec['query_id']}: query dim {query.dim} != video dim {video.dim}")
        start, end = float(rec["gt_start_sec"]), float(rec["gt_end_sec"])
        if not (0.0 <= start < end <= video.duration):
            raise GtOutOfRange(
                f"{rec['query_id']}: gt [{start}, {end}) outside [0, {video.duration})"
            )
        out.append(
            GroundingInstance(
                query_id=str(rec["query_id"]),
                video_id=str(rec["video_id"]),
                query=query,
                video=video,
                gt=Span(start, end),
                query_feature_file=rec["query_feature_file"],
                video_feature_file=rec["video_feature_file"],
            )
        )
    return out


def normalize_sequence(seq: FeatureSequence) -> FeatureSequence:
    v = seq.vectors.astype(np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    return FeatureSequence(v, fps=seq.fps, kind=seq.kind)


@dataclass
class SynthSpec:
    num_videos: int = 10
    video_length_features: int = 900
    dim: int = 64
    queries_per_video: int = 3
    moment_length_features: tuple[int, int] = (20, 40)
    signal_strength: float = 1.0
    noise_seed: int = 0
    fps: float = 1.875
    query_tokens: int = 8

    def validate(self) -> None:
        lo, hi = self.moment_length_features
        checks = [
            (self.num_videos >= 1, "num_videos must be >= 1"),
            (self.video_length_features >= 1, "video_length_features must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.queries_per_video >= 1, "queries_per_video must be >= 1"),
            (1 <= lo <= hi, "moment lengths must satisfy 1 <= min <= max"),
            (hi <= self.video_length_features, "moments must fit inside the video"),
            (0.0 <= self.signal_strength <= 1.0, "signal_strength must lie in [0, 1]"),
            (self.fps > 0, "fps must be positive"),
            (self.query_tokens >= 0, "query_tokens must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidSpec(msg)


@dataclass
class SynthCorpus:
    videos: dict[str, np.ndarray] = field(default_factory=dict)
    queries: dict[str, np.ndarray] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _place_moments(rng, length, count, lo, hi, max_tries=1000):
    spans: list[tuple[int, int]] = []
    for _ in range(count):
        for _ in range(max_tries):
            n = int(rng.integers(lo, hi + 1))
            b = int(rng.integers(0, length - n + 1))
            if all(b >= e or b + n <= s for s, e in spans):
                spans.append((b, b + n))
                break
        else:
            raise InvalidSpec("cannot place non-overlapping moments; video too short")
    return spans


def synthesize_corpus(spec: SynthSpec) -> SynthCorpus:
    """Planted-signal corpus.

    Each query gets a random unit direction ``u``. Frames inside its moment
    are ``normalize(a*u + (1-a)*g)``; all other frames
    are normalized noise, ``g ~ N(0, I)``. The query [CLS] row is ``u``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.noise_seed)
    d = spec.dim
    a = spec.signal_strength
    corpus = SynthCorpus()
    lo, hi = spec.moment_length_features
    for vi in range(spec.num_videos):
        vid = f"v{vi:04d}"
        frames = rng.standard_normal((spec.video_length_features, d))
        spans = _place_moments(rng, spec.video_length_features, spec.queries_per_video, lo, hi)
        for qi, (b, e) in enumerate(spans):
            qid = f"{vid}_q{qi:02d}"
            u = _unit_rows(rng.standard_normal(d))
            frames[b:e] = a * u + (1.0 - a) * frames[b:e]
            tokens = _unit_rows(rng.standard_normal((spec.query_tokens, d)))
            corpus.queries[qid] = np.vstack([u[None, :], tokens]).astype(np.float32)
            corpus.records.append(
                {
                    "query_id": qid,
                    "video_id": vid,
                    "query_feature_file": f"queries/{qid}.cfv",
                    "video_feature_file": f"videos/{vid}.cfv",
                    "gt_start_sec": b / spec.fps,
                    "gt_end_sec": e / spec.fps,
                    "fps": spec.fps,
                }
            )
        corpus.videos[vid] = _unit_rows(frames).astype(np.float32)
    return corpus


def write_corpus(corpus: SynthCorpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    for vid, arr in corpus.videos.items():
        write_feature_file(out / "videos" / f"{vid}.cfv", arr)
    for qid, arr in corpus.queries.items():
        write_feature_file(out / "queries" / f"{qid}.cfv", arr)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, corpus.records)
    return manifest


def corpus_instances(corpus: SynthCorpus) -> list[GroundingInstance]:
    """In-memory instances, bit-identical to what ``read_manifest`` returns."""
    videos = {}
    out = []
    for rec in corpus.records:
        fps = rec["fps"]
        vid = rec["video_id"]
        if vid not in videos:
            videos[vid] = FeatureSequence(corpus.videos[vid], fps=fps, kind="video")
        out.append(
            GroundingInstance(
                query_id=rec["query_id"],
                video_id=vid,
                query=FeatureSequence(corpus.queries[rec["query_id"]], fps=fps, kind="query"),
                video=videos[vid],
                gt=Span(rec["gt_start_sec"], rec["gt_end_sec"]),
                query_feature_file=rec["query_feature_file"],
                video_feature_file=rec["video_feature_file"],
            )
        )
    return out
