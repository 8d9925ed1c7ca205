"""Synthetic corpora with planted global/local structure, plus the feature container.

Each video gets a global concept vector (shared by all of its clips) and each
annotated moment a local concept; clips outside any annotated moment carry a
per-video background concept. Clip and sentence features are fixed random
linear images of (global, local) plus isotropic noise, so video-level
discrimination and within-video localization are both learnable, and with zero
noise the mapping is exactly linearly invertible.

The on-disk container ("HMF1") stores a JSON manifest followed by contiguous
little-endian float32 blocks; the full byte layout is documented in README.md.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, FormatError
from .geometry import DatasetProfile, MomentSpan, enumerate_candidates

MAGIC = b"HMF1"
LITTLE_ENDIAN_TAG = 0x01
_SPAN_RETRY_CAP = 200


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic corpus."""

    n_videos: int = 40
    sentences_per_video: int = 2
    clips_per_video: int = 12
    clip_dim: int = 32
    sent_dim: int = 32
    concept_dim: int = 8
    noise_sigma: float = 0.1
    span_source: str = "grid"  # "grid" (profile candidate spans) or "uniform"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_videos", "sentences_per_video", "clips_per_video",
                     "clip_dim", "sent_dim", "concept_dim"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if self.span_source not in ("grid", "uniform"):
            raise ContractError(f"span_source must be 'grid' or 'uniform', got {self.span_source!r}")


@dataclass
class Annotation:
    sentence_id: str
    feature: np.ndarray  # [sent_dim]
    spans: list[MomentSpan]


@dataclass
class Video:
    video_id: str
    clips: np.ndarray  # [clip_dim, clips_per_video]
    annotations: list[Annotation]
    split: str = ""  # "", "train", or "test"


@dataclass
class SyntheticCorpus:
    videos: list[Video]
    unit_seconds: float
    clip_dim: int
    sent_dim: int
    clips_per_video: int
    meta: dict = field(default_factory=dict)

    def annotation_pairs(self) -> list[tuple[int, int]]:
        """(video index, annotation index) for every sentence, in corpus order."""
        return [(vi, ai) for vi, v in enumerate(self.videos) for ai in range(len(v.annotations))]

    def subset(self, split: str) -> "SyntheticCorpus":
        vids = [v for v in self.videos if v.split == split]
        return replace(self, videos=vids)


def corpora_equal(a: SyntheticCorpus, b: SyntheticCorpus) -> bool:
    if (a.unit_seconds, a.clip_dim, a.sent_dim, a.clips_per_video) != (
            b.unit_seconds, b.clip_dim, b.sent_dim, b.clips_per_video):
        return False
    if len(a.videos) != len(b.videos):
        return False
    for va, vb in zip(a.videos, b.videos):
        if va.video_id != vb.video_id or va.split != vb.split:
            return False
        if not np.array_equal(va.clips, vb.clips):
            return False
        if len(va.annotations) != len(vb.annotations):
            return False
        for sa, sb in zip(va.annotations, vb.annotations):
            if sa.sentence_id != sb.sentence_id or sa.spans != sb.spans:
                return False
            if not np.array_equal(sa.feature, sb.feature):
                return False
    return True


def _spans_disjoint(spans: list[tuple[int, int]]) -> bool:
    for i in range(len(spans)):
        for j in range(i + 1, len(spans)):
            a, b = spans[i], spans[j]
            if a[0] < b[1] and b[0] < a[1]:
                return False
    return True


def _draw_spans(rng: np.random.Generator, spec: SyntheticSpec,
                grid: list[tuple[int, int]], base_units: int) -> list[tuple[int, int]]:
    for _ in range(_SPAN_RETRY_CAP):
        if spec.span_source == "grid":
            picks = [grid[int(rng.integers(len(grid)))] for _ in range(spec.sentences_per_video)]
        else:
            picks = []
            for _ in range(spec.sentences_per_video):
                start = int(rng.integers(base_units))
                end = int(rng.integers(start + 1, base_units + 1))
                picks.append((start, end))
        if _spans_disjoint(picks):
            return picks
    raise ContractError(
        f"could not draw {spec.sentences_per_video} disjoint spans in {_SPAN_RETRY_CAP} attempts"
    )


def generate_corpus(spec: SyntheticSpec, profile: DatasetProfile) -> SyntheticCorpus:
    """Draw a corpus per the spec, with spans on the profile's base-unit grid.

    Deterministic for a given spec: the RNG stream is consumed in a fixed
    order (projection maps; then per video: global concept, background
    concept, spans, per-annotation local concepts, clip noise, sentence noise).
    """
    if spec.clips_per_video != profile.input_clips:
        raise ContractError(
            f"spec.clips_per_video {spec.clips_per_video} must match "
            f"profile.input_clips {profile.input_clips}"
        )
    rng = np.random.default_rng(spec.seed)
    p = spec.concept_dim
    scale = 1.0 / np.sqrt(p)
    clip_of_global = rng.normal(0.0, scale, size=(spec.clip_dim, p))
    clip_of_local = rng.normal(0.0, scale, size=(spec.clip_dim, p))
    sent_of_global = rng.normal(0.0, scale, size=(spec.sent_dim, p))
    sent_of_local = rng.normal(0.0, scale, size=(spec.sent_dim, p))

    grid = sorted({(c.span.start_unit, c.span.end_unit)
                   for c in enumerate_candidates(profile).entries})
    unit_s = profile.unit_seconds
    stride = profile.pool_stride
    videos = []
    for vi in range(spec.n_videos):
        g = rng.normal(size=p)
        background = rng.normal(size=p)
        spans = _draw_spans(rng, spec, grid, profile.base_units)
        locals_ = [rng.normal(size=p) for _ in spans]

        # Each clip carries the local concept of the moment covering it.
        per_clip_local = [background] * spec.clips_per_video
        for (start, end), u in zip(spans, locals_):
            for clip in range(start * stride, min(end * stride, spec.clips_per_video)):
                per_clip_local[clip] = u
        clips = np.stack(
            [clip_of_global @ g + clip_of_local @ u for u in per_clip_local], axis=1
        )
        clips += spec.noise_sigma * rng.normal(size=clips.shape)

        annotations = []
        for ai, ((start, end), u) in enumerate(zip(spans, locals_)):
            feat = sent_of_global @ g + sent_of_local @ u
            feat = feat + spec.noise_sigma * rng.normal(size=feat.shape)
            annotations.append(Annotation(
                sentence_id=f"v{vi:04d}_s{ai}",
                feature=feat,
                spans=[MomentSpan(start, end, unit_s)],
            ))
        videos.append(Video(video_id=f"v{vi:04d}", clips=clips, annotations=annotations))

    return SyntheticCorpus(
        videos=videos,
        unit_seconds=unit_s,
        clip_dim=spec.clip_dim,
        sent_dim=spec.sent_dim,
        clips_per_video=spec.clips_per_video,
        meta={"spec": vars(spec) | {}, "profile": profile.name},
    )


def split(corpus: SyntheticCorpus, test_fraction: float, seed: int
          ) -> tuple[SyntheticCorpus, SyntheticCorpus]:
    """Video-level split; no video appears on both sides. Deterministic per seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(corpus.videos)
    if n < 2:
        raise ContractError("need at least 2 videos to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    test_idx = set(int(i) for i in order[:n_test])
    train_videos, test_videos = [], []
    for i, v in enumerate(corpus.videos):
        tag = "test" if i in test_idx else "train"
        tagged = replace(v, split=tag)
        (test_videos if tag == "test" else train_videos).append(tagged)
    return (replace(corpus, videos=train_videos), replace(corpus, videos=test_videos))


def tag_split(corpus: SyntheticCorpus, test_fraction: float, seed: int) -> SyntheticCorpus:
    """One corpus with every video tagged train/test (same partition as split())."""
    train, test = split(corpus, test_fraction, seed)
    by_id = {v.video_id: v for v in train.videos + test.videos}
    return replace(corpus, videos=[by_id[v.video_id] for v in corpus.videos])


# ---------------------------------------------------------------------------
# HMF1 container
# ---------------------------------------------------------------------------


def _manifest_for(corpus: SyntheticCorpus) -> dict:
    return {
        "format": 1,
        "unit_seconds": corpus.unit_seconds,
        "clip_dim": corpus.clip_dim,
        "sent_dim": corpus.sent_dim,
        "clips_per_video": corpus.clips_per_video,
        "meta": corpus.meta,
        "videos": [
            {
                "id": v.video_id,
                "split": v.split,
                "clips": int(v.clips.shape[1]),
                "annotations": [
                    {
                        "id": a.sentence_id,
                        "spans": [
                            {
                                "start_unit": s.start_unit,
                                "end_unit": s.end_unit,
                                "start_seconds": s.start_seconds,
                                "end_seconds": s.end_seconds,
                            }
                            for s in a.spans
                        ],
                    }
                    for a in v.annotations
                ],
            }
            for v in corpus.videos
        ],
    }


def write_features(path, corpus: SyntheticCorpus) -> None:
    """Serialize a corpus: magic, endianness tag, manifest, float32 blocks."""
    manifest = json.dumps(_manifest_for(corpus), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([LITTLE_ENDIAN_TAG]))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for v in corpus.videos:
            fh.write(np.ascontiguousarray(v.clips, dtype="<f4").tobytes())
            for a in v.annotations:
                fh.write(np.ascontiguousarray(a.feature, dtype="<f4").tobytes())


def read_features(path) -> SyntheticCorpus:
    """Parse an HMF1 file back into a corpus; features come back as float32."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(n: int, offset: int, what: str) -> None:
        if offset + n > len(blob):
            raise FormatError(f"truncated file: need {n} bytes for {what} at offset {offset}")

    need(4, 0, "magic")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    need(1, 4, "endianness tag")
    if blob[4] != LITTLE_ENDIAN_TAG:
        raise FormatError(f"unsupported endianness tag 0x{blob[4]:02x} at offset 4")
    need(4, 5, "manifest length")
    (mlen,) = struct.unpack_from("<I", blob, 5)
    need(mlen, 9, "manifest")
    try:
        manifest = json.loads(blob[9 : 9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest at offset 9: {exc}") from exc

    offset = 9 + mlen
    try:
        clip_dim = int(manifest["clip_dim"])
        sent_dim = int(manifest["sent_dim"])
        unit_seconds = float(manifest["unit_seconds"])
        clips_per_video = int(manifest["clips_per_video"])
        video_entries = manifest["videos"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest missing fields: {exc}") from exc

    videos = []
    for ventry in video_entries:
        n_clips = int(ventry["clips"])
        nbytes = 4 * clip_dim * n_clips
        need(nbytes, offset, f"clip block of {ventry['id']}")
        clips = np.frombuffer(blob, dtype="<f4", count=clip_dim * n_clips, offset=offset)
        clips = clips.reshape(clip_dim, n_clips).copy()
        offset += nbytes
        annotations = []
        for aentry in ventry["annotations"]:
            need(4 * sent_dim, offset, f"sentence block of {aentry['id']}")
            feat = np.frombuffer(blob, dtype="<f4", count=sent_dim, offset=offset).copy()
            offset += 4 * sent_dim
            spans = []
            for s in aentry["spans"]:
                span = MomentSpan(int(s["start_unit"]), int(s["end_unit"]), unit_seconds)
                if abs(span.start_seconds - float(s["start_seconds"])) > 1e-6:
                    raise FormatError(f"span units and seconds disagree for {aentry['id']}")
                spans.append(span)
            annotations.append(Annotation(aentry["id"], feat, spans))
        videos.append(Video(ventry["id"], clips, annotations, split=ventry.get("split", "")))

    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")
    return SyntheticCorpus(
        videos=videos,
        unit_seconds=unit_seconds,
        clip_dim=clip_dim,
        sent_dim=sent_dim,
        clips_per_video=clips_per_video,
        meta=manifest.get("meta", {}),
    )
