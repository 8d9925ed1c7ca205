"""Corpus-wide inference: the moment index, top-k search, and the evaluation protocol.

The index is one matrix of L2-normalized candidate embeddings for every video
in the corpus; queries are exact brute-force cosine scans. Metrics follow the
standard protocol: R@k at an IoU threshold, and median rank of the first
correct retrieval (with rank total+1 for queries never found).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError
from .geometry import DatasetProfile, MomentSpan, enumerate_candidates, fit_length, iou
from .model import ModelParams, encode_moments, encode_sentence
from .synthdata import SyntheticCorpus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruth:
    sentence_id: str
    video_id: str
    spans: tuple[MomentSpan, ...]

    def __post_init__(self):
        if not self.spans:
            raise ContractError("a ground truth needs at least one span")


@dataclass(frozen=True)
class RankedMoment:
    video_id: str
    span: MomentSpan
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked candidate moments for one query, best first."""

    entries: tuple[RankedMoment, ...]


@dataclass
class CorpusIndex:
    """All candidate embeddings of a corpus, rows L2-normalized, metadata aligned."""

    matrix: np.ndarray  # [rows, embed_dim]
    video_ids: list[str]  # per row
    spans: list[MomentSpan]  # per row
    profile: DatasetProfile
    video_rank: np.ndarray = field(repr=False, default=None)  # per row, lexicographic video order
    cand_index: np.ndarray = field(repr=False, default=None)  # per row, candidate index in video

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


def _normalize_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((matrix * matrix).sum(axis=1))
    if (norms == 0.0).any():
        log.warning("%s has zero-norm rows; they score 0 against everything", what)
    safe = np.where(norms == 0.0, 1.0, norms)
    return matrix / safe[:, None]


def build_index(corpus: SyntheticCorpus, params: ModelParams, profile: DatasetProfile,
                threads: int = 1) -> CorpusIndex:
    """Encode every video once and stack the normalized candidate embeddings."""
    if not corpus.videos:
        raise ContractError("cannot index an empty corpus")
    if corpus.clip_dim != params.clip_dim:
        raise ConfigError(f"corpus clip_dim {corpus.clip_dim} != params clip_dim {params.clip_dim}")
    candidates = enumerate_candidates(profile)
    cand_spans = candidates.spans()

    def encode(video):
        feats = fit_length(np.asarray(video.clips, dtype=nc.dtype()), profile.input_clips)
        return encode_moments(feats, params, profile).data

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(encode, corpus.videos))
    else:
        blocks = [encode(v) for v in corpus.videos]

    matrix = _normalize_rows(np.concatenate(blocks, axis=0), "corpus index")
    video_ids = [v.video_id for v in corpus.videos for _ in cand_spans]
    spans = [s for _ in corpus.videos for s in cand_spans]
    rank_of = {vid: r for r, vid in enumerate(sorted({v.video_id for v in corpus.videos}))}
    m = len(cand_spans)
    return CorpusIndex(
        matrix=matrix,
        video_ids=video_ids,
        spans=spans,
        profile=profile,
        video_rank=np.array([rank_of[v] for v in video_ids]),
        cand_index=np.tile(np.arange(m), len(corpus.videos)),
    )


def _ranked_order(index: CorpusIndex, scores: np.ndarray) -> np.ndarray:
    # Descending score; ties broken by (video id, candidate index).
    return np.lexsort((index.cand_index, index.video_rank, -scores))


def query_top_k(index: CorpusIndex, sentence_embedding, k: int) -> RetrievalResult:
    """Exact top-k of the whole index by cosine similarity (k > rows returns all)."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    q = np.asarray(sentence_embedding, dtype=index.matrix.dtype).reshape(-1)
    if q.shape[0] != index.matrix.shape[1]:
        raise ConfigError(f"query dim {q.shape[0]} != index dim {index.matrix.shape[1]}")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        log.warning("zero-norm query; every score is 0")
    else:
        q = q / norm
    scores = index.matrix @ q
    order = _ranked_order(index, scores)[: min(k, index.rows)]
    return RetrievalResult(tuple(
        RankedMoment(index.video_ids[i], index.spans[i], float(scores[i])) for i in order
    ))


def _query_hit(entry: RankedMoment, gt: GroundTruth, iou_m: float, min_annotations: int) -> bool:
    if entry.video_id != gt.video_id:
        return False
    matches = sum(1 for s in gt.spans if iou(entry.span, s) >= iou_m)
    return matches >= min_annotations


def recall_at_k_iou(results: list[RetrievalResult], gts: list[GroundTruth], k: int,
                    iou_m: float, min_annotations: int = 1) -> float:
    """Fraction of queries with a top-k entry in the right video at IoU >= m.

    A hit must clear the IoU bar against at least ``min_annotations`` annotated
    spans (2 for multi-annotator corpora, 1 otherwise).
    """
    if len(results) != len(gts):
        raise ContractError(f"{len(results)} results for {len(gts)} ground truths")
    if not results:
        raise ContractError("recall over zero queries")
    hits = 0
    for result, gt in zip(results, gts):
        if any(_query_hit(e, gt, iou_m, min_annotations) for e in result.entries[:k]):
            hits += 1
    return hits / len(results)


def median_rank(results: list[RetrievalResult], gts: list[GroundTruth], iou_m: float,
                min_annotations: int = 1) -> float:
    """Median over queries of the rank of the first correct entry.

    ``results`` must be full rankings; a query with no correct entry anywhere
    counts as rank total+1.
    """
    if len(results) != len(gts):
        raise ContractError(f"{len(results)} results for {len(gts)} ground truths")
    if not results:
        raise ContractError("median rank over zero queries")
    ranks = []
    for result, gt in zip(results, gts):
        rank = len(result.entries) + 1
        for at, entry in enumerate(result.entries, start=1):
            if _query_hit(entry, gt, iou_m, min_annotations):
                rank = at
                break
        ranks.append(rank)
    return float(np.median(ranks))


def corpus_ground_truths(corpus: SyntheticCorpus) -> tuple[np.ndarray, list[GroundTruth]]:
    """Sentence feature matrix and aligned ground truths for every annotation."""
    feats, gts = [], []
    for v in corpus.videos:
        for a in v.annotations:
            feats.append(np.asarray(a.feature, dtype=nc.dtype()))
            gts.append(GroundTruth(a.sentence_id, v.video_id, tuple(a.spans)))
    if not gts:
        raise ContractError("corpus has no annotations")
    return np.stack(feats), gts


def moment_frequency_prior(train_gts: list[GroundTruth], profile: DatasetProfile,
                           video_ids: list[str], seed: int) -> RetrievalResult:
    """Query-independent ranking: spans by training-set positive frequency.

    A candidate span's count is the number of training ground-truth spans it
    overlaps with IoU >= 0.5; count ties break on total IoU mass, then on
    enumeration order. Within each span rank the videos are ordered randomly
    (seeded), as the prior says nothing about videos.
    """
    candidates = enumerate_candidates(profile)
    counts = np.zeros(candidates.count, dtype=np.int64)
    iou_mass = np.zeros(candidates.count)
    for gt in train_gts:
        for span in gt.spans:
            for i, c in enumerate(candidates.entries):
                overlap = iou(c.span, span)
                iou_mass[i] += overlap
                if overlap >= 0.5:
                    counts[i] += 1
    span_order = sorted(range(candidates.count), key=lambda i: (-counts[i], -iou_mass[i], i))
    rng = np.random.default_rng(seed)
    entries = []
    total = candidates.count * len(video_ids)
    for ci in span_order:
        span = candidates.entries[ci].span
        vids = list(video_ids)
        rng.shuffle(vids)
        for vid in vids:
            entries.append(RankedMoment(vid, span, 1.0 - len(entries) / total))
    return RetrievalResult(tuple(entries))


# ---------------------------------------------------------------------------
# the full evaluation protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSettings:
    k_values: tuple[int, ...] = (10, 100)
    iou_values: tuple[float, ...] = (0.5, 0.7)
    min_annotations: int = 1


@dataclass
class EvalReport:
    recall: dict[str, float]  # keyed "r@{k}_iou{m}"
    median_rank: dict[str, float]  # keyed "mr_iou{m}"
    query_count: int

    def to_dict(self) -> dict:
        return {
            "recall": dict(sorted(self.recall.items())),
            "median_rank": dict(sorted(self.median_rank.items())),
            "query_count": self.query_count,
        }

    def table(self) -> str:
        lines = [f"queries: {self.query_count}"]
        header = f"{'metric':<16}{'value':>10}"
        lines.append(header)
        lines.append("-" * len(header))
        for key in sorted(self.recall):
            lines.append(f"{key:<16}{self.recall[key]:>10.4f}")
        for key in sorted(self.median_rank):
            lines.append(f"{key:<16}{self.median_rank[key]:>10.1f}")
        return "\n".join(lines)


def full_rankings(index: CorpusIndex, query_embeddings: np.ndarray) -> list[RetrievalResult]:
    """Complete ranked lists for a batch of already-encoded queries."""
    q = _normalize_rows(np.asarray(query_embeddings, dtype=index.matrix.dtype), "queries")
    scores = index.matrix @ q.T  # [rows, n_queries]
    results = []
    for j in range(q.shape[0]):
        order = _ranked_order(index, scores[:, j])
        results.append(RetrievalResult(tuple(
            RankedMoment(index.video_ids[i], index.spans[i], float(scores[i, j])) for i in order
        )))
    return results


def _metrics_from_results(results, gts, settings: EvalSettings) -> EvalReport:
    recall = {}
    for k in settings.k_values:
        for m in settings.iou_values:
            recall[f"r@{k}_iou{m:g}"] = recall_at_k_iou(results, gts, k, m,
                                                        settings.min_annotations)
    mr = {f"mr_iou{m:g}": median_rank(results, gts, m, settings.min_annotations)
          for m in settings.iou_values}
    return EvalReport(recall, mr, len(gts))


def evaluate(params: ModelParams, corpus: SyntheticCorpus, profile: DatasetProfile,
             settings: EvalSettings = EvalSettings(), threads: int = 1) -> EvalReport:
    """Index the corpus, encode its sentences (infer mode), and score all metrics."""
    index = build_index(corpus, params, profile, threads=threads)
    feats, gts = corpus_ground_truths(corpus)
    query_embs = encode_sentence(feats, params, mode="infer").data
    results = full_rankings(index, query_embs)
    return _metrics_from_results(results, gts, settings)


def evaluate_prior(train_corpus: SyntheticCorpus, eval_corpus: SyntheticCorpus,
                   profile: DatasetProfile, settings: EvalSettings = EvalSettings(),
                   seed: int = 0) -> EvalReport:
    """Score the moment-frequency-prior baseline against the eval corpus."""
    _, train_gts = corpus_ground_truths(train_corpus)
    _, gts = corpus_ground_truths(eval_corpus)
    ranking = moment_frequency_prior(train_gts, profile,
                                     [v.video_id for v in eval_corpus.videos], seed)
    results = [ranking] * len(gts)
    return _metrics_from_results(results, gts, settings)
