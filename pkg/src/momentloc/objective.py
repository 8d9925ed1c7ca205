"""Scoring and loss math for the joint embedding.

Moment-sentence similarity is cosine; video-sentence relevance pools the
similarities of all of a video's candidate moments with a scaled LogSumExp
(smooth maximum, sharper for larger ``sharpness``). Two triplet objectives
operate on those scores: an intra-video one separating a sentence's positive
candidates from the other candidates of the same video, and a video-level one
separating the annotated video from the other in-batch videos (and the
sentence from the other videos' sentences). Each comes in a sum-margin and a
hardest-negative (max-margin) variant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)


@dataclass
class BatchScores:
    """Similarity of every candidate of every in-batch video with every sentence.

    ``sims`` is [n_videos * m_per_video, n_sentences]; rows are grouped per
    video in batch order. ``sent_video`` maps each sentence to its video's
    index, ``positives`` lists its positive candidate indices within that
    video's block (empty iff ``skipped``).
    """

    sims: nc.Tensor
    m_per_video: int
    sent_video: list[int]
    positives: list[list[int]]
    skipped: list[bool]

    @property
    def n_videos(self) -> int:
        return self.sims.shape[0] // self.m_per_video

    @property
    def n_sentences(self) -> int:
        return self.sims.shape[1]

    def __post_init__(self):
        n = self.n_sentences
        if not (len(self.sent_video) == len(self.positives) == len(self.skipped) == n):
            raise ContractError("BatchScores per-sentence lists must align with sims columns")
        if self.sims.shape[0] % self.m_per_video != 0:
            raise ContractError("sims rows must be a whole number of per-video blocks")
        if self.sims.data.size and float(np.abs(self.sims.data).max()) > 1.0 + 1e-4:
            raise ContractError("similarities must be cosines in [-1, 1]")
        for pos, skip in zip(self.positives, self.skipped):
            if not skip and not pos:
                raise ContractError("a non-skipped sentence must have at least one positive")

    @classmethod
    def from_array(cls, sims, m_per_video, sent_video, positives, skipped=None):
        sims = nc.as_tensor(sims)
        if skipped is None:
            skipped = [not p for p in positives]
        return cls(sims, m_per_video, list(sent_video), [list(p) for p in positives], list(skipped))


def score_batch(moment_embeddings, sentence_embeddings, sent_video, positives, skipped=None
                ) -> BatchScores:
    """Assemble BatchScores from per-video moment embeddings and sentence embeddings."""
    blocks = [nc.as_tensor(e) for e in moment_embeddings]
    m = blocks[0].shape[0]
    for b in blocks:
        if b.shape[0] != m:
            raise ContractError("all videos in a batch must share one candidate count")
    sims = nc.cosine_matrix(nc.concat_rows(blocks), sentence_embeddings)
    return BatchScores.from_array(sims, m, sent_video, positives, skipped)


@dataclass
class LossReport:
    intra: float
    video: float
    reg: float
    total: float
    skipped_sentences: int


def similarity(m, s) -> float:
    """Cosine similarity of two embedding vectors; 0 if either has zero norm."""
    m = np.asarray(m, dtype=float).reshape(-1)
    s = np.asarray(s, dtype=float).reshape(-1)
    nm, ns = np.linalg.norm(m), np.linalg.norm(s)
    if nm == 0.0 or ns == 0.0:
        log.warning("similarity of a zero-norm embedding defined as 0")
        return 0.0
    return float(m @ s / (nm * ns))


def relevance(sims, sharpness: float) -> float:
    """Smooth-max pooling of moment similarities: (1/s) log sum exp(s * S_i)."""
    values = np.asarray(list(sims), dtype=float)
    if values.size == 0:
        raise ContractError("relevance needs at least one moment similarity")
    if sharpness <= 0:
        raise ContractError(f"sharpness must be > 0, got {sharpness}")
    top = values.max()
    return float(top + math.log(np.exp(sharpness * (values - top)).sum()) / sharpness)


def _own_column(scores: BatchScores, sentence: int) -> nc.Tensor:
    """Similarities of the sentence's own video's candidates with the sentence."""
    v = scores.sent_video[sentence]
    m = scores.m_per_video
    block = nc.slice2d(scores.sims, v * m, (v + 1) * m, sentence, sentence + 1)
    return nc.reshape(block, (m,))


def _zero() -> nc.Tensor:
    return nc.Tensor(0.0)


def intra_loss_sum(scores: BatchScores, margin: float) -> nc.Tensor:
    """Sum-margin triplet loss over (positive, same-video negative) pairs per sentence."""
    terms = []
    for j in range(scores.n_sentences):
        if scores.skipped[j]:
            continue
        pos_idx = scores.positives[j]
        pos_set = set(pos_idx)
        neg_idx = [i for i in range(scores.m_per_video) if i not in pos_set]
        if not neg_idx:
            continue
        u = _own_column(scores, j)
        hinge = nc.pairwise_hinge(nc.index_select(u, pos_idx), nc.index_select(u, neg_idx), margin)
        terms.append(nc.sum_all(hinge))
    return nc.add_n(terms) if terms else _zero()


def intra_loss_max(scores: BatchScores, margin: float) -> nc.Tensor:
    """Max-margin variant: each positive hinges against the hardest same-video negative."""
    terms = []
    for j in range(scores.n_sentences):
        if scores.skipped[j]:
            continue
        pos_idx = scores.positives[j]
        pos_set = set(pos_idx)
        neg_idx = [i for i in range(scores.m_per_video) if i not in pos_set]
        if not neg_idx:
            continue
        u = _own_column(scores, j)
        hardest = neg_idx[int(np.argmax(u.data[neg_idx]))]  # first max: lowest index
        _note_selection_gap(u.data[neg_idx])
        hinge = nc.pairwise_hinge(nc.index_select(u, pos_idx), nc.index_select(u, [hardest]), margin)
        terms.append(nc.sum_all(hinge))
    return nc.add_n(terms) if terms else _zero()


def _note_selection_gap(values: np.ndarray) -> None:
    if values.size >= 2:
        top = np.sort(values)
        if top[-1] == 0.0 and top[-2] == 0.0:
            return  # tie of zero-norm (dead) embeddings; pinned, not a kink
        nc.note_kink(float(top[-1] - top[-2]))


def relevance_matrix(scores: BatchScores, sharpness: float, pooling: str = "log") -> nc.Tensor:
    """[n_videos, n_sentences] matrix of pooled video-sentence relevance."""
    m = scores.m_per_video
    rows = []
    for v in range(scores.n_videos):
        block = nc.slice2d(scores.sims, v * m, (v + 1) * m, 0, scores.n_sentences)
        if pooling == "log":
            pooled = nc.scaled_logsumexp_cols(block, sharpness)
        elif pooling == "ave":
            pooled = nc.mean_cols(block)
        else:
            raise ContractError(f"pooling must be 'log' or 'ave', got {pooling!r}")
        rows.append(nc.reshape(pooled, (1, scores.n_sentences)))
    return nc.concat_rows(rows)


def _video_negatives(scores: BatchScores, sentence: int) -> list[int]:
    own = scores.sent_video[sentence]
    return [v for v in range(scores.n_videos) if v != own]


def _sentence_negatives(scores: BatchScores, sentence: int) -> list[int]:
    own = scores.sent_video[sentence]
    return [j for j in range(scores.n_sentences) if scores.sent_video[j] != own]


def video_loss_sum(scores: BatchScores, margin: float, sharpness: float,
                   pooling: str = "log") -> nc.Tensor:
    """Sum-margin triplet loss on pooled relevance, over negative videos and sentences."""
    if scores.n_videos < 2:
        log.warning("video loss over a single-video batch is 0 (no negatives)")
        return _zero()
    rel = relevance_matrix(scores, sharpness, pooling)
    terms = []
    for j in range(scores.n_sentences):
        v = scores.sent_video[j]
        pos = nc.take2d(rel, [v], [j])
        neg_videos = _video_negatives(scores, j)
        if neg_videos:
            neg = nc.take2d(rel, neg_videos, [j] * len(neg_videos))
            terms.append(nc.sum_all(nc.pairwise_hinge(pos, neg, margin)))
        neg_sents = _sentence_negatives(scores, j)
        if neg_sents:
            neg = nc.take2d(rel, [v] * len(neg_sents), neg_sents)
            terms.append(nc.sum_all(nc.pairwise_hinge(pos, neg, margin)))
    return nc.add_n(terms) if terms else _zero()


def video_loss_max(scores: BatchScores, margin: float, sharpness: float,
                   pooling: str = "log") -> nc.Tensor:
    """Max-margin variant: hinge against the hardest negative video and sentence."""
    if scores.n_videos < 2:
        log.warning("video loss over a single-video batch is 0 (no negatives)")
        return _zero()
    rel = relevance_matrix(scores, sharpness, pooling)
    terms = []
    for j in range(scores.n_sentences):
        v = scores.sent_video[j]
        pos = nc.take2d(rel, [v], [j])
        neg_videos = _video_negatives(scores, j)
        if neg_videos:
            vals = rel.data[neg_videos, j]
            hardest = neg_videos[int(np.argmax(vals))]
            _note_selection_gap(vals)
            neg = nc.take2d(rel, [hardest], [j])
            terms.append(nc.sum_all(nc.pairwise_hinge(pos, neg, margin)))
        neg_sents = _sentence_negatives(scores, j)
        if neg_sents:
            vals = rel.data[v, neg_sents]
            hardest = neg_sents[int(np.argmax(vals))]
            _note_selection_gap(vals)
            neg = nc.take2d(rel, [v], [hardest])
            terms.append(nc.sum_all(nc.pairwise_hinge(pos, neg, margin)))
    return nc.add_n(terms) if terms else _zero()


def weight_norm_sq(weight_params) -> nc.Tensor:
    """Squared Frobenius norm summed over the given weight matrices/kernels."""
    parts = [nc.sum_all(nc.mul(w, w)) for w in weight_params]
    return nc.add_n(parts) if parts else _zero()


def total_loss(intra: nc.Tensor, video: nc.Tensor, reg_norm: nc.Tensor,
               video_weight: float, reg_weight: float,
               skipped_sentences: int = 0) -> tuple[nc.Tensor, LossReport]:
    """total = intra + video_weight * video + reg_weight * reg_norm.

    Returns the combined scalar (on the tape, for backward) plus a plain-float
    report. Raises NumericError on any non-finite component.
    """
    total = nc.add(nc.add(intra, nc.scale(video, video_weight)), nc.scale(reg_norm, reg_weight))
    report = LossReport(
        intra=intra.item(),
        video=video.item(),
        reg=reg_norm.item(),
        total=total.item(),
        skipped_sentences=skipped_sentences,
    )
    for name, value in (("intra", report.intra), ("video", report.video),
                        ("reg", report.reg), ("total", report.total)):
        if not math.isfinite(value):
            raise NumericError(f"{name} loss is not finite: {value}")
    return total, report


def batch_loss(scores: BatchScores, weight_params, variant: str, loss_mode: str,
               margin_intra: float, margin_video: float, video_weight: float,
               reg_weight: float, sharpness: float, pooling: str = "log"
               ) -> tuple[nc.Tensor, LossReport]:
    """Assemble the training objective for one batch.

    ``variant`` picks sum- vs max-margin hinges; ``loss_mode`` keeps both terms
    ("proposed") or drops one ("intra", "video").
    """
    if variant not in ("sum", "max"):
        raise ContractError(f"variant must be 'sum' or 'max', got {variant!r}")
    if loss_mode not in ("proposed", "intra", "video"):
        raise ContractError(f"loss_mode must be proposed|intra|video, got {loss_mode!r}")
    skipped = sum(scores.skipped)
    if loss_mode in ("proposed", "intra"):
        intra = (intra_loss_sum if variant == "sum" else intra_loss_max)(scores, margin_intra)
    else:
        intra = _zero()
    if loss_mode in ("proposed", "video"):
        video_fn = video_loss_sum if variant == "sum" else video_loss_max
        video = video_fn(scores, margin_video, sharpness, pooling)
    else:
        video = _zero()
    reg = weight_norm_sq(weight_params)
    return total_loss(intra, video, reg, video_weight, reg_weight, skipped)
