"""Scikit-learn style facade over the training and retrieval pipeline.

``MomentRetriever.fit`` trains the joint embedding on an annotated corpus and
indexes it; ``transform`` embeds sentence features, ``query``/``predict``
search the indexed corpus. Hyperparameters are plain constructor arguments so
``get_params``/``set_params``/``clone`` compose with the wider ecosystem.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import encode_sentence
from .retrieval import (
    RetrievalResult,
    build_index,
    full_rankings,
    query_top_k,
    recall_at_k_iou,
)
from .training import Hyperparams, fit as train_fit
from .validation import as_sentence_matrix, check_corpus, resolve_profile


class MomentRetriever(BaseEstimator):
    """Localize text queries in a corpus of videos via a joint embedding space."""

    def __init__(self, profile="didemo", embed_dim=64, hidden_dim=0, variant="sum",
                 loss_mode="proposed", pooling="log", batch_size=64, learning_rate=1e-3,
                 lr_decay=0.95, epochs=30, margin_intra=0.05, margin_video=0.20,
                 video_loss_weight=5.0, reg_weight=5e-5, relevance_sharpness=10.0,
                 positive_iou=0.5, grad_clip=0.0, seed=0, threads=1):
        self.profile = profile
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.variant = variant
        self.loss_mode = loss_mode
        self.pooling = pooling
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.epochs = epochs
        self.margin_intra = margin_intra
        self.margin_video = margin_video
        self.video_loss_weight = video_loss_weight
        self.reg_weight = reg_weight
        self.relevance_sharpness = relevance_sharpness
        self.positive_iou = positive_iou
        self.grad_clip = grad_clip
        self.seed = seed
        self.threads = threads

    def _hyper(self) -> Hyperparams:
        return Hyperparams(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            epochs=self.epochs,
            margin_intra=self.margin_intra,
            margin_video=self.margin_video,
            video_loss_weight=self.video_loss_weight,
            reg_weight=self.reg_weight,
            relevance_sharpness=self.relevance_sharpness,
            positive_iou=self.positive_iou,
            variant=self.variant,
            loss_mode=self.loss_mode,
            pooling=self.pooling,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            grad_clip=self.grad_clip,
            seed=self.seed,
        )

    def fit(self, corpus, y=None):
        """Train on every annotation of ``corpus`` and index the same corpus."""
        profile = resolve_profile(self.profile)
        corpus = check_corpus(corpus, profile)
        self.profile_ = profile
        self.checkpoint_, self.loss_log_ = train_fit(corpus, profile, self._hyper())
        self.index_corpus(corpus)
        return self

    def index_corpus(self, corpus):
        """Point retrieval at a (possibly different) corpus; returns self."""
        check_is_fitted(self, "checkpoint_")
        corpus = check_corpus(corpus, self.profile_)
        self.index_ = build_index(corpus, self.checkpoint_.params, self.profile_,
                                  threads=self.threads)
        return self

    def transform(self, X):
        """Embed sentence features [n, sent_dim] into the joint space [n, embed_dim]."""
        check_is_fitted(self, "checkpoint_")
        X = as_sentence_matrix(X, self.checkpoint_.params.sent_dim)
        return encode_sentence(X, self.checkpoint_.params, mode="infer").data.copy()

    def query(self, X, k: int = 10) -> list[RetrievalResult]:
        """Top-k (video, span, score) lists for each query row."""
        check_is_fitted(self, "index_")
        embeddings = self.transform(X)
        return [query_top_k(self.index_, e, k) for e in embeddings]

    def predict(self, X):
        """Best (video_id, start_seconds, end_seconds) per query row."""
        results = self.query(X, k=1)
        return [
            (r.entries[0].video_id, r.entries[0].span.start_seconds, r.entries[0].span.end_seconds)
            for r in results
        ]

    def score(self, X, y, k: int = 10, iou_threshold: float = 0.5) -> float:
        """R@k at the IoU threshold against ground truths ``y`` (higher is better)."""
        check_is_fitted(self, "index_")
        embeddings = self.transform(X)
        results = full_rankings(self.index_, embeddings)
        return recall_at_k_iou(results, list(y), k, iou_threshold)
