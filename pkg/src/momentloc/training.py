"""Mini-batch training loop: Adam, exponential learning-rate decay, checkpoints.

One training step owns one tape: encode the batch's unique videos and its
sentences, score them, assemble the configured objective, backpropagate, and
apply Adam. The checkpoint container ("HMC1") stores a JSON metadata document
followed by named little-endian float32 blobs; byte layout in README.md.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError, FormatError, NumericError
from .geometry import (
    DatasetProfile,
    enumerate_candidates,
    fit_length,
    iou,
    profile_from_config,
    profile_to_config,
)
from .model import ModelParams, encode_moments, encode_sentence, init_params
from .objective import BatchScores, LossReport, batch_loss, score_batch
from .synthdata import SyntheticCorpus

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HMC1"
FALLBACK_IOU = 0.5  # a no-positive sentence falls back to its best candidate at this IoU


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    epochs: int = 30
    margin_intra: float = 0.05
    margin_video: float = 0.20
    video_loss_weight: float = 5.0
    reg_weight: float = 5e-5
    relevance_sharpness: float = 10.0
    positive_iou: float = 0.5
    variant: str = "sum"  # sum | max margin
    loss_mode: str = "proposed"  # proposed | intra | video
    pooling: str = "log"  # log | ave relevance pooling
    embed_dim: int = 64
    hidden_dim: int = 0  # 0 -> embed_dim
    grad_clip: float = 0.0  # 0 -> no clipping
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.embed_dim < 1:
            raise ContractError("batch_size/epochs/embed_dim out of range")
        for name in ("learning_rate", "lr_decay", "relevance_sharpness"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be > 0")
        for name in ("margin_intra", "margin_video", "video_loss_weight",
                     "reg_weight", "grad_clip"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0.0 < self.positive_iou <= 1.0:
            raise ContractError("positive_iou must be in (0, 1]")
        if self.variant not in ("sum", "max"):
            raise ContractError(f"variant must be 'sum' or 'max', got {self.variant!r}")
        if self.loss_mode not in ("proposed", "intra", "video"):
            raise ContractError(f"bad loss_mode {self.loss_mode!r}")
        if self.pooling not in ("log", "ave"):
            raise ContractError(f"pooling must be 'log' or 'ave', got {self.pooling!r}")


def lr_at(epoch: int, lr0: float, decay: float) -> float:
    return lr0 * decay**epoch


class AdamState:
    """First/second moment accumulators per parameter, plus the step counter."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[nc.Parameter]):
        self.m = {p.name: np.zeros_like(p.value.data) for p in params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in params}
        self.t = 0

    def copy(self) -> "AdamState":
        out = AdamState([])
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.t = self.t
        return out


def adam_step(params: list[nc.Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from each parameter's accumulated grad.

    Rejects the whole step (state untouched) if any gradient is non-finite.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name}; step rejected")
    state.t += 1
    b1, b2 = AdamState.BETA1, AdamState.BETA2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p in params:
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = b1 * m + (1.0 - b1) * p.grad
        v[...] = b2 * v + (1.0 - b2) * (p.grad * p.grad)
        p.value.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + AdamState.EPS)


def clip_gradients(params: list[nc.Parameter], max_norm: float) -> None:
    total = float(sum(float((p.grad * p.grad).sum()) for p in params))
    norm = total**0.5
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor


def make_minibatches(pairs, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Seeded per-epoch permutation of all pairs, chunked to batch_size.

    The final short chunk is kept, except that a trailing single pair is merged
    into the previous chunk (batch norm needs two sentences per batch).
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("cannot build minibatches from an empty corpus")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pairs))
    batches = [[pairs[i] for i in order[at : at + batch_size]]
               for at in range(0, len(pairs), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


# ---------------------------------------------------------------------------
# training data preparation
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Per-video features and per-sentence positives, resolved once per corpus."""

    features: list[np.ndarray]  # per video, [clip_dim, input_clips]
    sent_features: dict[tuple[int, int], np.ndarray]
    positives: dict[tuple[int, int], list[int]]
    skipped: dict[tuple[int, int], bool]
    pairs: list[tuple[int, int]]


def prepare_training_data(corpus: SyntheticCorpus, profile: DatasetProfile,
                          positive_iou: float) -> TrainingData:
    if not corpus.videos:
        raise ContractError("corpus has no videos")
    candidates = enumerate_candidates(profile)
    spans = candidates.spans()
    features = [fit_length(np.asarray(v.clips, dtype=nc.dtype()), profile.input_clips)
                for v in corpus.videos]
    sent_features, positives, skipped = {}, {}, {}
    for vi, video in enumerate(corpus.videos):
        for ai, ann in enumerate(video.annotations):
            key = (vi, ai)
            sent_features[key] = np.asarray(ann.feature, dtype=nc.dtype())
            best = [max(iou(c, gt) for gt in ann.spans) for c in spans]
            pos = [i for i, b in enumerate(best) if b >= positive_iou]
            skip = False
            if not pos:
                top = int(np.argmax(best))
                if best[top] >= FALLBACK_IOU:
                    pos = [top]
                else:
                    skip = True
                    log.warning("no positive candidate for %s (best IoU %.3f); skipped",
                                ann.sentence_id, best[top])
            positives[key] = pos
            skipped[key] = skip
    return TrainingData(features, sent_features, positives, skipped, corpus.annotation_pairs())


def batch_scores_for(data: TrainingData, batch, params: ModelParams,
                     profile: DatasetProfile, mode: str = "train",
                     update_stats: bool = True) -> BatchScores:
    """Forward pass for one batch of (video, annotation) pairs."""
    video_order: list[int] = []
    video_slot: dict[int, int] = {}
    for vi, _ in batch:
        if vi not in video_slot:
            video_slot[vi] = len(video_order)
            video_order.append(vi)
    moment_embs = [encode_moments(data.features[vi], params, profile) for vi in video_order]
    sent_matrix = np.stack([data.sent_features[pair] for pair in batch])
    sent_embs = encode_sentence(sent_matrix, params, mode, update_stats=update_stats)
    return score_batch(
        moment_embs,
        sent_embs,
        sent_video=[video_slot[vi] for vi, _ in batch],
        positives=[data.positives[pair] for pair in batch],
        skipped=[data.skipped[pair] for pair in batch],
    )


def loss_for_batch(data: TrainingData, batch, params: ModelParams,
                   profile: DatasetProfile, hyper: Hyperparams,
                   update_stats: bool = True) -> tuple[nc.Tensor, LossReport]:
    scores = batch_scores_for(data, batch, params, profile, update_stats=update_stats)
    return batch_loss(
        scores,
        params.weight_parameters(),
        variant=hyper.variant,
        loss_mode=hyper.loss_mode,
        margin_intra=hyper.margin_intra,
        margin_video=hyper.margin_video,
        video_weight=hyper.video_loss_weight,
        reg_weight=hyper.reg_weight,
        sharpness=hyper.relevance_sharpness,
        pooling=hyper.pooling,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    opt: AdamState
    hyper: Hyperparams
    epoch: int
    profile: DatasetProfile
    metrics: dict = field(default_factory=dict)


def clone_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        profile_name=params.profile_name,
        clip_dim=params.clip_dim,
        sent_dim=params.sent_dim,
        embed_dim=params.embed_dim,
        hidden_dim=params.hidden_dim,
        input_w=_clone_param(params.input_w),
        input_b=_clone_param(params.input_b),
        conv_w=[_clone_param(p) for p in params.conv_w],
        conv_b=[_clone_param(p) for p in params.conv_b],
        branch_w=_clone_param(params.branch_w) if params.branch_w else None,
        branch_b=_clone_param(params.branch_b) if params.branch_b else None,
        sent_w1=_clone_param(params.sent_w1),
        sent_b1=_clone_param(params.sent_b1),
        bn_gamma=_clone_param(params.bn_gamma),
        bn_beta=_clone_param(params.bn_beta),
        sent_w2=_clone_param(params.sent_w2),
        sent_b2=_clone_param(params.sent_b2),
        bn_state=params.bn_state.copy(),
    )


def _clone_param(p: nc.Parameter) -> nc.Parameter:
    return nc.Parameter(p.value.data.copy(), p.name)


def _write_blob(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", array.ndim))
    for extent in array.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def save_checkpoint(path, ck: Checkpoint) -> None:
    meta = {
        "format": 1,
        "hyper": asdict(ck.hyper),
        "epoch": ck.epoch,
        "adam_t": ck.opt.t,
        "dims": {
            "clip_dim": ck.params.clip_dim,
            "sent_dim": ck.params.sent_dim,
            "embed_dim": ck.params.embed_dim,
            "hidden_dim": ck.params.hidden_dim,
        },
        "profile": profile_to_config(ck.profile),
        "metrics": ck.metrics,
    }
    encoded = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        for p in ck.params.parameters():
            _write_blob(fh, f"param.{p.name}", p.value.data)
        _write_blob(fh, "state.bn_mean", ck.params.bn_state.running_mean)
        _write_blob(fh, "state.bn_var", ck.params.bn_state.running_var)
        for p in ck.params.parameters():
            _write_blob(fh, f"opt.m.{p.name}", ck.opt.m[p.name])
            _write_blob(fh, f"opt.v.{p.name}", ck.opt.v[p.name])


def _read_blobs(blob: bytes, offset: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    n = len(blob)
    while offset < n:
        if offset + 4 > n:
            raise FormatError(f"truncated blob header at offset {offset}")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + name_len > n:
            raise FormatError(f"truncated blob name at offset {offset}")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 4 > n:
            raise FormatError(f"truncated blob rank at offset {offset}")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 8 * rank > n:
            raise FormatError(f"truncated blob extents at offset {offset}")
        shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if offset + nbytes > n:
            raise FormatError(f"truncated blob data for {name!r} at offset {offset}")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[name] = data.copy()
        offset += nbytes
    return out


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated metadata length at offset 4")
    (mlen,) = struct.unpack_from("<I", blob, 4)
    if 8 + mlen > len(blob):
        raise FormatError(f"truncated metadata at offset 8 (need {mlen} bytes)")
    try:
        meta = json.loads(blob[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata at offset 8: {exc}") from exc

    hyper = Hyperparams(**meta["hyper"])
    profile = profile_from_config(meta["profile"])
    dims = meta["dims"]
    params = init_params(0, profile, dims["clip_dim"], dims["sent_dim"],
                         dims["embed_dim"], dims["hidden_dim"])
    blobs = _read_blobs(blob, 8 + mlen)
    for p in params.parameters():
        key = f"param.{p.name}"
        if key not in blobs:
            raise FormatError(f"checkpoint is missing blob {key!r}")
        if blobs[key].shape != p.value.data.shape:
            raise FormatError(f"blob {key!r} has shape {blobs[key].shape}, "
                              f"expected {p.value.data.shape}")
        p.value.data = blobs[key].astype(nc.dtype())
        p.grad = np.zeros_like(p.value.data)
    params.bn_state.running_mean = blobs["state.bn_mean"].astype(nc.dtype())
    params.bn_state.running_var = blobs["state.bn_var"].astype(nc.dtype())
    opt = AdamState(params.parameters())
    opt.t = int(meta["adam_t"])
    for p in params.parameters():
        opt.m[p.name] = blobs[f"opt.m.{p.name}"].astype(nc.dtype())
        opt.v[p.name] = blobs[f"opt.v.{p.name}"].astype(nc.dtype())
    return Checkpoint(params, opt, hyper, int(meta["epoch"]), profile,
                      metrics=meta.get("metrics", {}))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def snapshot_loss(params: ModelParams, corpus: SyntheticCorpus, profile: DatasetProfile,
                  hyper: Hyperparams) -> float:
    """Deterministic full-pass training loss at a fixed post-training batch layout.

    Uses the epoch index ``hyper.epochs`` for the batch permutation and leaves
    the batch-norm running statistics untouched, so the value can be recomputed
    exactly from a loaded checkpoint.
    """
    data = prepare_training_data(corpus, profile, hyper.positive_iou)
    total = 0.0
    for batch in make_minibatches(data.pairs, hyper.batch_size, hyper.seed, hyper.epochs):
        _, report = loss_for_batch(data, batch, params, profile, hyper, update_stats=False)
        total += report.total
    return total


def fit(corpus: SyntheticCorpus, profile: DatasetProfile, hyper: Hyperparams
        ) -> tuple[Checkpoint, list[LossReport]]:
    """Train a fresh model on every annotation pair of ``corpus``.

    Returns the final checkpoint plus one averaged LossReport per epoch. A
    numeric failure aborts training and returns the last epoch's checkpoint.
    """
    data = prepare_training_data(corpus, profile, hyper.positive_iou)
    params = init_params(hyper.seed, profile, corpus.clip_dim, corpus.sent_dim,
                         hyper.embed_dim, hyper.hidden_dim or None)
    plist = params.parameters()
    opt = AdamState(plist)
    good_params, good_opt, good_epoch = clone_params(params), opt.copy(), 0

    reports: list[LossReport] = []
    aborted = False
    for epoch in range(hyper.epochs):
        lr = lr_at(epoch, hyper.learning_rate, hyper.lr_decay)
        epoch_reports: list[LossReport] = []
        try:
            for batch in make_minibatches(data.pairs, hyper.batch_size, hyper.seed, epoch):
                params.zero_grad()
                with nc.ComputeTape() as tape:
                    total, report = loss_for_batch(data, batch, params, profile, hyper)
                nc.backward(tape, total)
                if hyper.grad_clip > 0:
                    clip_gradients(plist, hyper.grad_clip)
                adam_step(plist, opt, lr)
                epoch_reports.append(report)
        except NumericError as exc:
            log.error("numeric failure in epoch %d: %s; keeping last good checkpoint", epoch, exc)
            aborted = True
            break
        reports.append(_mean_report(epoch_reports))
        good_params, good_opt, good_epoch = clone_params(params), opt.copy(), epoch + 1

    if aborted:
        params, opt = good_params, good_opt
    final_epoch = good_epoch if aborted else hyper.epochs
    try:
        final_loss = snapshot_loss(params, corpus, profile, hyper)
    except NumericError as exc:
        log.error("snapshot loss failed: %s", exc)
        final_loss = None
    metrics = {
        "final_loss": final_loss,
        "variant": hyper.variant,
        "loss_mode": hyper.loss_mode,
        "aborted": aborted,
    }
    return Checkpoint(params, opt, hyper, final_epoch, profile, metrics), reports


def _mean_report(reports: list[LossReport]) -> LossReport:
    n = max(len(reports), 1)
    return LossReport(
        intra=sum(r.intra for r in reports) / n,
        video=sum(r.video for r in reports) / n,
        reg=sum(r.reg for r in reports) / n,
        total=sum(r.total for r in reports) / n,
        skipped_sentences=sum(r.skipped_sentences for r in reports),
    )
