"""Self-check suite behind the ``verify`` subcommand.

Covers the load-bearing claims: candidate-grid arithmetic for the shipped
profiles, tape gradients against central finite differences (per-op and
through the full composite loss), the smooth-max relevance bounds, and the
retrieval metrics against naive reference implementations. The reference
implementations here are deliberately plain loops, independent of the
vectorized paths they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import MomentlocError
from .geometry import (
    BranchSpec,
    ConvLayer,
    DatasetProfile,
    MomentSpan,
    enumerate_candidates,
    get_profile,
)
from .objective import relevance
from .retrieval import (
    GroundTruth,
    RankedMoment,
    RetrievalResult,
    median_rank,
    recall_at_k_iou,
)
from .synthdata import SyntheticSpec, generate_corpus
from .training import Hyperparams, loss_for_batch, prepare_training_data
from .model import init_params

KINK_FLOOR = 1e-4  # resample random inputs that sit closer than this to a kink


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def toy_profile() -> DatasetProfile:
    """A small but complete geometry: pooling, a decremental stack, and a branch."""
    return DatasetProfile(
        name="toy",
        input_clips=8,
        clip_seconds=1.0,
        pool_window=2,
        pool_stride=2,
        layers=(ConvLayer(1, 1, 4), ConvLayer(2, 1, 3), ConvLayer(2, 1, 2), ConvLayer(2, 1, 1)),
        used_layers=(0, 1, 2, 3),
        branch=BranchSpec(window_units=2, stride_units=1),
    )


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def check_geometry() -> list[CheckResult]:
    out = []
    expected = {"didemo": 21, "charades": 61, "activitynet": 1023}
    for name, count in expected.items():
        got = enumerate_candidates(get_profile(name)).count
        out.append(CheckResult(
            f"geometry.count.{name}", got == count, f"expected {count}, got {got}"))
    branch = [c for c in enumerate_candidates(get_profile("charades")).entries if c.layer == -1]
    ok = (
        len(branch) == 30
        and all(c.span.end_unit - c.span.start_unit == 3 for c in branch)
        and all(b.span.start_unit - a.span.start_unit == 1 for a, b in zip(branch, branch[1:]))
    )
    out.append(CheckResult("geometry.charades_branch", ok,
                           f"{len(branch)} branch spans; want 30 of 3 units at stride 1"))
    return out


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _tolerances() -> tuple[float, float]:
    """(finite-difference epsilon, max relative error) for the current precision."""
    return (1e-5, 1e-5) if nc.precision() == 64 else (3e-3, 1e-3)


def _op_cases(rng: np.random.Generator):
    """Small random graphs, one per op family, each returning (params, build_loss)."""

    def p(shape, name, lo=-1.0, hi=1.0):
        return nc.Parameter(rng.uniform(lo, hi, size=shape), name)

    x = p((3, 4), "x")
    w = p((4, 2), "w")
    b = p((2,), "b")
    yield "linear", [x, w, b], lambda: nc.sum_all(nc.mul(t := nc.linear(x, w, b), t))

    cx = p((2, 7), "cx")
    ck = p((3, 2, 2), "ck")
    cb = p((3,), "cb")
    yield "conv1d", [cx, ck, cb], lambda: nc.sum_all(nc.mul(t := nc.conv1d(cx, ck, cb, 2), t))

    mx = p((2, 6), "mx")
    yield "maxpool1d", [mx], lambda: nc.sum_all(nc.mul(t := nc.maxpool1d(mx, 2, 2), t))

    rx = p((3, 3), "rx")
    yield "relu", [rx], lambda: nc.sum_all(nc.mul(t := nc.relu(rx), t))

    bx = p((4, 3), "bx")
    bg = p((3,), "bg", 0.5, 1.5)
    bb = p((3,), "bb")
    state = nc.BatchNormState(3)
    yield "batchnorm", [bx, bg, bb], lambda: nc.sum_all(
        nc.mul(t := nc.batchnorm(bx, bg, bb, state, "train", update_stats=False), t))

    ca = p((4, 3), "ca")
    cbm = p((2, 3), "cbm")
    yield "cosine_matrix", [ca, cbm], lambda: nc.sum_all(
        nc.mul(t := nc.cosine_matrix(ca, cbm), t))

    la = p((5, 3), "la")
    yield "logsumexp", [la], lambda: nc.sum_all(
        nc.mul(t := nc.scaled_logsumexp_cols(la, 7.0), t))

    ha = p((3,), "ha")
    hb = p((4,), "hb")
    yield "pairwise_hinge", [ha, hb], lambda: nc.sum_all(nc.pairwise_hinge(ha, hb, 0.1))

    ma = p((4, 2), "ma")
    yield "mean_cols", [ma], lambda: nc.sum_all(nc.mul(t := nc.mean_cols(ma), t))


def check_op_gradients(seed: int = 0) -> list[CheckResult]:
    eps, tol = _tolerances()
    out = []
    rng = np.random.default_rng(seed)
    for name, params, build in _op_cases(rng):
        for attempt in range(8):
            if nc.kink_distance(build) >= KINK_FLOOR:
                break
            jitter = np.random.default_rng([seed, attempt])
            for prm in params:
                prm.value.data += jitter.uniform(-0.01, 0.01, size=prm.shape).astype(nc.dtype())
        err = nc.grad_check(build, params, eps)
        out.append(CheckResult(f"grad.op.{name}", err <= tol, f"max rel err {err:.2e} vs {tol:g}"))
    return out


class ToyLossCase:
    """The full composite loss on a 2-video, 4-sentence batch of a tiny geometry."""

    def __init__(self, seed: int, variant: str, jitter_seed: int = 0):
        self.profile = toy_profile()
        spec = SyntheticSpec(n_videos=2, sentences_per_video=2, clips_per_video=8,
                             clip_dim=4, sent_dim=4, concept_dim=3,
                             noise_sigma=0.3, span_source="grid", seed=seed)
        corpus = generate_corpus(spec, self.profile)
        self.hyper = Hyperparams(batch_size=4, embed_dim=4, hidden_dim=4, variant=variant,
                                 seed=seed, video_loss_weight=2.0, relevance_sharpness=5.0)
        self.data = prepare_training_data(corpus, self.profile, self.hyper.positive_iou)
        self.params = init_params(seed, self.profile, spec.clip_dim, spec.sent_dim, 4, 4)
        # Zero-initialized biases put ReLU pre-activations exactly on their
        # kink; check gradients at a generic point instead.
        jitter = np.random.default_rng([seed, jitter_seed, 17])
        for p in self.params.parameters():
            p.value.data += jitter.uniform(-0.05, 0.05, size=p.shape).astype(nc.dtype())

    def build(self):
        return loss_for_batch(self.data, self.data.pairs, self.params, self.profile,
                              self.hyper, update_stats=False)[0]

    def match_point(self, other: "ToyLossCase") -> None:
        """Move this case to the other's exact parameter/feature values."""
        dt = nc.dtype()
        for mine, theirs in zip(self.params.parameters(), other.params.parameters()):
            mine.value.data = theirs.value.data.astype(dt)
        self.data.features = [f.astype(dt) for f in other.data.features]
        self.data.sent_features = {k: v.astype(dt) for k, v in other.data.sent_features.items()}


def _toy_loss_case(seed: int, variant: str):
    case = ToyLossCase(seed, variant)
    return case.params.parameters(), case.build


def check_full_loss_gradients(seeds=(0, 1, 2), variants=("sum", "max")) -> list[CheckResult]:
    """Tape gradients of the composite loss against a float64 central-difference.

    The reference is computed at 64-bit (epsilon 1e-5) at the exact float32
    point, so it is accurate enough to judge both the 64-bit tolerance (1e-5)
    and the 32-bit one (1e-3): raw float32 differencing of a loss this size
    has more rounding noise than the tolerance being certified.
    """
    entry_precision = nc.precision()
    out = []
    try:
        for variant in variants:
            worst32, worst64 = 0.0, 0.0
            for seed in seeds:
                for attempt in range(40):
                    nc.set_precision(32)
                    case32 = ToyLossCase(seed, variant, jitter_seed=attempt)
                    nc.set_precision(64)
                    case64 = ToyLossCase(seed, variant, jitter_seed=attempt)
                    case64.match_point(case32)
                    if nc.kink_distance(case64.build) >= KINK_FLOOR:
                        break
                plist64 = case64.params.parameters()
                reference = nc.numeric_gradient(case64.build, plist64, epsilon=1e-5)
                g64 = nc.analytic_gradient(case64.build, plist64)
                worst64 = max(worst64, nc.max_relative_error(g64, reference))
                nc.set_precision(32)
                g32 = nc.analytic_gradient(case32.build, case32.params.parameters())
                worst32 = max(worst32, nc.max_relative_error(g32, reference))
            out.append(CheckResult(f"grad.full_loss.{variant}.64bit", worst64 <= 1e-5,
                                   f"max rel err {worst64:.2e} vs 1e-05 over {len(seeds)} seeds"))
            out.append(CheckResult(f"grad.full_loss.{variant}.32bit", worst32 <= 1e-3,
                                   f"max rel err {worst32:.2e} vs 0.001 over {len(seeds)} seeds"))
    finally:
        nc.set_precision(entry_precision)
    return out


# ---------------------------------------------------------------------------
# relevance bounds
# ---------------------------------------------------------------------------


def check_relevance_bounds(cases: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(cases):
        n = int(rng.integers(1, 40))
        sims = rng.uniform(-1.0, 1.0, size=n)
        top = sims.max()
        for sharp in (1.0, 10.0, 100.0):
            r = relevance(sims, sharp)
            if not (top - 1e-12 <= r <= top + math.log(n) / sharp + 1e-12):
                violations += 1
    bounds_ok = violations == 0

    mono_ok = True
    for _ in range(100):
        sims = rng.uniform(-1.0, 1.0, size=int(rng.integers(1, 40)))
        gaps = [relevance(sims, b) - sims.max() for b in (0.5, 1, 2, 5, 10, 30, 100)]
        if any(b > a + 1e-12 for a, b in zip(gaps, gaps[1:])):
            mono_ok = False
    return [
        CheckResult("relevance.bounds", bounds_ok, f"{violations} violations in {cases} cases"),
        CheckResult("relevance.monotone_sharpness", mono_ok,
                    "gap to max must not grow with sharpness"),
    ]


# ---------------------------------------------------------------------------
# metric oracle: naive reference implementations
# ---------------------------------------------------------------------------


def _plain_iou(a: MomentSpan, b: MomentSpan) -> float:
    inter = min(a.end_unit, b.end_unit) - max(a.start_unit, b.start_unit)
    if inter <= 0:
        return 0.0
    return inter / (max(a.end_unit, b.end_unit) - min(a.start_unit, b.start_unit))


def brute_force_recall(results, gts, k, iou_m, min_annotations) -> float:
    hits = 0
    for result, gt in zip(results, gts):
        found = False
        for entry in list(result.entries)[:k]:
            if entry.video_id != gt.video_id:
                continue
            good = 0
            for span in gt.spans:
                if _plain_iou(entry.span, span) >= iou_m:
                    good += 1
            if good >= min_annotations:
                found = True
                break
        if found:
            hits += 1
    return hits / len(results)


def brute_force_median_rank(results, gts, iou_m, min_annotations) -> float:
    ranks = []
    for result, gt in zip(results, gts):
        rank = len(result.entries) + 1
        for at, entry in enumerate(result.entries, start=1):
            if entry.video_id == gt.video_id:
                good = sum(1 for span in gt.spans if _plain_iou(entry.span, span) >= iou_m)
                if good >= min_annotations:
                    rank = at
                    break
        ranks.append(rank)
    ranks.sort()
    n = len(ranks)
    if n % 2:
        return float(ranks[n // 2])
    return (ranks[n // 2 - 1] + ranks[n // 2]) / 2.0


def random_metric_case(rng: np.random.Generator):
    """A random corpus of ranked moments plus ground truths, for oracle comparison."""
    n_videos = int(rng.integers(2, 7))
    t0 = int(rng.integers(3, 8))
    spans = [MomentSpan(s, e, 1.0) for s in range(t0) for e in range(s + 1, t0 + 1)]
    m = min(len(spans), int(rng.integers(3, 9)))
    spans = spans[:m]
    videos = [f"v{i}" for i in range(n_videos)]
    pool = [(vid, sp) for vid in videos for sp in spans]

    n_queries = int(rng.integers(1, 9))
    results, gts = [], []
    for q in range(n_queries):
        order = rng.permutation(len(pool))
        entries = tuple(
            RankedMoment(pool[i][0], pool[i][1], float(len(pool) - at))
            for at, i in enumerate(order)
        )
        results.append(RetrievalResult(entries))
        vid = videos[int(rng.integers(n_videos))]
        n_spans = int(rng.integers(1, 4))
        gt_spans = []
        for _ in range(n_spans):
            s = int(rng.integers(t0))
            e = int(rng.integers(s + 1, t0 + 1))
            gt_spans.append(MomentSpan(s, e, 1.0))
        gts.append(GroundTruth(f"q{q}", vid, tuple(gt_spans)))
    return results, gts


def check_metric_oracle(cases: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    mismatches = []
    for case in range(cases):
        results, gts = random_metric_case(rng)
        for k in (1, 5, 10, 100):
            for m in (0.5, 0.7):
                for min_ann in (1, 2):
                    mine = recall_at_k_iou(results, gts, k, m, min_ann)
                    ref = brute_force_recall(results, gts, k, m, min_ann)
                    if mine != ref:
                        mismatches.append(f"recall case {case} k={k} m={m} min={min_ann}")
        for m in (0.5, 0.7):
            for min_ann in (1, 2):
                mine = median_rank(results, gts, m, min_ann)
                ref = brute_force_median_rank(results, gts, m, min_ann)
                if mine != ref:
                    mismatches.append(f"mr case {case} m={m} min={min_ann}")
    ok = not mismatches
    return [CheckResult("metrics.oracle", ok,
                        f"{len(mismatches)} mismatches in {cases} cases"
                        + (f"; first: {mismatches[0]}" if mismatches else ""))]


def run_all(grad_seeds=(0, 1, 2)) -> list[CheckResult]:
    checks: list[CheckResult] = []
    for fn in (check_geometry,
               check_op_gradients,
               lambda: check_full_loss_gradients(seeds=grad_seeds),
               check_relevance_bounds,
               check_metric_oracle):
        try:
            checks.extend(fn())
        except MomentlocError as exc:
            checks.append(CheckResult(f"exception.{fn.__name__}", False, str(exc)))
    return checks
