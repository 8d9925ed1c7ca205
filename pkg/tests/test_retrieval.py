"""Index building, exact top-k search, and the evaluation metrics."""

import numpy as np
import pytest

import momentloc.numcore as nc
from momentloc.errors import ConfigError, ContractError
from momentloc.geometry import MomentSpan, enumerate_candidates, get_profile
from momentloc.model import init_params
from momentloc.retrieval import (
    CorpusIndex,
    EvalSettings,
    GroundTruth,
    RankedMoment,
    RetrievalResult,
    build_index,
    corpus_ground_truths,
    evaluate,
    evaluate_prior,
    full_rankings,
    median_rank,
    moment_frequency_prior,
    query_top_k,
    recall_at_k_iou,
)
from momentloc.synthdata import SyntheticCorpus, SyntheticSpec, generate_corpus
from momentloc.verify import (
    brute_force_median_rank,
    brute_force_recall,
    random_metric_case,
    toy_profile,
)


def tiny_corpus(n_videos, seed=0, profile=None, span_source="grid"):
    profile = profile or toy_profile()
    spec = SyntheticSpec(n_videos=n_videos, sentences_per_video=2,
                         clips_per_video=profile.input_clips, clip_dim=6, sent_dim=6,
                         concept_dim=3, noise_sigma=0.2, span_source=span_source, seed=seed)
    return generate_corpus(spec, profile)


def tiny_params(profile=None, seed=0):
    profile = profile or toy_profile()
    return init_params(seed, profile, 6, 6, 8)


# ---------------------------------------------------------------------------
# index + top-k
# ---------------------------------------------------------------------------


def test_index_row_count_large_corpus():
    profile = get_profile("didemo")
    rng = np.random.default_rng(0)
    from momentloc.synthdata import Video

    vids = [Video(f"v{i:04d}", rng.normal(size=(6, 12)).astype(np.float32), [])
            for i in range(1004)]
    corpus = SyntheticCorpus(vids, profile.unit_seconds, 6, 6, 12)
    params = init_params(0, profile, 6, 6, 8)
    index = build_index(corpus, params, profile)
    assert index.rows == 21 * 1004 == 21084


def test_index_single_video():
    profile = get_profile("didemo")
    spec = SyntheticSpec(n_videos=1, sentences_per_video=1, clips_per_video=12,
                         clip_dim=6, sent_dim=6, concept_dim=3, seed=0)
    corpus = generate_corpus(spec, profile)
    index = build_index(corpus, init_params(0, profile, 6, 6, 8), profile)
    assert index.rows == 21


def test_index_empty_corpus():
    profile = toy_profile()
    corpus = SyntheticCorpus([], profile.unit_seconds, 6, 6, 8)
    with pytest.raises(ContractError):
        build_index(corpus, tiny_params(), profile)


def test_index_threads_match_serial():
    corpus = tiny_corpus(6)
    profile = toy_profile()
    params = tiny_params()
    a = build_index(corpus, params, profile, threads=1)
    b = build_index(corpus, params, profile, threads=3)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert a.video_ids == b.video_ids


def test_query_stored_row_ranks_first():
    corpus = tiny_corpus(5)
    profile = toy_profile()
    index = build_index(corpus, tiny_params(), profile)
    row = 17
    result = query_top_k(index, index.matrix[row], k=3)
    top = result.entries[0]
    assert (top.video_id, top.span) == (index.video_ids[row], index.spans[row])
    assert top.score == pytest.approx(1.0, abs=1e-5)


def test_query_k_of_all_rows_is_permutation():
    corpus = tiny_corpus(3)
    profile = toy_profile()
    index = build_index(corpus, tiny_params(), profile)
    result = query_top_k(index, np.ones(8), k=10_000)
    assert len(result.entries) == index.rows
    assert sorted((e.video_id, e.span.start_unit, e.span.end_unit) for e in result.entries) == \
        sorted((v, s.start_unit, s.end_unit) for v, s in zip(index.video_ids, index.spans))


def python_sort_oracle(index, scores):
    order = sorted(range(index.rows),
                   key=lambda i: (-scores[i], index.video_ids[i], int(index.cand_index[i])))
    return order


def test_query_matches_full_sort_oracle():
    rng = np.random.default_rng(1)
    profile = toy_profile()
    m = enumerate_candidates(profile).count
    for trial in range(100):
        n_videos = int(rng.integers(2, 8))
        matrix = rng.normal(size=(n_videos * m, 5))
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
        video_ids = [f"v{i:03d}" for i in range(n_videos) for _ in range(m)]
        spans = [c.span for _ in range(n_videos) for c in enumerate_candidates(profile).entries]
        rank_of = {v: i for i, v in enumerate(sorted(set(video_ids)))}
        index = CorpusIndex(matrix, video_ids, spans, profile,
                            video_rank=np.array([rank_of[v] for v in video_ids]),
                            cand_index=np.tile(np.arange(m), n_videos))
        q = rng.normal(size=5)
        scores = matrix @ (q / np.linalg.norm(q))
        want = python_sort_oracle(index, scores)
        got = query_top_k(index, q, k=index.rows)
        assert [e.video_id for e in got.entries] == [index.video_ids[i] for i in want]
        assert [e.span for e in got.entries] == [index.spans[i] for i in want]


def test_query_scale_invariance():
    corpus = tiny_corpus(4)
    index = build_index(corpus, tiny_params(), toy_profile())
    q = np.random.default_rng(2).normal(size=8)
    a = query_top_k(index, q, k=20)
    b = query_top_k(index, 37.5 * q, k=20)
    assert [(e.video_id, e.span) for e in a.entries] == [(e.video_id, e.span) for e in b.entries]


def test_query_validates():
    corpus = tiny_corpus(2)
    index = build_index(corpus, tiny_params(), toy_profile())
    with pytest.raises(ContractError):
        query_top_k(index, np.ones(8), k=0)
    with pytest.raises(ConfigError):
        query_top_k(index, np.ones(5), k=1)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def result_of(entries):
    return RetrievalResult(tuple(RankedMoment(v, s, float(-i))
                                 for i, (v, s) in enumerate(entries)))


def span(a, b):
    return MomentSpan(a, b, 1.0)


def test_recall_hit_at_rank_one():
    res = result_of([("v0", span(0, 2)), ("v1", span(0, 2))])
    gt = GroundTruth("q", "v0", (span(0, 2),))
    assert recall_at_k_iou([res], [gt], k=1, iou_m=0.5) == 1.0


def test_recall_right_video_low_iou_misses():
    res = result_of([("v0", span(0, 5))])
    gt = GroundTruth("q", "v0", (span(0, 2),))  # IoU 0.4
    assert recall_at_k_iou([res], [gt], k=1, iou_m=0.5) == 0.0


def test_recall_min_annotations_rule():
    res = result_of([("v0", span(0, 2))])
    gt = GroundTruth("q", "v0", (span(0, 2), span(4, 6)))
    assert recall_at_k_iou([res], [gt], k=1, iou_m=0.5, min_annotations=1) == 1.0
    assert recall_at_k_iou([res], [gt], k=1, iou_m=0.5, min_annotations=2) == 0.0


def test_recall_five_query_case_matches_hand_count():
    entries = [("v0", span(0, 2)), ("v1", span(2, 4)), ("v0", span(2, 4))]
    results = [result_of(entries)] * 5
    gts = [
        GroundTruth("a", "v0", (span(0, 2),)),   # hit at rank 1
        GroundTruth("b", "v1", (span(2, 4),)),   # hit at rank 2
        GroundTruth("c", "v1", (span(0, 2),)),   # wrong span for v1
        GroundTruth("d", "v2", (span(0, 2),)),   # video not present
        GroundTruth("e", "v0", (span(2, 4),)),   # hit at rank 3
    ]
    got = recall_at_k_iou(results, gts, k=3, iou_m=0.5)
    assert got == brute_force_recall(results, gts, 3, 0.5, 1) == 3 / 5


def test_median_rank_basic():
    results = []
    gts = []
    for want_rank in (1, 3, 5):
        entries = [("x", span(4, 5))] * (want_rank - 1) + [("v0", span(0, 2))]
        results.append(result_of(entries))
        gts.append(GroundTruth("q", "v0", (span(0, 2),)))
    assert median_rank(results, gts, iou_m=0.5) == 3.0


def test_median_rank_all_first():
    res = result_of([("v0", span(0, 2))])
    gts = [GroundTruth("q", "v0", (span(0, 2),))] * 4
    assert median_rank([res] * 4, gts, iou_m=0.5) == 1.0


def test_median_rank_unfindable_uses_sentinel():
    res = result_of([("v0", span(0, 2)), ("v0", span(3, 4))])
    gts = [GroundTruth("a", "v0", (span(0, 2),)),
           GroundTruth("b", "v9", (span(0, 2),))]  # never found: rank 3
    got = median_rank([res, res], gts, iou_m=0.5)
    assert got == brute_force_median_rank([res, res], gts, 0.5, 1) == 2.0


def test_metrics_match_brute_force_on_random_corpora():
    rng = np.random.default_rng(7)
    for _ in range(100):
        results, gts = random_metric_case(rng)
        for k in (1, 5, 10, 100):
            for m in (0.5, 0.7):
                for min_ann in (1, 2):
                    assert recall_at_k_iou(results, gts, k, m, min_ann) == \
                        brute_force_recall(results, gts, k, m, min_ann)
        for m in (0.5, 0.7):
            for min_ann in (1, 2):
                assert median_rank(results, gts, m, min_ann) == \
                    brute_force_median_rank(results, gts, m, min_ann)


def test_recall_monotone_in_k_and_iou():
    rng = np.random.default_rng(8)
    results, gts = random_metric_case(rng)
    for m in (0.3, 0.5, 0.7):
        values = [recall_at_k_iou(results, gts, k, m) for k in (1, 3, 10, 50)]
        assert values == sorted(values)
    for k in (1, 10):
        values = [recall_at_k_iou(results, gts, k, m) for m in (0.3, 0.5, 0.7, 0.9)]
        assert values == sorted(values, reverse=True)


# ---------------------------------------------------------------------------
# moment frequency prior
# ---------------------------------------------------------------------------


def test_prior_degenerate_full_video_training_set():
    profile = toy_profile()
    full = MomentSpan(0, profile.base_units, profile.unit_seconds)
    gts = [GroundTruth(f"q{i}", f"v{i}", (full,)) for i in range(5)]
    ranking = moment_frequency_prior(gts, profile, ["a", "b"], seed=0)
    top = ranking.entries[0]
    assert (top.span.start_unit, top.span.end_unit) == (0, profile.base_units)


def test_prior_deterministic_given_seed():
    profile = toy_profile()
    gts = [GroundTruth("q", "v", (MomentSpan(0, 2, profile.unit_seconds),))]
    a = moment_frequency_prior(gts, profile, [f"v{i}" for i in range(6)], seed=4)
    b = moment_frequency_prior(gts, profile, [f"v{i}" for i in range(6)], seed=4)
    assert a == b


def test_prior_scores_non_increasing():
    profile = toy_profile()
    gts = [GroundTruth("q", "v", (MomentSpan(1, 3, profile.unit_seconds),))]
    ranking = moment_frequency_prior(gts, profile, ["a", "b", "c"], seed=1)
    scores = [e.score for e in ranking.entries]
    assert scores == sorted(scores, reverse=True)


def test_prior_uniform_spans_near_uniform_histogram_and_coverage():
    # With uniformly drawn ground-truth spans, the prior's span histogram has
    # no dominant bucket and its R@10 sits near the analytic k-coverage value
    # (top span x 10 of V videos).
    profile = get_profile("didemo")
    spec = SyntheticSpec(n_videos=30, sentences_per_video=3, clips_per_video=12,
                         clip_dim=6, sent_dim=6, concept_dim=3,
                         span_source="uniform", seed=5)
    corpus = generate_corpus(spec, profile)
    _, gts = corpus_ground_truths(corpus)
    candidates = enumerate_candidates(profile)
    counts = np.zeros(candidates.count)
    from momentloc.geometry import iou as span_iou

    for gt in gts:
        for i, c in enumerate(candidates.entries):
            if span_iou(c.span, gt.spans[0]) >= 0.5:
                counts[i] += 1
    assert counts.max() <= 6 * max(counts.mean(), 1e-9)

    report = evaluate_prior(corpus, corpus, profile, EvalSettings(), seed=5)
    ranking = moment_frequency_prior(gts, profile, [v.video_id for v in corpus.videos], seed=5)
    top_span = ranking.entries[0].span
    hit_fraction = np.mean([any(span_iou(top_span, s) >= 0.5 for s in gt.spans) for gt in gts])
    analytic = (10 / 30) * hit_fraction
    got = report.recall["r@10_iou0.5"]
    assert got <= 3 * max(analytic, 1 / len(gts))
    assert analytic <= 3 * max(got, 1 / len(gts))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_perfect_oracle_embeddings():
    # Queries equal to their ground-truth candidate's index row must recall
    # perfectly at both IoU thresholds.
    profile = toy_profile()
    corpus = tiny_corpus(6, seed=3)
    params = tiny_params(seed=3)
    index = build_index(corpus, params, profile)
    candidates = enumerate_candidates(profile)
    span_to_idx = {(c.span.start_unit, c.span.end_unit): i
                   for i, c in enumerate(candidates.entries)}
    m = candidates.count
    queries, gts = [], []
    for vi, video in enumerate(corpus.videos):
        for ann in video.annotations:
            s = ann.spans[0]
            row = vi * m + span_to_idx[(s.start_unit, s.end_unit)]
            queries.append(index.matrix[row])
            gts.append(GroundTruth(ann.sentence_id, video.video_id, tuple(ann.spans)))
    results = full_rankings(index, np.stack(queries))
    assert recall_at_k_iou(results, gts, 10, 0.5) == 1.0
    assert recall_at_k_iou(results, gts, 10, 0.7) == 1.0


def test_evaluate_report_has_all_cells():
    corpus = tiny_corpus(4)
    report = evaluate(tiny_params(), corpus, toy_profile())
    assert set(report.recall) == {"r@10_iou0.5", "r@10_iou0.7", "r@100_iou0.5", "r@100_iou0.7"}
    assert set(report.median_rank) == {"mr_iou0.5", "mr_iou0.7"}
    assert report.query_count == 8
    for v in report.recall.values():
        assert 0.0 <= v <= 1.0


def test_evaluate_untrained_model_near_prior_baseline():
    profile = get_profile("didemo")
    corpus = generate_corpus(SyntheticSpec(seed=0), profile)
    params = init_params(0, profile, 32, 32, 64)
    model_report = evaluate(params, corpus, profile)
    prior_report = evaluate_prior(corpus, corpus, profile, seed=0)
    a = model_report.recall["r@10_iou0.5"]
    b = prior_report.recall["r@10_iou0.5"]
    floor = 1 / model_report.query_count
    assert a <= 3 * max(b, floor)
    assert b <= 3 * max(a, floor)


def test_evaluate_is_repeatable():
    corpus = tiny_corpus(4)
    params = tiny_params()
    a = evaluate(params, corpus, toy_profile())
    b = evaluate(params, corpus, toy_profile())
    assert a.recall == b.recall and a.median_rank == b.median_rank
