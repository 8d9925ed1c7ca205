"""Encoder behavior: shapes, determinism, single-pass structure, span alignment."""

import numpy as np
import pytest

import momentloc.numcore as nc
from momentloc.errors import BatchSizeError, ConfigError
from momentloc.geometry import enumerate_candidates, get_profile
from momentloc.model import encode_moments, encode_sentence, init_params
from momentloc.verify import toy_profile


@pytest.fixture
def didemo():
    return get_profile("didemo")


def make_params(profile, seed=0, clip_dim=8, sent_dim=8, d=16):
    return init_params(seed, profile, clip_dim, sent_dim, d)


def test_init_is_deterministic(didemo):
    a = make_params(didemo, seed=3)
    b = make_params(didemo, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value.data, pb.value.data)


def test_init_biases_zero_and_bn_defaults(didemo):
    params = make_params(didemo)
    for p in params.parameters():
        if p.name.endswith(".b") or p.name in ("sent.b1", "sent.b2", "sent.bn_beta"):
            np.testing.assert_allclose(p.value.data, 0.0)
    np.testing.assert_allclose(params.bn_gamma.value.data, 1.0)
    np.testing.assert_allclose(params.bn_state.running_mean, 0.0)
    np.testing.assert_allclose(params.bn_state.running_var, 1.0)


def test_init_weight_range_is_fan_based(didemo):
    params = make_params(didemo, clip_dim=8, d=16)
    bound = np.sqrt(6.0 / (8 + 16))
    w = params.input_w.value.data
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.5 * bound  # actually spread over the range


def test_forward_smoke_finite(didemo):
    params = make_params(didemo)
    rng = np.random.default_rng(0)
    emb = encode_moments(rng.normal(size=(8, 12)), params, didemo)
    assert emb.shape == (21, 16)
    assert np.all(np.isfinite(emb.data))


def test_zero_input_zero_bias_gives_zero_embeddings(didemo):
    params = make_params(didemo)
    emb = encode_moments(np.zeros((8, 12)), params, didemo)
    np.testing.assert_allclose(emb.data, 0.0)


def test_didemo_embedding_row_count(didemo):
    params = make_params(didemo)
    emb = encode_moments(np.random.default_rng(1).normal(size=(8, 12)), params, didemo)
    assert emb.shape[0] == 21


def test_identical_videos_identical_embeddings(didemo):
    params = make_params(didemo)
    x = np.random.default_rng(2).normal(size=(8, 12))
    a = encode_moments(x, params, didemo)
    b = encode_moments(x.copy(), params, didemo)
    assert np.array_equal(a.data, b.data)


def test_single_pass_conv_count():
    profile = toy_profile()
    params = init_params(0, profile, 5, 5, 8)
    x = np.random.default_rng(0).normal(size=(5, 8))
    with nc.ComputeTape() as tape:
        encode_moments(x, params, profile)
    conv_nodes = [n for n in tape.nodes if n.op == "conv1d"]
    # one evaluation per stack layer plus one for the branch, independent of
    # the candidate count
    assert len(conv_nodes) == len(profile.layers) + 1


def test_rows_align_with_candidate_spans():
    # Bumping the clips inside one base unit must leave every candidate whose
    # span excludes that unit unchanged.
    profile = toy_profile()
    params = init_params(1, profile, 5, 5, 8)
    candidates = enumerate_candidates(profile).entries
    rng = np.random.default_rng(3)
    x = np.abs(rng.normal(size=(5, 8))) + 0.5
    base = encode_moments(x, params, profile).data
    stride = profile.pool_stride
    for unit in range(profile.base_units):
        bumped = x.copy()
        bumped[:, unit * stride : (unit + 1) * stride] += 2.0
        out = encode_moments(bumped, params, profile).data
        for row, cand in enumerate(candidates):
            inside = cand.span.start_unit <= unit < cand.span.end_unit
            if not inside:
                assert np.array_equal(out[row], base[row]), (unit, cand)
        changed = [row for row, cand in enumerate(candidates)
                   if cand.span.start_unit <= unit < cand.span.end_unit
                   and not np.array_equal(out[row], base[row])]
        assert changed, f"no containing row reacted to unit {unit}"


def test_encode_moments_rejects_wrong_dims(didemo):
    params = make_params(didemo)
    with pytest.raises(ConfigError):
        encode_moments(np.zeros((8, 10)), params, didemo)
    with pytest.raises(ConfigError):
        encode_moments(np.zeros((8, 12)), params, get_profile("charades"))


def test_sentence_constant_path(didemo):
    params = make_params(didemo, sent_dim=4, d=4)
    params.sent_w1.value.data[...] = 0.0
    params.bn_beta.value.data[...] = np.array([1.0, 2.0, 3.0, 4.0], dtype=nc.dtype())
    params.sent_w2.value.data[...] = np.eye(4, dtype=nc.dtype())
    params.sent_b2.value.data[...] = 0.5
    out = encode_sentence(np.random.default_rng(0).normal(size=(3, 4)), params, "train")
    np.testing.assert_allclose(out.data, np.array([1.5, 2.5, 3.5, 4.5]) * np.ones((3, 1)),
                               atol=1e-5)


def test_sentence_output_dim(didemo):
    params = make_params(didemo)
    out = encode_sentence(np.zeros((2, 8)), params, "train")
    assert out.shape == (2, 16)


def test_sentence_infer_rows_independent(didemo):
    params = make_params(didemo)
    params.bn_state.running_mean[:] = 0.3
    params.bn_state.running_var[:] = 1.7
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 8))
    batched = encode_sentence(x, params, "infer").data
    rows = np.concatenate([encode_sentence(x[i : i + 1], params, "infer").data
                           for i in range(5)])
    np.testing.assert_allclose(batched, rows, atol=1e-6)


def test_sentence_train_requires_batch(didemo):
    params = make_params(didemo)
    with pytest.raises(BatchSizeError):
        encode_sentence(np.zeros((1, 8)), params, "train")
    encode_sentence(np.zeros((1, 8)), params, "infer")  # fine


def test_encoding_is_stateless_across_other_videos(didemo):
    params = make_params(didemo)
    rng = np.random.default_rng(5)
    videos = [rng.normal(size=(8, 12)) for _ in range(3)]
    solo = [encode_moments(v, params, didemo).data for v in videos]
    for order in ([2, 0, 1], [1, 2, 0]):
        again = {i: encode_moments(videos[i], params, didemo).data for i in order}
        for i in order:
            assert np.array_equal(again[i], solo[i])
