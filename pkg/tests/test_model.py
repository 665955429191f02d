import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import naive_alpha, naive_score
from rcf import autodiff as ad
from rcf.corpus import corpus_from_arrays
from rcf.gradcheck import random_fixture
from rcf.model import (ConfigError, RcfConfig, build_layout, first_level_score, first_level_weights, forward,
                       predict, rec_loss, reference_entries, score_pairs, second_level_score,
                       second_level_weights, type_attention, type_profile, user_embedding)
from rcf.params import ParamStore, init_params

MODES = ["full", "single", "typeOnly", "valueOnly"]


def cfg(mode="full", override="none", **kw):
    kw.setdefault("d", 8)
    kw.setdefault("f", 4)
    kw.setdefault("mlp_hidden", 8)
    return RcfConfig(mode=mode, attn_override=override, **kw)


# --------------------------------------------------------------------------- scalar pieces

def test_first_level_score_examples():
    rng = np.random.default_rng(0)
    W1, b1, h1 = rng.normal(size=(2, 4)), rng.normal(size=2), rng.normal(size=2)
    assert first_level_score(np.zeros(4), rng.normal(size=4), W1, b1, h1) == pytest.approx(h1 @ np.maximum(b1, 0))
    assert first_level_score(rng.normal(size=4), rng.normal(size=4), W1, b1, np.zeros(2)) == 0.0
    p, x = rng.normal(size=4), rng.normal(size=4)
    hand = sum(h1[r] * max(0.0, sum(W1[r, c] * p[c] * x[c] for c in range(4)) + b1[r]) for r in range(2))
    assert first_level_score(p, x, W1, b1, h1) == pytest.approx(hand, abs=1e-12)


def test_first_level_weights_examples():
    np.testing.assert_array_equal(first_level_weights([3.7]), [1.0])
    np.testing.assert_allclose(first_level_weights([0.0, math.log(3)]), [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(first_level_weights([2.0] * 4), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(first_level_weights([1000.0, 0.0]), [1.0, 0.0], atol=1e-15)


def test_second_level_score_examples():
    rng = np.random.default_rng(1)
    f, d = 3, 4
    b2, h2 = rng.normal(size=f), rng.normal(size=f)
    zero = np.zeros(d)
    assert second_level_score(zero, zero, zero, rng.normal(size=(f, 3 * d)), b2, h2) == pytest.approx(
        h2 @ np.maximum(b2, 0))
    assert second_level_score(*rng.normal(size=(3, d)), np.zeros((f, 3 * d)), np.ones(f), np.ones(f)) == f
    qi, qj, zv = rng.normal(size=(3, d))
    W = rng.normal(size=(f, 3 * d))
    x = list(qi) + list(qj) + list(zv)
    hand = sum(h2[r] * max(0.0, sum(W[r, c] * x[c] for c in range(3 * d)) + b2[r]) for r in range(f))
    assert second_level_score(qi, qj, zv, W, b2, h2) == pytest.approx(hand, abs=1e-12)


def test_smoothed_softmax_examples():
    np.testing.assert_array_equal(second_level_weights([0.0], 0.5), [1.0])
    np.testing.assert_allclose(second_level_weights([0.0, 0.0], 1.0), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(second_level_weights([0.0, 0.0], 0.5), [2 ** -0.5] * 2, rtol=0, atol=1e-12)
    assert len(second_level_weights([], 0.5)) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_smoothed_softmax_rho_one_is_softmax(scores):
    s = np.array(scores)
    ref = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(second_level_weights(s, 1.0), ref, rtol=0, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(0.05, 1.0))
def test_smoothed_softmax_log_domain_matches_naive(scores, rho):
    s = np.array(scores)
    naive = np.exp(s) / np.exp(s).sum() ** rho
    np.testing.assert_allclose(second_level_weights(s, rho), naive, rtol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.data(), st.floats(0.1, 1.0))
def test_smoothed_softmax_monotone(scores, data, rho):
    s = np.array(scores)
    k = data.draw(st.integers(0, len(s) - 1))
    bumped = s.copy()
    bumped[k] += 0.5
    before, after = second_level_weights(s, rho), second_level_weights(bumped, rho)
    assert after[k] > before[k]
    others = np.arange(len(s)) != k
    if rho == 0:
        return
    assert (after[others] < before[others]).all()


def test_engine_smoothed_softmax_segments():
    seg = np.array([0, 0, 1, 2, 2, 2])
    s = np.array([0.0, 0.0, 1.3, -0.4, 0.2, 2.0])
    out = ad.smoothed_softmax(ad.const(s), seg, 3, 0.5).value
    np.testing.assert_allclose(out[:2], [2 ** -0.5] * 2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out[2:3], second_level_weights(s[2:3], 0.5), atol=1e-15)
    np.testing.assert_allclose(out[3:], second_level_weights(s[3:], 0.5), atol=1e-15)
    soft = ad.smoothed_softmax(ad.const(s), seg, 3, 1.0).value
    np.testing.assert_allclose(soft[3:], np.exp(s[3:]) / np.exp(s[3:]).sum(), rtol=0, atol=1e-10)


def test_type_profile_examples():
    q = np.random.default_rng(2).normal(size=4)
    np.testing.assert_array_equal(type_profile(np.zeros((0, 4)), []), np.zeros(4))
    np.testing.assert_array_equal(type_profile([q], [1.0]), q)
    np.testing.assert_allclose(type_profile([q, q], [2 ** -0.5] * 2), math.sqrt(2) * q, atol=1e-12)


# --------------------------------------------------------------------------- forward vs naive oracle

def test_forward_matches_naive_oracle_100_pairs():
    worst = 0.0
    for k in range(100):
        corpus, store = random_fixture(seed=k)
        rng = np.random.default_rng(1000 + k)
        u, i = int(rng.integers(corpus.n_users)), int(rng.integers(corpus.n_items))
        got = score_pairs(store, corpus, [u], [i], cfg())[0]
        ref = naive_score(store.tensors, corpus, u, i)
        worst = max(worst, abs(got - ref))
    assert worst < 1e-10


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("override", ["none", "avg1", "avg2", "avgBoth"])
def test_modes_match_naive_oracle(mode, override):
    if mode in ("single", "valueOnly") and override in ("avg1", "avgBoth"):
        with pytest.raises(ConfigError):
            cfg(mode, override)
        return
    config = cfg(mode, override)
    for k in range(10):
        corpus, store = random_fixture(seed=200 + k)
        users = np.repeat(np.arange(corpus.n_users), corpus.n_items)
        items = np.tile(np.arange(corpus.n_items), corpus.n_users)
        got = score_pairs(store, corpus, users, items, config)
        ref = [naive_score(store.tensors, corpus, u, i, mode, override) for u, i in zip(users, items)]
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("mode", MODES)
def test_vectorized_layout_matches_reference(mode):
    config = cfg(mode)
    for k in range(5):
        corpus, _ = random_fixture(seed=300 + k)
        users = np.repeat(np.arange(corpus.n_users), corpus.n_items)
        items = np.tile(np.arange(corpus.n_items), corpus.n_users)
        lay = build_layout(corpus, users, items, config)
        got = sorted(zip(lay.row.tolist(), lay.slot.tolist(), lay.net.tolist(), lay.item.tolist(),
                         lay.value.tolist()))
        ref = sorted((r, s, n, j, v) for r, (u, i) in enumerate(zip(users, items))
                     for s, n, j, v in reference_entries(corpus, int(u), int(i), mode))
        assert got == ref


def test_permutation_invariance():
    corpus, store = random_fixture(seed=7)
    base = score_pairs(store, corpus, np.arange(4), np.arange(4), cfg())
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = rng.permutation(len(corpus.relations.triplets))
        trip = corpus.relations.triplets[perm]
        train = [rng.permutation(t) for t in corpus.interactions.train]
        shuffled = corpus_from_arrays(corpus.n_users, corpus.n_items, train, corpus.interactions.valid,
                                      corpus.interactions.test, trip.tolist(),
                                      type_labels=corpus.relations.types.labels,
                                      value_labels=corpus.relations.values.labels)
        again = score_pairs(store, shuffled, np.arange(4), np.arange(4), cfg())
        np.testing.assert_allclose(again, base, rtol=0, atol=1e-10)


# --------------------------------------------------------------------------- attention properties

def test_alpha_is_probability_and_user_only():
    corpus, store = random_fixture(seed=3)
    for u in range(corpus.n_users):
        alphas = [predict(u, i, store, corpus, cfg()).first_level for i in range(corpus.n_items)]
        for a in alphas:
            assert abs(a.sum() - 1) < 1e-6 and (a >= 0).all()
            np.testing.assert_allclose(a, naive_alpha(store.tensors, u), atol=1e-12)
    np.testing.assert_allclose(type_attention(store, np.arange(corpus.n_users), cfg()),
                               [naive_alpha(store.tensors, u) for u in range(corpus.n_users)], atol=1e-12)


def test_avg_both_uniform_weights():
    corpus, store = random_fixture(seed=4)
    n_types = corpus.relations.n_types
    for u in range(corpus.n_users):
        for i in range(corpus.n_items):
            pred = predict(u, i, store, corpus, cfg(override="avgBoth"))
            assert (pred.first_level == 1.0 / n_types).all()
            by_slot = {}
            for slot, _, _, beta in pred.second_level:
                by_slot.setdefault(slot, []).append(beta)
            for betas in by_slot.values():
                assert all(b == 1.0 / len(betas) for b in betas)


def test_beta_nonnegative_and_unnormalized():
    corpus, store = random_fixture(seed=5)
    lay = build_layout(corpus, np.arange(4), np.arange(4), cfg())
    fw = forward(store, lay, cfg())
    assert (fw.beta >= 0).all()
    sums = np.bincount(lay.seg, weights=fw.beta)
    counts = np.bincount(lay.seg)
    assert np.any(np.abs(sums[counts > 1] - 1) > 1e-3)


def test_single_equals_full_on_latent_only_corpus():
    corpus, store = random_fixture(seed=6)
    bare = corpus.with_relations(type(corpus.relations).empty(corpus.n_items))
    small = init_params(corpus.n_users, corpus.n_items, 1, 1, 8, 4, 8, seed=1, dtype=np.float64)
    users = np.repeat(np.arange(bare.n_users), bare.n_items)
    items = np.tile(np.arange(bare.n_items), bare.n_users)
    full = score_pairs(small, bare, users, items, cfg("full"))
    single = score_pairs(small, bare, users, items, cfg("single"))
    np.testing.assert_allclose(full, single, rtol=0, atol=1e-12)


# --------------------------------------------------------------------------- user embedding / predict

def test_user_embedding_examples():
    c = corpus_from_arrays(2, 3, [[0], [1]], [1, 2], [2, 0])
    s = init_params(2, 3, 1, 1, 4, 2, 4, seed=0, dtype=np.float64)
    # empty history after self-exclusion
    np.testing.assert_allclose(user_embedding(0, 0, s, c, cfg(d=4, f=2)), s["P"][0])
    # one type, one entry: alpha = 1 and beta = exp(b - 0.5 b) differs from 1 unless b = 0
    s["h2"] = np.zeros_like(s["h2"])
    np.testing.assert_allclose(user_embedding(0, 2, s, c, cfg(d=4, f=2)), s["P"][0] + s["Q"][0], atol=1e-15)


def test_zero_params_score_zero():
    corpus, store = random_fixture(seed=8)
    zero = ParamStore({k: np.zeros_like(v) for k, v in store.tensors.items()}, np.float64)
    np.testing.assert_array_equal(score_pairs(zero, corpus, [0, 1], [2, 3], cfg()), 0)


def test_eval_deterministic_and_dropout_zero_equals_eval():
    corpus, store = random_fixture(seed=9)
    a = predict(1, 2, store, corpus, cfg()).score
    b = predict(1, 2, store, corpus, cfg()).score
    assert a == b
    c = predict(1, 2, store, corpus, cfg(dropout=0.0), training=True, rng=np.random.default_rng(0)).score
    assert c == predict(1, 2, store, corpus, cfg(dropout=0.0)).score


def test_dropout_is_inverted_and_active_in_training():
    from rcf.model import _dropout
    out = _dropout(ad.const(np.ones(20_000)), 0.2, np.random.default_rng(0)).value
    assert set(np.unique(out).tolist()) == {0.0, 1.25}
    assert abs(out.mean() - 1.0) < 0.02
    corpus, store = random_fixture(seed=10)
    config = cfg(dropout=0.5)
    lay = build_layout(corpus, np.zeros(50, int), np.full(50, 3), config)
    train = forward(store, lay, config, training=True, rng=np.random.default_rng(0)).scores.value
    assert np.std(train) > 0
    assert np.ptp(forward(store, lay, config).scores.value) < 1e-12


# --------------------------------------------------------------------------- rec loss

def test_rec_loss_equal_scores_is_ln2():
    corpus, store = random_fixture(seed=11)
    zero = ParamStore({k: np.zeros_like(v) for k, v in store.tensors.items()}, np.float64)
    batch = np.array([[0, 1, 2], [1, 3, 4]])
    assert rec_loss(zero, corpus, batch, cfg(), training=False).value == pytest.approx(math.log(2), abs=1e-15)


def test_rec_loss_hand_mean_three_pairs():
    corpus, store = random_fixture(seed=12)
    batch = np.array([[0, 1, 2], [1, 3, 4], [2, 5, 6]])
    y = lambda u, i: naive_score(store.tensors, corpus, u, i)  # noqa: E731
    hand = np.mean([-math.log(1 / (1 + math.exp(-(y(u, i) - y(u, k))))) for u, i, k in batch])
    assert rec_loss(store, corpus, batch, cfg(), training=False).value == pytest.approx(hand, abs=1e-10)


def test_rec_loss_large_margin_goes_to_zero():
    corpus, store = random_fixture(seed=13)
    y1, y2 = (naive_score(store.tensors, corpus, 0, i) for i in (1, 2))
    batch = np.array([[0, 1, 2]] if y1 > y2 else [[0, 2, 1]])
    s = store.copy()
    s["wout"] = s["wout"] * 1e6  # the margin scales linearly with the output weights
    loss = rec_loss(s, corpus, batch, cfg(), training=False).value
    assert 0 <= loss < 1e-12
