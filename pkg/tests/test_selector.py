from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrieval_ctr import nn
from retrieval_ctr import selector as sel
from retrieval_ctr.data import PredictionTarget, Vocabulary


def make_store(vocab_size=12, cfg=sel.SelectorConfig(dim=6, heads=2, hidden=5), seed=0):
    s = nn.ParamStore()
    sel.init_selector(s, vocab_size, cfg, np.random.default_rng(seed))
    # larger embeddings than the default init so outputs vary visibly
    s[sel.PREFIX + "emb"].data *= 20
    return s, cfg


def target(item=("item_id_3", "brand_Nike", "cat_shoes"), ctx=("season_summer",)):
    return PredictionTarget(0, ("user_id_7",), item, ctx, 100, 1)


def test_zero_params_give_half():
    s, cfg = make_store()
    for t in s.tensors.values():
        t.data[...] = 0.0
    p = nn._sigmoid(sel.selection_logits(s, np.array([[1, 2, 3]]), cfg.heads).data)
    np.testing.assert_array_equal(p, 0.5)


def test_duplicate_tokens_equal_probs():
    s, cfg = make_store()
    p = nn._sigmoid(sel.selection_logits(s, np.array([[4, 4, 2]]), cfg.heads).data[0])
    assert p[0] == p[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    s, cfg = make_store(seed=seed % 1000)
    ids = rng.integers(1, 12, size=(2, 5))
    perm = rng.permutation(5)
    p = sel.selection_logits(s, ids, cfg.heads).data
    q = sel.selection_logits(s, ids[:, perm], cfg.heads).data
    np.testing.assert_allclose(q, p[:, perm], rtol=0, atol=1e-12)


def test_shift_invariance_inside_attention():
    s, cfg = make_store()
    ids = np.array([[1, 5, 7, 2]])
    base = sel.selection_logits(s, ids, cfg.heads).data
    shifted = sel.selection_logits(s, ids, cfg.heads, shift=37.5).data
    np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)


def test_probs_in_open_interval():
    s, cfg = make_store()
    vocab = Vocabulary(["user_id_7", "item_id_3", "brand_Nike", "cat_shoes", "season_summer"])
    p = sel.selection_probs(s, target(), vocab, cfg.heads)
    assert p.shape == (4,) and np.all((p > 0) & (p < 1))


def test_selector_gradient_check():
    rng = np.random.default_rng(4)
    s, cfg = make_store(cfg=sel.SelectorConfig(dim=3, heads=2, hidden=4))
    s[sel.PREFIX + "emb"].data = rng.normal(size=s[sel.PREFIX + "emb"].shape)
    ids = np.array([[1, 2, 3], [4, 5, 1]])
    w = rng.normal(size=(2, 3))
    err = nn.grad_check(
        lambda: nn.tsum(nn.mul(nn.sigmoid(sel.selection_logits(s, ids, cfg.heads)), w)), s.tensors.values()
    )
    assert err < 1e-4


def test_log_prob_modes():
    p = np.full(4, 0.5)
    for drawn in itertools.product([False, True], repeat=4):
        assert sel.log_prob_array(p, np.array(drawn)) == pytest.approx(4 * math.log(0.5))
    p = np.array([0.2, 0.9, 0.6])
    d = np.array([True, False, True])
    assert sel.log_prob_array(p, d, "selected-only") == pytest.approx(math.log(0.2) + math.log(0.6))
    assert sel.log_prob_array(p, d) == pytest.approx(math.log(0.2) + math.log(0.1) + math.log(0.6))
    with pytest.raises(ValueError):
        sel.log_prob_array(p, d, "other")


def test_near_one_probs_select_all():
    p = np.full(5, 1 - 1e-9)
    out = sel.sample_subset(p, np.random.default_rng(0))
    assert out.mask.all() and not out.forced
    assert -1e-4 < out.log_prob <= 0.0


@pytest.mark.parametrize("n", [1, 3, 6, 10])
def test_bernoulli_likelihood_normalized(n):
    p = np.random.default_rng(n).uniform(0.05, 0.95, size=n)
    masks = np.array(list(itertools.product([False, True], repeat=n)))
    lp = sel.log_prob_array(np.broadcast_to(p, masks.shape), masks)
    assert np.all(lp <= 0)
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)


def test_log_prob_tensor_matches_array():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 4)) * 3
    d = rng.random((3, 4)) < 0.5
    for mode in sel.LIKELIHOOD_MODES:
        t = sel.log_prob_tensor(nn.Tensor(z), d, mode).data
        np.testing.assert_allclose(t, sel.log_prob_array(nn._sigmoid(z), d, mode), rtol=1e-10)


def test_sampling_frequencies_and_seed():
    p = np.array([0.1, 0.5, 0.85])
    draws = sel.sample_masks(np.broadcast_to(p, (100_000, 3)), np.random.default_rng(7))
    freq = draws.mean(axis=0)
    sigma = np.sqrt(p * (1 - p) / 100_000)
    assert np.all(np.abs(freq - p) < 3 * sigma)
    a = sel.sample_subset(p, np.random.default_rng(3))
    b = sel.sample_subset(p, np.random.default_rng(3))
    np.testing.assert_array_equal(a.mask, b.mask)


def test_forced_selection():
    p = np.array([0.01, 0.3, 0.02])
    mask, empty = sel.force_nonempty(np.zeros(3, bool), p)
    assert empty and mask.tolist() == [False, True, False]
    batch, empty = sel.force_nonempty(np.array([[False] * 3, [True, False, False]]), np.array([p, p]))
    assert empty.tolist() == [True, False] and batch.sum(axis=1).tolist() == [1, 1]
    # log-prob scores the raw draw, not the forced mask
    out = sel.sample_subset(np.full(4, 1e-6), np.random.default_rng(0), target())
    assert out.forced and out.mask.sum() == 1 and not out.drawn.any()
    assert out.log_prob == pytest.approx(sel.log_prob_array(np.full(4, 1e-6), out.drawn))


def test_build_query():
    t = target()
    q = sel.build_query(t, [False, True, True, False])
    assert q.user_token == "user_id_7" and q.tokens == ("brand_Nike", "cat_shoes")
    assert sel.build_query(t, [True] * 4).tokens == t.candidate_tokens
    assert "user_id_7" not in t.candidate_tokens
    with pytest.raises(ValueError):
        sel.build_query(t, [True])
