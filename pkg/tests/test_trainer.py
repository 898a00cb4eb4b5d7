from __future__ import annotations

import dataclasses
import logging

import numpy as np
import pytest

from retrieval_ctr import selector as sel
from oracles import exact_policy_gradient, mc_policy_gradient, reinforce_toy
from retrieval_ctr.archive import build_index
from retrieval_ctr.synthetic import SynthConfig, make_dataset
from retrieval_ctr.trainer import (
    HPARAM_GRIDS,
    Engine,
    RewardState,
    TrainConfig,
    predictor_epoch,
    run,
    selector_epoch,
    stream,
)

FAST = dict(lr_predictor=0.05, lr_selector=0.01, momentum=0.9, dim=8, eval_batch=500)


@pytest.fixture(scope="module")
def small():
    cfg = SynthConfig(n_users=300, T=30, W=8, n_items=400, n_categories=20)
    ds, syn = make_dataset(cfg, stream(0, "data"), stream(0, "negatives"))
    return ds, build_index(ds.split.docs)


def engine_for(small, **kw) -> tuple[Engine, object]:
    ds, archive = small
    eng = Engine(archive, ds.vocab, TrainConfig(**{**FAST, **kw}))
    return eng, eng.encode(ds.train, require_labels=True)


# -- config ---------------------------------------------------------------------


def test_config_validation_and_grids():
    cfg = TrainConfig()
    cfg.validate()
    assert cfg.off_grid() == []
    assert HPARAM_GRIDS["lr_selector"] == (1e-6, 1e-5, 1e-4)
    assert HPARAM_GRIDS["batch_size"] == (100, 200)
    assert TrainConfig(lr_predictor=0.05).off_grid() == ["lr_predictor"]
    for bad in (dict(lr_selector=0.0), dict(batch_size=0), dict(S=-1), dict(mode="nope"), dict(max_rounds=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_reward_state_rejects_degenerate_ctr():
    for p in (0.0, 1.0):
        with pytest.raises(ValueError):
            RewardState(p)


# -- selector epoch ------------------------------------------------------------------


def test_reinforce_unbiased_against_enumeration():
    eng, target, rewards = reinforce_toy()
    exact = exact_policy_gradient(eng, target, rewards)
    mc, se = mc_policy_gradient(eng, target, rewards, batches=100, batch=1000, seed=123)
    assert np.all(np.abs(mc - exact) <= 3 * se + 1e-9)
    assert np.abs(exact).max() > 1e-3


def test_centered_reward_leaves_theta_unchanged(small):
    eng, enc = engine_for(small, baseline=True)
    before = eng.store.snapshot(sel.PREFIX)
    # dyadic reward: batch means, hence the baseline, are exact
    selector_epoch(eng, enc, np.random.default_rng(0), RewardState(0.5), lambda idx, m: np.full(len(idx), 0.25))
    after = eng.store.snapshot(sel.PREFIX)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_selector_epoch_deterministic_and_phi_frozen(small):
    snaps = []
    for _ in range(2):
        eng, enc = engine_for(small)
        phi = eng.store.snapshot("predictor.")
        r = selector_epoch(eng, enc, np.random.default_rng(4), RewardState(float(enc.labels.mean())))
        assert np.isfinite(r)
        for k, v in eng.store.snapshot("predictor.").items():
            np.testing.assert_array_equal(v, phi[k])
        snaps.append(eng.store.snapshot(sel.PREFIX))
    changed = False
    for k in snaps[0]:
        np.testing.assert_array_equal(snaps[0][k], snaps[1][k])
        changed |= not np.array_equal(snaps[0][k], engine_for(small)[0].store[k].data)
    assert changed


def test_nan_reward_skipped_with_warning(small, caplog):
    eng, enc = engine_for(small)

    def reward_fn(idx, mask):
        r = np.full(len(idx), 0.2)
        r[::7] = np.nan
        return r

    with caplog.at_level(logging.WARNING, logger="retrieval_ctr.trainer"):
        mean = selector_epoch(eng, enc, np.random.default_rng(0), RewardState(0.5), reward_fn)
    assert mean == pytest.approx(0.2)
    assert any("non-finite reward" in r.message for r in caplog.records)
    eng.store.assert_finite()


# -- predictor epoch ---------------------------------------------------------------


def test_predictor_epoch_freezes_theta_and_lr_zero(small):
    eng, enc = engine_for(small)
    theta = eng.store.snapshot(sel.PREFIX)
    retr = eng.queries(enc, np.random.default_rng(0), sample=True)
    predictor_epoch(eng, enc, retr, np.random.default_rng(1))
    for k, v in eng.store.snapshot(sel.PREFIX).items():
        np.testing.assert_array_equal(v, theta[k])
    eng.cfg = dataclasses.replace(eng.cfg, lr_predictor=0.0, momentum=0.0)
    phi = eng.store.snapshot("predictor.")
    predictor_epoch(eng, enc, retr, np.random.default_rng(1))
    for k, v in eng.store.snapshot("predictor.").items():
        np.testing.assert_array_equal(v, phi[k])


def test_single_example_memorized(small):
    ds, archive = small
    eng = Engine(archive, ds.vocab, TrainConfig(lr_predictor=0.1, l2=1e-12, batch_size=100, dim=4))
    eng.cfg = dataclasses.replace(eng.cfg, l2=0.0)
    enc = eng.encode(ds.train[:1], require_labels=True)
    retr = eng.queries(enc, np.random.default_rng(0), sample=True)
    rng = np.random.default_rng(0)
    for _ in range(300):
        loss = predictor_epoch(eng, enc, retr, rng)
    assert loss < 0.01


def test_pretrain_loss_trend(small):
    eng, enc = engine_for(small, momentum=0.0, lr_predictor=0.02)
    retr = eng.queries(enc, np.random.default_rng(0), sample=True)
    rng = np.random.default_rng(2)
    losses = [predictor_epoch(eng, enc, retr, rng) for _ in range(5)]
    assert np.polyfit(np.arange(5), losses, 1)[0] < 0 and losses[-1] < losses[0]
    eng.store.assert_finite()


def test_missing_labels_rejected(small):
    ds, archive = small
    eng = Engine(archive, ds.vocab, TrainConfig())
    unlabeled = [dataclasses.replace(t, label=None) for t in ds.train[:4]]
    with pytest.raises(ValueError):
        eng.encode(unlabeled, require_labels=True)
    enc = eng.encode(unlabeled)
    with pytest.raises(ValueError):
        predictor_epoch(eng, enc, eng.queries(enc, None, False), np.random.default_rng(0))


def test_field_mismatch_rejected(small):
    ds, archive = small
    eng = Engine(archive, ds.vocab, TrainConfig())
    bad = dataclasses.replace(ds.train[0], context_tokens=ds.train[0].context_tokens[:1])
    with pytest.raises(ValueError, match="fields"):
        eng.encode([bad])


# -- full runs --------------------------------------------------------------------


def test_zero_rounds_gives_one_row(small):
    ds, archive = small
    res = run(archive, ds.vocab, ds.train, ds.valid, ds.test, TrainConfig(max_rounds=0, **FAST))
    assert [r.phase for r in res.rows] == ["pretrain"]
    assert res.report_csv().splitlines()[0] == "epoch,phase,auc,logloss,mean_reward"


def test_run_order_reproducible_and_beats_recency(small):
    ds, archive = small
    cfg = TrainConfig(max_rounds=3, patience=5, **FAST)
    a = run(archive, ds.vocab, ds.train, ds.valid, ds.test, cfg)
    b = run(archive, ds.vocab, ds.train, ds.valid, ds.test, cfg)
    assert a.report_csv() == b.report_csv()
    assert [r.phase for r in a.rows] == ["pretrain"] + ["selector", "predictor"] * 3
    assert [r.epoch for r in a.rows] == list(range(7))
    assert all(np.isfinite(r.mean_reward) for r in a.rows if r.phase == "selector")
    assert all(r.mean_reward is None for r in a.rows if r.phase != "selector")
    assert a.valid_auc == max(r.auc for r in a.rows)
    recent = run(archive, ds.vocab, ds.train, ds.valid, ds.test, dataclasses.replace(cfg, mode="recent_n"))
    assert [r.phase for r in recent.rows] == ["pretrain"] + ["predictor"] * 3
    assert a.test_auc > recent.test_auc


def test_early_stopping(small):
    ds, archive = small
    # a vanishing learning rate cannot improve validation AUC
    cfg = TrainConfig(max_rounds=10, patience=2, lr_predictor=1e-12, lr_selector=1e-12, dim=4, mode="recent_n")
    res = run(archive, ds.vocab, ds.train, ds.valid, None, cfg)
    assert len(res.rows) < 11
    assert np.isnan(res.test_auc)


def test_divergence_keeps_last_good(small):
    ds, archive = small
    cfg = TrainConfig(max_rounds=3, lr_predictor=1e200, dim=4)
    with np.errstate(over="ignore", invalid="ignore"):
        res = run(archive, ds.vocab, ds.train, ds.valid, ds.test, cfg)
    assert res.diverged
    res.engine.store.assert_finite()
