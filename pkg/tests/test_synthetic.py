from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest

from retrieval_ctr.archive import build_index
from retrieval_ctr.data import leakage_violations
from retrieval_ctr.metrics import auc
from retrieval_ctr.synthetic import SynthConfig, gen_synthetic, hidden_oracle_scores, make_dataset

SPLITS = ("train", "valid", "test")


def dataset(**kw):
    cfg = SynthConfig(**kw)
    return make_dataset(cfg, np.random.default_rng(cfg.seed), np.random.default_rng(cfg.seed + 1))


def categories_by_user(records):
    seqs = defaultdict(list)
    for r in records:
        seqs["user_id_" + r.user_id].append((r.timestamp, int(dict(r.item)["category"])))
    return {u: [c for _, c in sorted(s)] for u, s in seqs.items()}


def labels(part):
    return np.array([t.label for t in part])


@pytest.mark.parametrize("bad", [dict(W=60), dict(rho=1.5), dict(T=14, W=12), dict(n_categories=5)])
def test_inconsistent_config_rejected(bad):
    with pytest.raises(ValueError):
        gen_synthetic(SynthConfig(n_users=2, **bad), np.random.default_rng(0))


def test_hidden_absent_from_recent_window():
    cfg = SynthConfig(n_users=300, T=40, W=10)
    syn = gen_synthetic(cfg, np.random.default_rng(1))
    for u, cats in categories_by_user(syn.records).items():
        assert len(cats) == cfg.T
        for k, h in enumerate(syn.hidden[u]):
            step = cfg.T - 3 + k  # 0-based position of target step k
            assert h not in cats[step - cfg.W : step]
            assert h in cats[: step - cfg.W]


def test_pattern_frequency_matches_rho():
    cfg = SynthConfig(n_users=2000, rho=0.7)
    syn = gen_synthetic(cfg, np.random.default_rng(2))
    flags = np.array([f for f in syn.follows.values()], dtype=float).ravel()
    sigma = np.sqrt(cfg.rho * (1 - cfg.rho) / flags.size)
    assert abs(flags.mean() - cfg.rho) < 2 * sigma
    cats = categories_by_user(syn.records)
    for u, f in syn.follows.items():
        for k in range(3):
            # a random click may still land in the hidden category
            if f[k]:
                assert cats[u][cfg.T - 3 + k] == syn.hidden[u][k]


def test_full_signal_oracle_is_perfect():
    ds, syn = dataset(n_users=400, rho=1.0)
    for name in SPLITS:
        part = getattr(ds, name)
        assert auc(hidden_oracle_scores(part, syn, name), labels(part)) == 1.0


def test_no_signal_oracle_at_chance():
    ds, syn = dataset(n_users=5000, rho=0.0)
    for name in SPLITS:
        part = getattr(ds, name)
        assert len(part) >= 10_000
        assert abs(auc(hidden_oracle_scores(part, syn, name), labels(part)) - 0.5) < 0.03


def test_generator_is_deterministic():
    a = gen_synthetic(SynthConfig(n_users=20), np.random.default_rng(5))
    b = gen_synthetic(SynthConfig(n_users=20), np.random.default_rng(5))
    assert a.records == b.records and a.hidden == b.hidden


def test_generated_splits_do_not_leak():
    ds, _ = dataset(n_users=100)
    archive = build_index(ds.split.docs)
    for name in SPLITS:
        assert leakage_violations(ds.split, getattr(ds, name), archive) == 0


def test_negatives_never_clicked():
    ds, syn = dataset(n_users=100)
    clicked = defaultdict(set)
    for r in syn.records:
        clicked["user_id_" + r.user_id].add("item_id_" + r.item_id)
    for name in SPLITS:
        for t in getattr(ds, name):
            if t.label == 0:
                assert t.item_tokens[0] not in clicked[t.user_token]
