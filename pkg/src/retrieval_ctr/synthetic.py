"""Synthetic click logs whose useful signal lives far back in each history.

Each user browses a handful of *regular* categories all the time and has
three *hidden* categories, one per target step (train, valid, test).  A
hidden category recurs with a fixed period early in the sequence and then
disappears: it never occurs in the ``W`` behaviors preceding its own target.
At its target step the user clicks an item of that hidden category with
probability ``rho``; otherwise the click is a uniformly random item.  A
recent-N model therefore cannot see the evidence, while retrieval over the
full history can.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (
    BehaviorLogRecord,
    Catalog,
    Dataset,
    PredictionTarget,
    prepare_dataset,
    token,
)

ITEM_FIELDS = ("item_id", "category", "brand")
N_HIDDEN = 3  # one per target step


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_items: int = 1000
    n_categories: int = 50
    n_brands: int = 4  # per category
    n_regular: int = 4
    T: int = 60
    W: int = 12
    rho: float = 0.9
    period: int = 9
    start_ts: int = 1420070400  # 2015-01-01 UTC
    min_gap: int = 12 * 3600
    max_gap: int = 5 * 86400
    neg_ratio: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.W >= self.T:
            raise ValueError(f"recency window W={self.W} must be smaller than T={self.T}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.early_len < N_HIDDEN or self.period < N_HIDDEN:
            raise ValueError(
                f"T={self.T}, W={self.W}, period={self.period} leave no room for the hidden pattern"
            )
        if self.n_categories < self.n_regular + N_HIDDEN:
            raise ValueError("need at least n_regular + 3 categories")
        if self.n_items < self.n_categories * self.n_brands:
            raise ValueError("need at least one item per (category, brand)")
        if self.n_users < 1 or self.min_gap < 1 or self.max_gap < self.min_gap:
            raise ValueError("invalid user count or timestamp gaps")

    @property
    def early_len(self) -> int:
        # positions before the train target's recency window
        return self.T - self.W - 3


@dataclass
class SyntheticData:
    records: list[BehaviorLogRecord]
    catalog: Catalog
    hidden: dict[str, tuple[int, int, int]]  # user token -> hidden category per target step
    follows: dict[str, tuple[bool, bool, bool]]  # user token -> pattern used at each target step
    item_category: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, int))


def item_tokens(i: int, cfg: SynthConfig) -> tuple[str, ...]:
    cat = i % cfg.n_categories
    brand = (i // cfg.n_categories) % cfg.n_brands
    return (token("item_id", i), token("category", cat), token("brand", f"{cat}b{brand}"))


def gen_synthetic(cfg: SynthConfig, rng: np.random.Generator) -> SyntheticData:
    cfg.validate()
    C = cfg.n_categories
    item_cat = np.arange(cfg.n_items) % C
    by_cat = [np.flatnonzero(item_cat == c) for c in range(C)]
    per_cat = np.array([len(b) for b in by_cat])
    catalog = Catalog({str(i): item_tokens(i, cfg) for i in range(cfg.n_items)})
    T = cfg.T
    targets = (T - 3, T - 2, T - 1)  # 0-based positions of the three target steps

    records: list[BehaviorLogRecord] = []
    hidden: dict[str, tuple[int, int, int]] = {}
    follows: dict[str, tuple[bool, bool, bool]] = {}
    for u in range(cfg.n_users):
        perm = rng.permutation(C)
        hid = perm[:N_HIDDEN]
        regular = perm[N_HIDDEN : N_HIDDEN + cfg.n_regular]
        seq = np.full(T, -1, dtype=np.int64)

        phase = int(rng.integers(0, cfg.period - N_HIDDEN + 1))
        for k in range(N_HIDDEN):
            pos = np.arange(phase + k, cfg.early_len, cfg.period)
            seq[pos] = rng.choice(by_cat[hid[k]], size=len(pos))

        flags = []
        for k, p in enumerate(targets):
            hit = bool(rng.random() < cfg.rho)
            flags.append(hit)
            if hit:
                seq[p] = rng.choice(by_cat[hid[k]])
            else:
                # keep later steps' hidden categories out of their recency windows
                banned = set(hid[k + 1 :].tolist())
                while True:
                    it = int(rng.integers(cfg.n_items))
                    if item_cat[it] not in banned:
                        break
                seq[p] = it

        free = np.flatnonzero(seq < 0)
        cats = rng.choice(regular, size=len(free))
        # items of category c are c, c + C, c + 2C, ...
        seq[free] = cats + C * rng.integers(0, per_cat[cats])

        gaps = rng.integers(cfg.min_gap, cfg.max_gap + 1, size=T)
        ts = cfg.start_ts + int(rng.integers(0, 30 * 86400)) + np.cumsum(gaps)
        uid = str(u)
        for i in range(T):
            toks = catalog.items[str(int(seq[i]))]
            item = tuple((f, t[len(f) + 1 :]) for f, t in zip(ITEM_FIELDS, toks))
            records.append(BehaviorLogRecord(uid, item, int(ts[i])))
        utok = token("user_id", uid)
        hidden[utok] = tuple(int(h) for h in hid)
        follows[utok] = tuple(flags)
    return SyntheticData(records, catalog, hidden, follows, item_cat)


_STEP = {"train": 0, "valid": 1, "test": 2}


def make_dataset(cfg: SynthConfig, rng_gen: np.random.Generator, rng_neg: np.random.Generator) -> tuple[Dataset, SyntheticData]:
    """Generate a log and turn it into labeled splits.

    At a pattern-following step the hidden category would have been clicked,
    so its items are not eligible as negatives there.
    """
    syn = gen_synthetic(cfg, rng_gen)
    by_cat: dict[int, set[str]] = {}
    for i, c in enumerate(syn.item_category.tolist()):
        by_cat.setdefault(c, set()).add(str(i))
    # map (user, timestamp) of the last three behaviors to their target step
    step_of: dict[tuple[str, int], int] = {}
    per_user_ts: dict[str, list[int]] = {}
    for r in syn.records:
        per_user_ts.setdefault(token("user_id", r.user_id), []).append(r.timestamp)
    for utok, tss in per_user_ts.items():
        tss.sort()
        for k, ts in enumerate(tss[-3:]):
            step_of[(utok, ts)] = k

    def exclude(pos: PredictionTarget) -> set[str]:
        k = step_of[(pos.user_token, pos.timestamp)]
        if syn.follows[pos.user_token][k]:
            return by_cat[syn.hidden[pos.user_token][k]]
        return set()

    ds = prepare_dataset(syn.records, syn.catalog, rng_neg, cfg.neg_ratio, exclude)
    return ds, syn


def hidden_oracle_scores(targets: list[PredictionTarget], syn: SyntheticData, split: str) -> np.ndarray:
    """1.0 when the target item is in the user's hidden category for that split."""
    k = _STEP[split]
    out = np.zeros(len(targets))
    for i, t in enumerate(targets):
        cat = next(tok for tok in t.item_tokens if tok.startswith("category_"))
        out[i] = float(int(cat.split("_", 1)[1]) == syn.hidden[t.user_token][k])
    return out
