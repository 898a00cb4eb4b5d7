"""Alternating optimization of the feature selector and the CTR predictor.

The predictor is pre-trained on retrievals made with the freshly initialized
selector.  Each round then runs one selector epoch (REINFORCE with a
relative-information-gain reward, predictor frozen), regenerates every
training query with the updated selector, and runs one predictor epoch
(selector frozen).  Validation AUC drives early stopping.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import predictor as pred
from . import selector as sel
from .archive import Archive, SearchStats, recent_rows, search_terms
from .data import PredictionTarget, Vocabulary
from .metrics import auc, constant_entropy, log_loss, rig_reward

log = logging.getLogger(__name__)

HPARAM_GRIDS = {
    "lr_selector": (1e-6, 1e-5, 1e-4),
    "lr_predictor": (1e-4, 5e-4, 1e-3),
    "l2": (1e-4, 5e-4, 1e-3),
    "batch_size": (100, 200),
}
MODES = ("ubr", "recent_n", "sum_pooling", "ubr_sum_pooling")
REPORT_HEADER = "epoch,phase,auc,logloss,mean_reward"


@dataclass
class TrainConfig:
    lr_selector: float = 1e-4
    lr_predictor: float = 1e-3
    l2: float = 1e-4
    batch_size: int = 100
    S: int = 12
    L: int = 1
    max_rounds: int = 10
    patience: int = 3
    seed: int = 0
    mode: str = "ubr"
    momentum: float = 0.0
    baseline: bool = True
    baseline_decay: float = 0.99
    likelihood: str = "bernoulli"
    dim: int = 16
    heads: int = 2
    selector_hidden: int = 32
    eval_batch: int = 1000

    def validate(self) -> None:
        for name in ("lr_selector", "lr_predictor", "l2", "batch_size", "S", "L",
                     "dim", "heads", "selector_hidden", "eval_batch", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.likelihood not in sel.LIKELIHOOD_MODES:
            raise ValueError(f"likelihood must be one of {sel.LIKELIHOOD_MODES}")
        if not 0.0 <= self.momentum < 1.0 or not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("momentum and baseline_decay must lie in [0, 1)")

    def off_grid(self) -> list[str]:
        """Fields whose value is outside the published search grids."""
        return [k for k, grid in HPARAM_GRIDS.items() if getattr(self, k) not in grid]

    @property
    def uses_retrieval(self) -> bool:
        return self.mode in ("ubr", "ubr_sum_pooling")

    @property
    def sum_pooling(self) -> bool:
        return self.mode in ("sum_pooling", "ubr_sum_pooling")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class RewardState:
    p_avg: float
    baseline: float | None = None
    decay: float = 0.99
    enabled: bool = True
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        constant_entropy(self.p_avg)  # rejects p_avg outside (0, 1)

    def current(self, first_batch: np.ndarray) -> float:
        if not self.enabled:
            return 0.0
        if self.baseline is None:
            self.baseline = float(np.mean(first_batch)) if len(first_batch) else 0.0
        return self.baseline

    def update(self, batch_mean: float) -> None:
        self.history.append(batch_mean)
        if self.enabled and self.baseline is not None:
            # incremental form stays exact when the batch mean equals the baseline
            self.baseline += (1.0 - self.decay) * (batch_mean - self.baseline)


@dataclass
class Encoded:
    """Targets as id arrays against one vocabulary and archive."""

    targets: list[PredictionTarget]
    users: list[str]
    ts: np.ndarray
    cand_vocab: np.ndarray  # (N, K) candidate-feature vocab ids
    cand_terms: np.ndarray  # (N, K) archive term ids, -1 when absent
    tgt_vocab: np.ndarray  # (N, F) all target tokens
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class Retrieval:
    rows: np.ndarray  # (N, S) archive rows, -1 padded
    valid: np.ndarray  # (N, S) bool
    scores: np.ndarray  # (N, S)
    masks: np.ndarray | None = None  # selection masks that produced the queries


class Engine:
    """Parameters plus the archive and vocabulary they are trained against."""

    def __init__(self, archive: Archive, vocab: Vocabulary, cfg: TrainConfig, store: nn.ParamStore | None = None):
        cfg.validate()
        self.archive = archive
        self.vocab = vocab
        self.cfg = cfg
        self.n_fields = archive.doc_length
        term_vocab = np.array([vocab.id(t) for t in archive.terms], dtype=np.int64)
        self.doc_vocab = term_vocab[archive._doc_terms] if archive.total_docs else np.zeros((0, 0), np.int64)
        self.sel_cfg = sel.SelectorConfig(cfg.dim, cfg.heads, cfg.selector_hidden)
        self.pred_cfg = pred.PredictorConfig(dim=cfg.dim, sum_pooling=cfg.sum_pooling)
        if store is None:
            store = nn.ParamStore()
            sel.init_selector(store, len(vocab), self.sel_cfg, stream(cfg.seed, "init.selector"))
            pred.init_predictor(store, len(vocab), self.n_fields, self.pred_cfg, stream(cfg.seed, "init.predictor"))
        self.store = store

    # -- encoding -----------------------------------------------------------

    def encode(self, targets: Sequence[PredictionTarget], require_labels: bool = False) -> Encoded:
        if not targets:
            raise ValueError("no targets to encode")
        K = len(targets[0].candidate_tokens)
        for t in targets:
            if len(t.all_tokens) != self.n_fields or len(t.candidate_tokens) != K:
                raise ValueError(
                    f"target {t.target_id} has {len(t.all_tokens)} fields, archive documents have {self.n_fields}"
                )
        labels = None
        if any(t.label is None for t in targets):
            if require_labels:
                raise ValueError("training targets must all be labeled")
        else:
            labels = np.array([t.label for t in targets], dtype=np.float64)
        term_id = self.archive.term_id
        return Encoded(
            list(targets),
            [t.user_token for t in targets],
            np.array([t.timestamp for t in targets], dtype=np.int64),
            np.array([self.vocab.ids(t.candidate_tokens) for t in targets], dtype=np.int64),
            np.array([[term_id.get(tok, -1) for tok in t.candidate_tokens] for t in targets], dtype=np.int64),
            np.array([self.vocab.ids(t.all_tokens) for t in targets], dtype=np.int64),
            labels,
        )

    # -- selection and retrieval -------------------------------------------

    def selection_logits(self, enc: Encoded, idx: np.ndarray) -> nn.Tensor:
        return sel.selection_logits(self.store, enc.cand_vocab[idx], self.cfg.heads)

    def selection_probs(self, enc: Encoded, idx: np.ndarray) -> np.ndarray:
        return nn._sigmoid(self.selection_logits(enc, idx).data)

    def retrieve(
        self, enc: Encoded, idx: np.ndarray, masks: np.ndarray | None, stats: SearchStats | None = None
    ) -> Retrieval:
        """Top-S behaviors per target; ``masks`` None means the most recent S."""
        S = self.cfg.S
        n = len(idx)
        rows = np.full((n, S), -1, dtype=np.int64)
        scores = np.zeros((n, S))
        for j, i in enumerate(idx):
            if masks is None:
                r = recent_rows(self.archive, enc.users[i], S, int(enc.ts[i]))
                s = np.zeros(len(r))
            else:
                terms = enc.cand_terms[i]
                chosen = terms[masks[j] & (terms >= 0)]
                r, s, _ = search_terms(self.archive, enc.users[i], chosen.tolist(), S, int(enc.ts[i]), stats)
            rows[j, : len(r)] = r
            scores[j, : len(r)] = s
        valid = rows >= 0
        # a target without any history gets one padding behavior
        valid[~valid.any(axis=1), 0] = True
        return Retrieval(rows, valid, scores, masks)

    def queries(self, enc: Encoded, rng: np.random.Generator | None, sample: bool) -> Retrieval:
        """Retrieval for every target: sampled or thresholded selection, or recency."""
        parts = []
        for start in range(0, len(enc), self.cfg.eval_batch):
            idx = np.arange(start, min(start + self.cfg.eval_batch, len(enc)))
            masks = None
            if self.cfg.uses_retrieval:
                p = self.selection_probs(enc, idx)
                drawn = sel.sample_masks(p, rng) if sample else sel.threshold_masks(p)
                masks, _ = sel.force_nonempty(drawn, p)
            parts.append(self.retrieve(enc, idx, masks))
        return Retrieval(
            np.concatenate([p.rows for p in parts]),
            np.concatenate([p.valid for p in parts]),
            np.concatenate([p.scores for p in parts]),
            None if parts[0].masks is None else np.concatenate([p.masks for p in parts]),
        )

    # -- prediction ---------------------------------------------------------

    def behavior_ids(self, retr: Retrieval, sub: slice | np.ndarray = slice(None)) -> np.ndarray:
        rows = retr.rows[sub]
        ids = self.doc_vocab[np.maximum(rows, 0)]
        ids[rows < 0] = 0
        return ids

    def logits(self, enc: Encoded, idx: np.ndarray, retr: Retrieval, sub=slice(None)) -> tuple[nn.Tensor, nn.Tensor]:
        return pred.forward(
            self.store, self.behavior_ids(retr, sub), retr.valid[sub], enc.tgt_vocab[idx], self.cfg.sum_pooling
        )

    def predict(self, enc: Encoded, retr: Retrieval) -> np.ndarray:
        out = np.empty(len(enc))
        for start in range(0, len(enc), self.cfg.eval_batch):
            idx = np.arange(start, min(start + self.cfg.eval_batch, len(enc)))
            z, _ = self.logits(enc, idx, retr, idx)
            out[idx] = nn._sigmoid(z.data)
        return out

    def evaluate(self, enc: Encoded) -> tuple[float, float, np.ndarray]:
        """(AUC, log-loss, probabilities) with deterministic threshold selection."""
        if enc.labels is None:
            raise ValueError("evaluation needs labeled targets")
        probs = self.predict(enc, self.queries(enc, None, sample=False))
        return auc(probs, enc.labels), log_loss(probs, enc.labels), probs


# --------------------------------------------------------------------------
# epochs


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def per_example_ll(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Log-likelihood of labels under logits, probability clamped like log-loss."""
    p = np.clip(nn._sigmoid(z), nn.PROB_EPS, 1.0 - nn.PROB_EPS)
    return y * np.log(p) + (1.0 - y) * np.log1p(-p)


RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def selector_surrogate(
    engine: Engine,
    enc: Encoded,
    idx: np.ndarray,
    rng: np.random.Generator,
    state: RewardState,
    reward_fn: RewardFn | None = None,
) -> tuple[nn.Tensor, np.ndarray]:
    """Surrogate whose gradient is the REINFORCE estimate for one batch.

    Returns the scalar surrogate and the raw per-draw rewards, shape
    ``(L, len(idx))``.  ``reward_fn(idx, mask)`` replaces retrieval plus the
    frozen predictor when given.
    """
    cfg = engine.cfg
    logits = engine.selection_logits(enc, idx)
    p = nn._sigmoid(np.clip(logits.data, -sel.LOGIT_CLAMP, sel.LOGIT_CLAMP))
    draws, rewards = [], []
    for _ in range(cfg.L):
        drawn = sel.sample_masks(p, rng)
        mask, _ = sel.force_nonempty(drawn, p)
        if reward_fn is not None:
            r = np.asarray(reward_fn(idx, mask), dtype=np.float64)
        else:
            retr = engine.retrieve(enc, idx, mask)
            z, _ = engine.logits(enc, idx, retr)
            r = rig_reward(per_example_ll(z.data, enc.labels[idx]), state.p_avg)
        draws.append(drawn)
        rewards.append(r)
    rewards = np.array(rewards)
    ok = np.isfinite(rewards)
    if not ok.all():
        log.warning("skipping %d draw(s) with non-finite reward", int((~ok).sum()))
    b = state.current(rewards[ok])
    surrogate = None
    for drawn, r, keep in zip(draws, rewards, ok):
        adv = np.where(keep, r - b, 0.0) / (len(idx) * cfg.L)
        term = nn.tsum(nn.mul(sel.log_prob_tensor(logits, drawn, cfg.likelihood), adv))
        surrogate = term if surrogate is None else nn.add(surrogate, term)
    return surrogate, rewards


def selector_epoch(
    engine: Engine,
    enc: Encoded,
    rng: np.random.Generator,
    state: RewardState,
    reward_fn: RewardFn | None = None,
) -> float:
    """One ascent pass over the training targets; returns the mean reward."""
    cfg = engine.cfg
    total, count = 0.0, 0
    for idx in _batches(rng.permutation(len(enc)), cfg.batch_size):
        surrogate, rewards = selector_surrogate(engine, enc, idx, rng, state, reward_fn)
        ok = np.isfinite(rewards)
        if ok.any():
            state.update(float(rewards[ok].mean()))
            total += float(rewards[ok].sum())
            count += int(ok.sum())
        engine.store.zero_grad()
        surrogate.backward()
        nn.sgd_step(engine.store, cfg.lr_selector, "maximize", prefix=sel.PREFIX, momentum=cfg.momentum)
        engine.store.zero_grad()
    return total / count if count else float("nan")


def predictor_epoch(engine: Engine, enc: Encoded, retr: Retrieval, rng: np.random.Generator) -> float:
    """One descent pass of cross-entropy plus L2; returns the mean batch loss."""
    if enc.labels is None:
        raise ValueError("predictor training needs labeled targets")
    cfg = engine.cfg
    losses = []
    for idx in _batches(rng.permutation(len(enc)), cfg.batch_size):
        loss = pred.batch_loss(
            engine.store, engine.behavior_ids(retr, idx), retr.valid[idx], enc.tgt_vocab[idx],
            enc.labels[idx], cfg.l2, cfg.sum_pooling,
        )
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite training loss {value}")
        engine.store.zero_grad()
        loss.backward()
        nn.sgd_step(engine.store, cfg.lr_predictor, prefix=pred.PREFIX, momentum=cfg.momentum)
        losses.append(value)
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# full run


@dataclass
class ReportRow:
    epoch: int
    phase: str
    auc: float
    logloss: float
    mean_reward: float | None = None


@dataclass
class RunResult:
    engine: Engine
    rows: list[ReportRow]
    best_epoch: int
    valid_auc: float
    valid_logloss: float
    test_auc: float
    test_logloss: float
    train_losses: list[float]
    diverged: bool = False
    timings: dict[str, float] = field(default_factory=dict)

    def report_csv(self) -> str:
        return format_report(self.rows)


def _num(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def format_report(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    for r in rows:
        buf.write(f"{r.epoch},{r.phase},{_num(r.auc)},{_num(r.logloss)},{_num(r.mean_reward)}\n")
    return buf.getvalue()


def write_report(path: str | Path, rows: Sequence[ReportRow]) -> None:
    Path(path).write_text(format_report(rows), encoding="utf-8")


def run(
    archive: Archive,
    vocab: Vocabulary,
    train: Sequence[PredictionTarget],
    valid: Sequence[PredictionTarget],
    test: Sequence[PredictionTarget] | None,
    cfg: TrainConfig,
) -> RunResult:
    """Pre-train, then alternate (selector epoch, re-query, predictor epoch).

    The returned engine holds the parameters of the best validation epoch.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    engine = Engine(archive, vocab, cfg)
    enc_train = engine.encode(train, require_labels=True)
    enc_valid = engine.encode(valid, require_labels=True)
    state = RewardState(float(enc_train.labels.mean()), decay=cfg.baseline_decay, enabled=cfg.baseline)
    rng_shuffle = stream(cfg.seed, "shuffle")
    rng_query = stream(cfg.seed, "query")
    rng_policy = stream(cfg.seed, "policy")
    timings["encode"] = time.perf_counter() - t0

    rows: list[ReportRow] = []
    losses: list[float] = []
    best = {"auc": -np.inf, "epoch": -1, "snap": None}
    store = engine.store

    def record(phase: str, reward: float | None = None) -> bool:
        a, ll, _ = engine.evaluate(enc_valid)
        rows.append(ReportRow(len(rows), phase, a, ll, reward))
        log.info("epoch %d %-9s auc=%.4f logloss=%.4f%s", len(rows) - 1, phase, a, ll,
                 "" if reward is None else f" reward={reward:.4f}")
        if a > best["auc"]:
            best.update(auc=a, epoch=len(rows) - 1, snap=store.snapshot())
            return True
        return False

    diverged = False
    last_good = store.snapshot()
    try:
        t = time.perf_counter()
        losses.append(predictor_epoch(engine, enc_train, engine.queries(enc_train, rng_query, True), rng_shuffle))
        record("pretrain")
        last_good = store.snapshot()
        timings["pretrain"] = time.perf_counter() - t

        stale = 0
        for _ in range(cfg.max_rounds):
            t = time.perf_counter()
            improved = False
            if cfg.uses_retrieval:
                reward = selector_epoch(engine, enc_train, rng_policy, state)
                if not np.isfinite(reward):
                    raise FloatingPointError("selector epoch produced no finite reward")
                improved |= record("selector", reward)
                last_good = store.snapshot()
            retr = engine.queries(enc_train, rng_query, True)
            losses.append(predictor_epoch(engine, enc_train, retr, rng_shuffle))
            improved |= record("predictor")
            last_good = store.snapshot()
            timings[f"round{len(rows)}"] = time.perf_counter() - t
            stale = 0 if improved else stale + 1
            if stale >= cfg.patience:
                log.info("early stop: no validation gain for %d round(s)", stale)
                break
    except FloatingPointError as exc:
        log.error("training diverged (%s); keeping last good parameters", exc)
        diverged = True
        store.restore(last_good)

    if best["snap"] is not None:
        store.restore(best["snap"])
    best_row = rows[best["epoch"]] if rows else None
    test_auc = test_ll = float("nan")
    if test:
        t = time.perf_counter()
        test_auc, test_ll, _ = engine.evaluate(engine.encode(test, require_labels=True))
        timings["test"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return RunResult(
        engine, rows, best["epoch"],
        best_row.auc if best_row else float("nan"),
        best_row.logloss if best_row else float("nan"),
        test_auc, test_ll, losses, diverged, timings,
    )


def config_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)
