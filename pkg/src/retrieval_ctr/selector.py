"""Feature-selection policy: which target features go into the retrieval query.

Candidate feature embeddings pass through one multi-head self-attention
block (no positional encoding, so the network is permutation-equivariant),
a small ReLU MLP and a sigmoid, giving an independent selection probability
per feature.  Sampling those Bernoulli variables yields the query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .archive import Query
from .data import PredictionTarget, Vocabulary

PREFIX = "selector."
LOGIT_CLAMP = math.log((1.0 - nn.PROB_EPS) / nn.PROB_EPS)
LIKELIHOOD_MODES = ("bernoulli", "selected-only")


@dataclass
class SelectorConfig:
    dim: int = 16
    heads: int = 2
    hidden: int = 32


@dataclass
class SelectionOutcome:
    probs: np.ndarray
    mask: np.ndarray  # features actually used in the query
    drawn: np.ndarray  # raw Bernoulli draw; differs from mask only when forced
    forced: bool
    log_prob: float
    query: Query


def init_selector(store: nn.ParamStore, vocab_size: int, cfg: SelectorConfig, rng: np.random.Generator) -> None:
    d = cfg.dim
    nn.init_embedding(store, PREFIX + "emb", vocab_size, d, rng)
    for i in range(cfg.heads):
        for kind in "qkv":
            nn.init_matrix(store, f"{PREFIX}attn.{kind}{i}", d, d, rng)
    nn.init_matrix(store, PREFIX + "attn.o", cfg.heads * d, d, rng)
    nn.init_dense(store, PREFIX + "mlp0", d, cfg.hidden, rng)
    nn.init_dense(store, PREFIX + "mlp1", cfg.hidden, 1, rng)


def multihead_self_attention(store: nn.ParamStore, x: nn.Tensor, heads: int, shift: float = 0.0) -> nn.Tensor:
    """``Concat(head_1..head_h) W_o`` with ``head_i = softmax(Q K^T / sqrt(d)) V``.

    ``shift`` is added to every attention score before the softmax; it
    exists so tests can confirm the output does not depend on it.
    """
    d = x.shape[-1]
    outs = []
    for i in range(heads):
        q = nn.matmul(x, store[f"{PREFIX}attn.q{i}"])
        k = nn.matmul(x, store[f"{PREFIX}attn.k{i}"])
        v = nn.matmul(x, store[f"{PREFIX}attn.v{i}"])
        scores = nn.scale(nn.matmul(q, nn.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
        if shift:
            scores = nn.add(scores, shift)
        outs.append(nn.matmul(nn.softmax(scores, axis=-1), v))
    return nn.matmul(nn.concat(outs, axis=-1), store[PREFIX + "attn.o"])


def selection_logits(store: nn.ParamStore, cand_ids: np.ndarray, heads: int, shift: float = 0.0) -> nn.Tensor:
    """Pre-sigmoid selection scores, shape ``(batch, K_q)``."""
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    x = nn.embed_lookup(store, PREFIX + "emb", cand_ids)
    e = multihead_self_attention(store, x, heads, shift)
    h = nn.dense(store, PREFIX + "mlp0", e, "relu")
    out = nn.dense(store, PREFIX + "mlp1", h)
    return nn.reshape(out, cand_ids.shape)


def selection_probs(store: nn.ParamStore, target: PredictionTarget, vocab: Vocabulary, heads: int) -> np.ndarray:
    if not target.candidate_tokens:
        raise ValueError("target has no candidate features")
    ids = np.array([vocab.ids(target.candidate_tokens)])
    return nn._sigmoid(selection_logits(store, ids, heads).data[0])


def clamp_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(p, nn.PROB_EPS, 1.0 - nn.PROB_EPS)


def log_prob_array(p: np.ndarray, drawn: np.ndarray, mode: str = "bernoulli") -> np.ndarray:
    """Log-likelihood of draws along the last axis."""
    p = clamp_probs(np.asarray(p, dtype=np.float64))
    drawn = np.asarray(drawn, dtype=bool)
    sel = np.where(drawn, np.log(p), 0.0).sum(axis=-1)
    if mode == "selected-only":
        return sel
    if mode != "bernoulli":
        raise ValueError(f"unknown likelihood mode {mode!r}")
    return sel + np.where(drawn, 0.0, np.log1p(-p)).sum(axis=-1)


def log_prob_tensor(logits: nn.Tensor, drawn: np.ndarray, mode: str = "bernoulli") -> nn.Tensor:
    """Differentiable counterpart of :func:`log_prob_array`, one value per row."""
    z = nn.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    m = np.asarray(drawn, dtype=np.float64)
    terms = nn.mul(nn.log_sigmoid(z), m)
    if mode == "bernoulli":
        terms = nn.add(terms, nn.mul(nn.log_sigmoid(nn.scale(z, -1.0)), 1.0 - m))
    elif mode != "selected-only":
        raise ValueError(f"unknown likelihood mode {mode!r}")
    return nn.tsum(terms, axis=-1)


def force_nonempty(drawn: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows with nothing selected get their most probable feature switched on."""
    mask = np.array(drawn, dtype=bool, copy=True)
    flat = mask.reshape(-1, mask.shape[-1])  # view into mask
    probs = np.asarray(p).reshape(flat.shape)
    rows = np.flatnonzero(~flat.any(axis=1))
    flat[rows, np.argmax(probs[rows], axis=1)] = True
    empty = np.zeros(len(flat), bool)
    empty[rows] = True
    return mask, empty.reshape(mask.shape[:-1])


def sample_masks(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.random(p.shape) < p


def threshold_masks(p: np.ndarray) -> np.ndarray:
    return p >= 0.5


def build_query(target: PredictionTarget, mask, log_prob: float = 0.0) -> Query:
    """``user AND (selected features)`` with features in canonical candidate order."""
    cands = target.candidate_tokens
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(cands),):
        raise ValueError(f"mask length {mask.shape} != {len(cands)} candidates")
    return Query(target.user_token, tuple(t for t, m in zip(cands, mask) if m), log_prob)


def sample_subset(
    p: np.ndarray,
    rng: np.random.Generator,
    target: PredictionTarget | None = None,
    mode: str = "bernoulli",
) -> SelectionOutcome:
    """Draw one subset.  ``log_prob`` scores the raw draw, so it stays a proper
    likelihood even when an empty draw had to be forced."""
    p = np.asarray(p, dtype=np.float64)
    drawn = sample_masks(p, rng)
    mask, empty = force_nonempty(drawn, p)
    lp = float(log_prob_array(p, drawn, mode))
    query = build_query(target, mask, lp) if target is not None else Query("", (), lp)
    return SelectionOutcome(p, mask, drawn, bool(empty), lp, query)
