"""Attention-pooled CTR predictor over retrieved behaviors.

Behavior and target embeddings are per-field concatenations in canonical
field order.  An Att MLP scores every (behavior, target) pair, a masked
softmax turns the scores into pooling weights, and a 200-80-1 MLP maps the
pooled user vector together with the target vector to a click probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

PREFIX = "predictor."
EMB = PREFIX + "emb"


@dataclass
class PredictorConfig:
    dim: int = 16
    att_hidden: tuple[int, ...] = (64, 32)
    mlp_hidden: tuple[int, ...] = (200, 80)
    sum_pooling: bool = False


def init_predictor(
    store: nn.ParamStore, vocab_size: int, n_fields: int, cfg: PredictorConfig, rng: np.random.Generator
) -> None:
    width = n_fields * cfg.dim
    nn.init_embedding(store, EMB, vocab_size, cfg.dim, rng)
    sizes = [2 * width, *cfg.att_hidden, 1]
    for i in range(len(sizes) - 1):
        nn.init_dense(store, f"{PREFIX}att{i}", sizes[i], sizes[i + 1], rng)
    sizes = [2 * width, *cfg.mlp_hidden, 1]
    for i in range(len(sizes) - 1):
        nn.init_dense(store, f"{PREFIX}mlp{i}", sizes[i], sizes[i + 1], rng)


def _stack(store: nn.ParamStore, kind: str, x: nn.Tensor) -> nn.Tensor:
    n = sum(1 for name in store.names(f"{PREFIX}{kind}") if name.endswith(".W"))
    for i in range(n):
        x = nn.dense(store, f"{PREFIX}{kind}{i}", x, "relu" if i < n - 1 else "none")
    return x


def embed_fields(store: nn.ParamStore, ids: np.ndarray) -> nn.Tensor:
    """``(..., F)`` token ids -> ``(..., F * d)`` concatenated field embeddings."""
    e = nn.embed_lookup(store, EMB, ids)
    return nn.reshape(e, ids.shape[:-1] + (ids.shape[-1] * e.shape[-1],))


def attention_scores(store: nn.ParamStore, behaviors: nn.Tensor, target: nn.Tensor) -> nn.Tensor:
    """``Att(b_i, t)`` for every behavior: ``(B, S, D), (B, D) -> (B, S)``."""
    S = behaviors.shape[1]
    x = nn.concat([behaviors, nn.expand(target, 1, S)], axis=-1)
    return nn.reshape(_stack(store, "att", x), behaviors.shape[:2])


def pooling_weights(
    store: nn.ParamStore, behaviors: nn.Tensor, target: nn.Tensor, mask: np.ndarray, sum_pooling: bool
) -> nn.Tensor:
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every example needs at least one unmasked behavior")
    if sum_pooling:
        return nn.Tensor(mask.astype(np.float64))
    return nn.softmax(attention_scores(store, behaviors, target), axis=-1, mask=mask)


def pool(behaviors: nn.Tensor, alpha: nn.Tensor) -> nn.Tensor:
    """``r = sum_i alpha_i b_i``: ``(B, S, D), (B, S) -> (B, D)``."""
    B, S = alpha.shape
    r = nn.matmul(nn.reshape(alpha, (B, 1, S)), behaviors)
    return nn.reshape(r, (B, behaviors.shape[-1]))


def forward(
    store: nn.ParamStore,
    beh_ids: np.ndarray,
    beh_mask: np.ndarray,
    tgt_ids: np.ndarray,
    sum_pooling: bool = False,
) -> tuple[nn.Tensor, nn.Tensor]:
    """Logits ``(B,)`` and pooling weights ``(B, S)``.

    ``beh_ids`` is ``(B, S, F)``; padded rows carry id 0 and ``beh_mask``
    False.
    """
    b = embed_fields(store, np.asarray(beh_ids, dtype=np.int64))
    t = embed_fields(store, np.asarray(tgt_ids, dtype=np.int64))
    alpha = pooling_weights(store, b, t, beh_mask, sum_pooling)
    r = pool(b, alpha)
    logits = _stack(store, "mlp", nn.concat([r, t], axis=-1))
    return nn.reshape(logits, (logits.shape[0],)), alpha


def regularizer(store: nn.ParamStore) -> nn.Tensor:
    """``0.5 * sum ||w||^2`` over predictor weights (embedding table excluded)."""
    total: nn.Tensor | None = None
    for name in store.names(PREFIX):
        if name == EMB:
            continue
        w = store[name]
        sq = nn.tsum(nn.mul(w, w))
        total = sq if total is None else nn.add(total, sq)
    return nn.scale(total, 0.5)


def batch_loss(
    store: nn.ParamStore,
    beh_ids: np.ndarray,
    beh_mask: np.ndarray,
    tgt_ids: np.ndarray,
    y: np.ndarray,
    l2: float,
    sum_pooling: bool = False,
) -> nn.Tensor:
    logits, _ = forward(store, beh_ids, beh_mask, tgt_ids, sum_pooling)
    loss = nn.mean(nn.bce_with_logits(logits, y))
    if l2:
        loss = nn.add(loss, nn.scale(regularizer(store), l2))
    return loss


# --------------------------------------------------------------------------
# single-instance helpers on plain arrays


def attention_weights(store: nn.ParamStore, behaviors: np.ndarray, target: np.ndarray, mask=None) -> np.ndarray:
    """Softmax pooling weights for one example: ``(S, D), (D,) -> (S,)``."""
    behaviors = np.asarray(behaviors, dtype=np.float64)
    mask = np.ones(len(behaviors), bool) if mask is None else np.asarray(mask, bool)
    w = pooling_weights(
        store, nn.Tensor(behaviors[None]), nn.Tensor(np.asarray(target, np.float64)[None]), mask[None], False
    )
    return w.data[0]


def user_repr(behaviors: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    behaviors = np.asarray(behaviors, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(behaviors) != len(alpha):
        raise ValueError("one weight per behavior required")
    return pool(nn.Tensor(behaviors[None]), nn.Tensor(alpha[None])).data[0]


def predict(store: nn.ParamStore, r: np.ndarray, target: np.ndarray) -> float:
    x = nn.Tensor(np.concatenate([np.asarray(r, np.float64), np.asarray(target, np.float64)])[None])
    return float(nn._sigmoid(_stack(store, "mlp", x).data.ravel())[0])


def ce_loss(y_hat, y, store: nn.ParamStore | None = None, l2: float = 0.0) -> float:
    """Cross-entropy on probabilities (clamped) plus ``0.5 * l2 * ||Phi||^2``."""
    p = np.clip(np.asarray(y_hat, np.float64), nn.PROB_EPS, 1.0 - nn.PROB_EPS)
    y = np.asarray(y, np.float64)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    if l2 and store is not None:
        loss += l2 * float(regularizer(store).data)
    return loss
