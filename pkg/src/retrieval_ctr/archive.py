"""Feature-level inverted index over user behaviors with BM25 top-S search.

Every behavior is a document whose terms are categorical feature tokens
(``<field>_<value>``).  A query is a user token AND-ed with the OR of a set
of selected feature tokens; candidates are scored with BM25 and the top ``S``
are returned.  Because every token occurs at most once in a document and all
documents in an archive have the same length, the BM25 saturation term is
exactly one and the score collapses to the sum of IDF over matched tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

K1 = 1.2
B = 0.75
INDEX_MAGIC = "UBRIDX1"


@dataclass(frozen=True)
class BehaviorDoc:
    """One logged behavior: the user token plus item/context feature tokens.

    ``feature_tokens`` keeps canonical field order; it must not repeat a
    token, so term frequency is always 0 or 1.
    """

    doc_id: int
    user_token: str
    feature_tokens: tuple[str, ...]
    timestamp: int

    def __post_init__(self) -> None:
        if not self.user_token:
            raise ValueError(f"doc {self.doc_id}: empty user token")
        toks = self.tokens
        if len(set(toks)) != len(toks):
            raise ValueError(f"doc {self.doc_id}: duplicate feature tokens {toks}")

    @property
    def tokens(self) -> tuple[str, ...]:
        return (self.user_token, *self.feature_tokens)


@dataclass(frozen=True)
class Query:
    """``user_token AND (t_1 OR ... OR t_n)`` plus the selection log-probability."""

    user_token: str
    tokens: tuple[str, ...]
    log_prob: float = 0.0


@dataclass
class RetrievedSet:
    doc_ids: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.doc_ids)


@dataclass
class SearchStats:
    """Work counters, filled by :func:`search` when passed in."""

    queries: int = 0
    entries_touched: int = 0
    docs_scored: int = 0
    last_entries_touched: int = 0
    last_docs_scored: int = 0
    last_user_postings: int = 0
    last_selected_postings: int = 0

    def record(self, touched: int, scored: int, user_len: int, sel_len: int) -> None:
        self.queries += 1
        self.entries_touched += touched
        self.docs_scored += scored
        self.last_entries_touched = touched
        self.last_docs_scored = scored
        self.last_user_postings = user_len
        self.last_selected_postings = sel_len


class Archive:
    """Immutable inverted index.  Build with :func:`build_index`.

    Public attributes mirror the index statistics: ``postings`` (token ->
    ascending doc ids), ``docs``, ``total_docs``, ``doc_freq``, ``vocab_size``
    and ``user_index`` (user token -> doc ids in time order).
    """

    def __init__(
        self,
        docs: Sequence[BehaviorDoc],
        terms: list[str],
        doc_terms: np.ndarray,
    ) -> None:
        self.docs: dict[int, BehaviorDoc] = {d.doc_id: d for d in docs}
        self.terms = terms
        self.term_id = {t: i for i, t in enumerate(terms)}
        self.total_docs = len(docs)
        self.vocab_size = len(terms)

        n, width = doc_terms.shape if doc_terms.size else (len(docs), 0)
        self.doc_length = width
        ids = np.fromiter((d.doc_id for d in docs), dtype=np.int64, count=n)
        ts = np.fromiter((d.timestamp for d in docs), dtype=np.int64, count=n)
        # rows are kept in ascending doc_id order
        order = np.argsort(ids, kind="stable")
        self._doc_ids = ids[order]
        self._doc_ts = ts[order]
        self._doc_terms = doc_terms[order] if n else doc_terms.reshape(0, 0)

        flat_terms = self._doc_terms.ravel()
        flat_rows = np.repeat(np.arange(n), width)
        by_term = np.lexsort((flat_rows, flat_terms))
        counts = np.bincount(flat_terms, minlength=len(terms)) if n else np.zeros(0, int)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        sorted_ids = self._doc_ids[flat_rows[by_term]]
        self.postings: dict[str, np.ndarray] = {
            t: sorted_ids[bounds[i] : bounds[i + 1]] for i, t in enumerate(terms)
        }
        self.doc_freq: dict[str, int] = {t: int(counts[i]) for i, t in enumerate(terms)}
        self._df = counts.astype(np.float64)
        if n:
            self._idf = np.log((n - self._df + 0.5) / (self._df + 0.5))
        else:
            self._idf = np.zeros(0)

        # user timelines: rows sorted by (timestamp, doc_id)
        self._user_rows: dict[str, np.ndarray] = {}
        self._user_ts: dict[str, np.ndarray] = {}
        self.user_index: dict[str, np.ndarray] = {}
        if n:
            user_col = self._doc_terms[:, 0]
            by_user = np.lexsort((self._doc_ids, self._doc_ts, user_col))
            ucounts = np.bincount(user_col, minlength=len(terms))
            ubounds = np.concatenate([[0], np.cumsum(ucounts)])
            for tid in np.flatnonzero(ucounts):
                rows = by_user[ubounds[tid] : ubounds[tid + 1]]
                tok = terms[tid]
                self._user_rows[tok] = rows
                self._user_ts[tok] = self._doc_ts[rows]
                self.user_index[tok] = self._doc_ids[rows]

    def __repr__(self) -> str:
        return (
            f"Archive(docs={self.total_docs}, features={self.vocab_size}, "
            f"users={len(self.user_index)})"
        )

    def rows_of(self, doc_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        return np.searchsorted(self._doc_ids, np.asarray(doc_ids, dtype=np.int64))

    def term_matrix(self, doc_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        """Archive term ids of the given docs, one row per doc, canonical field order."""
        return self._doc_terms[self.rows_of(doc_ids)]

    def timestamps(self, doc_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        return self._doc_ts[self.rows_of(doc_ids)]

    def history_len(self, user_token: str, cutoff_ts: int) -> int:
        ts = self._user_ts.get(user_token)
        if ts is None:
            return 0
        return int(np.searchsorted(ts, cutoff_ts, side="left"))

    def _history_rows(self, user_token: str, cutoff_ts: int | None) -> np.ndarray:
        rows = self._user_rows.get(user_token)
        if rows is None:
            return np.zeros(0, dtype=np.int64)
        if cutoff_ts is None:
            return rows
        return rows[: np.searchsorted(self._user_ts[user_token], cutoff_ts, side="left")]

    def _score_rows(self, rows: np.ndarray, qmask: np.ndarray) -> np.ndarray:
        # column-by-column accumulation fixes the summation order so that the
        # per-doc and batched paths produce bit-identical scores
        terms = self._doc_terms[rows]
        hit = qmask[terms]
        contrib = np.where(hit, self._idf[terms], 0.0)
        score = np.zeros(len(rows))
        for j in range(terms.shape[1]):
            score = score + contrib[:, j]
        return score


def build_index(docs: Iterable[BehaviorDoc]) -> Archive:
    """Index ``docs``.  Rejects duplicate ids and unequal document lengths."""
    docs = list(docs)
    seen: set[int] = set()
    for d in docs:
        if d.doc_id in seen:
            raise ValueError(f"duplicate doc_id {d.doc_id}")
        seen.add(d.doc_id)
    if not docs:
        return Archive([], [], np.zeros((0, 0), dtype=np.int64))
    width = len(docs[0].tokens)
    term_id: dict[str, int] = {}
    # user tokens first so column 0 always holds the user term
    for d in docs:
        term_id.setdefault(d.user_token, len(term_id))
    for d in docs:
        if len(d.tokens) != width:
            raise ValueError(
                f"doc {d.doc_id} has {len(d.tokens)} tokens, expected {width}"
            )
        for t in d.feature_tokens:
            term_id.setdefault(t, len(term_id))
    mat = np.empty((len(docs), width), dtype=np.int64)
    for i, d in enumerate(docs):
        mat[i] = [term_id[t] for t in d.tokens]
    terms = sorted(term_id, key=term_id.__getitem__)
    return Archive(docs, terms, mat)


def posting(archive: Archive, f: str) -> list[int]:
    p = archive.postings.get(f)
    return [] if p is None else p.tolist()


def idf(archive: Archive, f: str) -> float:
    """``ln((N - N(f) + 0.5) / (N(f) + 0.5))``; negative for very common tokens."""
    if archive.total_docs == 0:
        raise ValueError("idf undefined on an empty archive")
    n = archive.total_docs
    nf = archive.doc_freq.get(f, 0)
    return math.log((n - nf + 0.5) / (nf + 0.5))


def okapi_term(idf_value: float, tf: float, length_ratio: float = 1.0, k1: float = K1, b: float = B) -> float:
    """General Okapi BM25 contribution of one query term."""
    return idf_value * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * length_ratio))


def bm25_score(archive: Archive, query_tokens: Iterable[str], doc: BehaviorDoc) -> float:
    """BM25 with binary tf and unit length ratio, i.e. the sum of matched IDFs.

    With ``tf = 1`` and ``|D| / avgdl = 1`` the Okapi factor is
    ``(k1 + 1) / (1 + k1) = 1``, so only the IDF survives.
    """
    if doc.doc_id in archive.docs and archive.docs[doc.doc_id] == doc:
        row = archive.rows_of([doc.doc_id])
        return float(archive._score_rows(row, _query_mask(archive, query_tokens))[0])
    # doc outside the archive: same closed form, same summation order
    q = set(query_tokens)
    total = 0.0
    for t in doc.tokens:
        if t in q:
            total += idf(archive, t)
    return total


def _query_mask(archive: Archive, tokens: Iterable[str]) -> np.ndarray:
    mask = np.zeros(archive.vocab_size, dtype=bool)
    for t in tokens:
        tid = archive.term_id.get(t)
        if tid is not None:
            mask[tid] = True
    return mask


def _rank(archive: Archive, rows: np.ndarray, scores: np.ndarray, S: int) -> np.ndarray:
    # descending score, then more recent, then smaller doc id
    order = np.lexsort((archive._doc_ids[rows], -archive._doc_ts[rows], -scores))
    return order[:S]


def search(
    archive: Archive,
    query: Query,
    S: int,
    cutoff_ts: int | None,
    stats: SearchStats | None = None,
    strategy: str = "auto",
) -> RetrievedSet:
    """Top-``S`` BM25 search within one user's history strictly before ``cutoff_ts``.

    ``strategy`` picks how the candidate set ``posting(user) ∩ ∪ posting(f)``
    is formed: ``merge`` unions the selected posting lists and intersects
    with the user's list, ``scan`` filters the user's timeline against the
    selected tokens, ``auto`` takes whichever touches fewer entries.  All
    three return identical results.  When no candidate survives, the user's
    most recent ``S`` behaviors are returned with zero scores.
    """
    sel_ids = [archive.term_id[t] for t in query.tokens if t in archive.term_id]
    rows, scores, fallback = search_terms(
        archive, query.user_token, sel_ids, S, cutoff_ts, stats, strategy
    )
    return RetrievedSet(archive._doc_ids[rows].tolist(), scores.tolist(), fallback)


def search_terms(
    archive: Archive,
    user_token: str,
    sel_ids: Sequence[int],
    S: int,
    cutoff_ts: int | None,
    stats: SearchStats | None = None,
    strategy: str = "auto",
) -> tuple[np.ndarray, np.ndarray, bool]:
    """:func:`search` on archive term ids; returns (rows, scores, fallback)."""
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    empty = np.zeros(0, dtype=np.int64)
    user_post = archive.postings.get(user_token)
    if user_post is None or len(user_post) == 0:
        if stats is not None:
            stats.record(0, 0, 0, 0)
        return empty, np.zeros(0), False
    hist = archive._history_rows(user_token, cutoff_ts)
    user_len = len(user_post)
    sel_posts = [archive.postings[archive.terms[i]] for i in sel_ids]
    sel_len = sum(len(p) for p in sel_posts)
    if strategy == "auto":
        strategy = "merge" if user_len + sel_len < len(hist) * archive.doc_length else "scan"

    qmask = np.zeros(archive.vocab_size, dtype=bool)
    qmask[list(sel_ids)] = True
    if strategy == "merge":
        union = np.unique(np.concatenate(sel_posts)) if sel_posts else empty
        cand_ids = np.intersect1d(user_post, union, assume_unique=True)
        rows = archive.rows_of(cand_ids)
        if cutoff_ts is not None:
            rows = rows[archive._doc_ts[rows] < cutoff_ts]
        touched = user_len + sel_len
    elif strategy == "scan":
        rows = hist[qmask[archive._doc_terms[hist]].any(axis=1)] if len(hist) else empty
        touched = len(hist)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    if stats is not None:
        stats.record(touched, len(rows), user_len, sel_len)
    if len(rows) == 0:
        recent_rows = _recent(archive, hist, S)
        return recent_rows, np.zeros(len(recent_rows)), len(hist) > 0
    scores = archive._score_rows(rows, qmask)
    top = _rank(archive, rows, scores, S)
    return rows[top], scores[top], False


def _recent(archive: Archive, hist: np.ndarray, S: int) -> np.ndarray:
    # same tie-break as scored results: newest first, then smaller id
    order = np.lexsort((archive._doc_ids[hist], -archive._doc_ts[hist]))
    return hist[order[:S]]


def recent_rows(archive: Archive, user_token: str, S: int, cutoff_ts: int | None) -> np.ndarray:
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    return _recent(archive, archive._history_rows(user_token, cutoff_ts), S)


def recent(archive: Archive, user_token: str, S: int, cutoff_ts: int | None) -> RetrievedSet:
    """The user's ``S`` most recent behaviors before the cutoff (no scoring)."""
    rows = recent_rows(archive, user_token, S, cutoff_ts)
    return RetrievedSet(archive._doc_ids[rows].tolist(), [0.0] * len(rows))


def save_index(archive: Archive, path: str | Path) -> None:
    """Write the index snapshot.

    Layout (UTF-8 text)::

        UBRIDX1
        <N>\\t<F>
        <token>\\t<id>,<id>,...        F lines, tokens sorted
        #docs
        <doc_id>\\t<ts>\\t<tok>,<tok>,...   N lines, user token first
    """
    lines = [INDEX_MAGIC, f"{archive.total_docs}\t{archive.vocab_size}"]
    for tok in sorted(archive.postings):
        _check_token(tok)
        lines.append(tok + "\t" + ",".join(map(str, archive.postings[tok].tolist())))
    lines.append("#docs")
    for row, did in enumerate(archive._doc_ids.tolist()):
        toks = [archive.terms[t] for t in archive._doc_terms[row]]
        lines.append(f"{did}\t{int(archive._doc_ts[row])}\t{','.join(toks)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path: str | Path) -> Archive:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index snapshot (missing {INDEX_MAGIC})")
    n, f = map(int, text[1].split("\t"))
    sep = text.index("#docs")
    if sep - 2 != f:
        raise ValueError(f"{path}: header claims {f} tokens, found {sep - 2}")
    docs = []
    for line in text[sep + 1 : sep + 1 + n]:
        did, ts, toks = line.split("\t")
        parts = toks.split(",")
        docs.append(BehaviorDoc(int(did), parts[0], tuple(parts[1:]), int(ts)))
    archive = build_index(docs)
    for line in text[2:sep]:
        tok, ids = line.split("\t")
        stored = [int(x) for x in ids.split(",")] if ids else []
        if archive.postings.get(tok, np.zeros(0)).tolist() != stored:
            raise ValueError(f"{path}: posting list for {tok!r} inconsistent with docs")
    return archive


def _check_token(tok: str) -> None:
    if not tok.isascii() or any(c in tok for c in ",\t\n "):
        raise ValueError(f"token {tok!r} must be ASCII without commas or whitespace")
