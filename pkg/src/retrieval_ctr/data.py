"""Behavior logs, calendar context features, vocabularies and temporal splits."""

from __future__ import annotations

import csv
import datetime as dt
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .archive import BehaviorDoc, Query, search

CONTEXT_FIELDS = ("season", "daytype", "monthhalf")
_SEASONS = {12: "winter", 1: "winter", 2: "winter", 3: "spring", 4: "spring", 5: "spring",
            6: "summer", 7: "summer", 8: "summer", 9: "autumn", 10: "autumn", 11: "autumn"}
CONTEXT_TOKENS = (
    "season_spring", "season_summer", "season_autumn", "season_winter",
    "daytype_weekday", "daytype_weekend",
    "monthhalf_first_half", "monthhalf_second_half",
)


def token(field_name: str, value) -> str:
    return f"{field_name}_{value}"


@dataclass(frozen=True)
class BehaviorLogRecord:
    user_id: str
    item: tuple[tuple[str, str], ...]  # (field, value) in header order
    timestamp: int

    @property
    def item_id(self) -> str:
        return self.item[0][1]

    def item_tokens(self) -> tuple[str, ...]:
        return tuple(token(f, v) for f, v in self.item)


@dataclass(frozen=True)
class PredictionTarget:
    """A (user, item, context) triple to score.

    The first user token is the user id; it anchors retrieval and is never a
    selection candidate.
    """

    target_id: int
    user_tokens: tuple[str, ...]
    item_tokens: tuple[str, ...]
    context_tokens: tuple[str, ...]
    timestamp: int
    label: int | None = None

    @property
    def user_token(self) -> str:
        return self.user_tokens[0]

    @property
    def candidate_tokens(self) -> tuple[str, ...]:
        return self.user_tokens[1:] + self.item_tokens + self.context_tokens

    @property
    def all_tokens(self) -> tuple[str, ...]:
        return self.user_tokens + self.item_tokens + self.context_tokens


class LogParseError(ValueError):
    def __init__(self, path, errors: list[str]):
        self.errors = errors
        super().__init__(f"{path}: {len(errors)} malformed line(s): " + "; ".join(errors[:5]))


# --------------------------------------------------------------------------
# log io


def parse_log(path: str | Path, errors: list[str] | None = None) -> list[BehaviorLogRecord]:
    """Read a header-first CSV log ``user,<item fields...>,timestamp``.

    Malformed lines are reported with their line number: appended to
    ``errors`` when a list is given, otherwise raised together as
    :class:`LogParseError` after the whole file has been read.
    """
    report: list[str] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "timestamp" or len(header) < 3:
            raise ValueError(f"{path}: missing header 'user,<item fields>,timestamp'")
        item_fields = header[1:-1]
        out: list[BehaviorLogRecord] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                report.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            if any(v == "" for v in row):
                report.append(f"line {lineno}: empty field value")
                continue
            try:
                ts = int(row[-1])
            except ValueError:
                report.append(f"line {lineno}: bad timestamp {row[-1]!r}")
                continue
            out.append(BehaviorLogRecord(row[0], tuple(zip(item_fields, row[1:-1])), ts))
    if report:
        if errors is None:
            raise LogParseError(path, report)
        errors.extend(report)
    return out


def write_log(path: str | Path, records: Sequence[BehaviorLogRecord], user_field: str = "user_id") -> None:
    if not records:
        raise ValueError("cannot infer item fields from an empty record list")
    fields = [f for f, _ in records[0].item]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([user_field, *fields, "timestamp"])
    for r in records:
        w.writerow([r.user_id, *(v for _, v in r.item), r.timestamp])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------------
# context


def derive_context(ts: int) -> tuple[str, str, str]:
    """Season (meteorological), weekend flag and month half of a UTC timestamp."""
    d = dt.datetime.fromtimestamp(int(ts), tz=dt.timezone.utc)
    season = _SEASONS[d.month]
    daytype = "weekend" if d.weekday() >= 5 else "weekday"
    half = "first_half" if d.day <= 15 else "second_half"
    return (token("season", season), token("daytype", daytype), token("monthhalf", half))


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Dense token ids starting at 1; id 0 is padding / unknown."""

    def __init__(self, tokens: Iterable[str] = ()) -> None:
        self._ids: dict[str, int] = {}
        self.tokens: list[str] = ["<pad>"]
        for t in tokens:
            self.add(t)

    def add(self, tok: str) -> int:
        i = self._ids.get(tok)
        if i is None:
            i = len(self.tokens)
            self._ids[tok] = i
            self.tokens.append(tok)
        return i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._ids

    def id(self, tok: str) -> int:
        return self._ids.get(tok, 0)

    def ids(self, toks: Iterable[str]) -> list[int]:
        return [self._ids.get(t, 0) for t in toks]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens[1:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(t for t in lines if t)


# --------------------------------------------------------------------------
# catalog, splits, negatives


@dataclass
class Catalog:
    """Item id -> item feature tokens (canonical field order)."""

    items: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_records(cls, records: Iterable[BehaviorLogRecord]) -> "Catalog":
        cat = cls()
        for r in records:
            cat.items.setdefault(r.item_id, r.item_tokens())
        return cat

    def write(self, path: str | Path, fields: Sequence[str]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for toks in self.items.values():
            w.writerow([t[len(f) + 1 :] for f, t in zip(fields, toks)])
        Path(path).write_text(buf.getvalue(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Catalog":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        fields = rows[0]
        cat = cls()
        for row in rows[1:]:
            cat.items[row[0]] = tuple(token(f, v) for f, v in zip(fields, row))
        return cat


@dataclass
class Split:
    train: list[PredictionTarget]
    valid: list[PredictionTarget]
    test: list[PredictionTarget]
    docs: list[BehaviorDoc]
    dropped_users: int = 0
    # user token -> its behaviors in time order (doc ids), for leakage scans
    timelines: dict[str, list[int]] = field(default_factory=dict)


def temporal_split(records: Iterable[BehaviorLogRecord], user_field: str = "user_id") -> Split:
    """Per user of length T: train target = step T-2, valid = T-1, test = T.

    Every behavior becomes an archive document; histories are enforced at
    search time through the target timestamp.  Users with T < 4 are dropped
    (their behaviors are not indexed either).
    """
    by_user: dict[str, list[BehaviorLogRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    train, valid, test, docs = [], [], [], []
    timelines: dict[str, list[int]] = {}
    dropped = 0
    for user in sorted(by_user):
        seq = sorted(by_user[user], key=lambda r: r.timestamp)
        if len(seq) < 4:
            dropped += 1
            continue
        utok = token(user_field, user)
        ids = []
        for r in seq:
            doc = BehaviorDoc(len(docs), utok, r.item_tokens() + derive_context(r.timestamp), r.timestamp)
            docs.append(doc)
            ids.append(doc.doc_id)
        timelines[utok] = ids
        T = len(seq)
        for bucket, step in ((train, T - 2), (valid, T - 1), (test, T)):
            r = seq[step - 1]
            bucket.append(
                PredictionTarget(len(bucket), (utok,), r.item_tokens(), derive_context(r.timestamp), r.timestamp, 1)
            )
    return Split(train, valid, test, docs, dropped, timelines)


def clicked_items(records: Iterable[BehaviorLogRecord], user_field: str = "user_id") -> dict[str, set[str]]:
    out: dict[str, set[str]] = defaultdict(set)
    for r in records:
        out[token(user_field, r.user_id)].add(r.item_id)
    return out


def sample_negatives(
    positives: Sequence[PredictionTarget],
    catalog: Catalog,
    ratio: int,
    rng: np.random.Generator,
    clicked: dict[str, set[str]],
    exclude: Callable[[PredictionTarget], set[str]] | None = None,
) -> list[PredictionTarget]:
    """Interleave each positive with ``ratio`` negatives (label 0).

    A negative keeps the positive's user, context and timestamp and swaps in
    an item drawn uniformly from the catalog items the user never clicked
    (and not in ``exclude(positive)`` when given).  Target ids are renumbered
    densely.
    """
    if ratio < 1 or int(ratio) != ratio:
        raise ValueError(f"ratio must be a positive integer, got {ratio}")
    item_ids = list(catalog.items)
    out: list[PredictionTarget] = []
    for pos in positives:
        banned = clicked.get(pos.user_token, set())
        if exclude is not None:
            banned = banned | exclude(pos)
        n_allowed = len(item_ids) - sum(1 for i in banned if i in catalog.items)
        if n_allowed < ratio:
            raise ValueError(
                f"catalog has {n_allowed} eligible items for {pos.user_token}, need {ratio}"
            )
        chosen: list[str] = []
        while len(chosen) < ratio:
            cand = item_ids[int(rng.integers(len(item_ids)))]
            if cand not in banned and cand not in chosen:
                chosen.append(cand)
        out.append(_renumber(pos, len(out), 1))
        for item in chosen:
            out.append(
                PredictionTarget(len(out), pos.user_tokens, catalog.items[item], pos.context_tokens, pos.timestamp, 0)
            )
    return out


def _renumber(t: PredictionTarget, tid: int, label: int | None) -> PredictionTarget:
    return PredictionTarget(tid, t.user_tokens, t.item_tokens, t.context_tokens, t.timestamp, label)


# --------------------------------------------------------------------------
# target manifests


def write_targets(path: str | Path, targets: Sequence[PredictionTarget]) -> None:
    """CSV ``target_id,user,item_tokens,context_tokens,ts,label``; token lists space-joined."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target_id", "user", "item_tokens", "context_tokens", "ts", "label"])
    for t in targets:
        w.writerow([
            t.target_id, " ".join(t.user_tokens), " ".join(t.item_tokens),
            " ".join(t.context_tokens), t.timestamp, "" if t.label is None else t.label,
        ])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_targets(path: str | Path) -> list[PredictionTarget]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["target_id", "user", "item_tokens", "context_tokens", "ts", "label"]:
            raise ValueError(f"{path}: unexpected targets header {header}")
        out = []
        for row in reader:
            label = None if row[5] == "" else int(row[5])
            out.append(PredictionTarget(
                int(row[0]), tuple(row[1].split()), tuple(row[2].split()),
                tuple(row[3].split()), int(row[4]), label,
            ))
    return out


@dataclass
class Dataset:
    """Everything a training run consumes."""

    split: Split
    train: list[PredictionTarget]
    valid: list[PredictionTarget]
    test: list[PredictionTarget]
    vocab: Vocabulary
    catalog: Catalog


def build_vocabulary(docs: Iterable[BehaviorDoc], catalog: Catalog, extra: Iterable[str] = ()) -> Vocabulary:
    vocab = Vocabulary()
    for d in docs:
        for t in d.tokens:
            vocab.add(t)
    for toks in catalog.items.values():
        for t in toks:
            vocab.add(t)
    for t in CONTEXT_TOKENS:
        vocab.add(t)
    for t in extra:
        vocab.add(t)
    return vocab


def prepare_dataset(
    records: Sequence[BehaviorLogRecord],
    catalog: Catalog,
    rng: np.random.Generator,
    ratio: int = 1,
    exclude: Callable[[PredictionTarget], set[str]] | None = None,
) -> Dataset:
    split = temporal_split(records)
    clicked = clicked_items(records)
    labeled = [sample_negatives(s, catalog, ratio, rng, clicked, exclude) for s in (split.train, split.valid, split.test)]
    vocab = build_vocabulary(split.docs, catalog)
    return Dataset(split, *labeled, vocab=vocab, catalog=catalog)


def leakage_violations(split: Split, targets: Iterable[PredictionTarget], archive) -> int:
    """Count history docs that are not strictly earlier than their target."""
    bad = 0
    for t in targets:
        hist = archive.user_index.get(t.user_token, np.zeros(0, dtype=np.int64))
        n = archive.history_len(t.user_token, t.timestamp)
        if len(hist) and np.any(archive.timestamps(hist[:n]) >= t.timestamp):
            bad += 1
        res = search(archive, Query(t.user_token, t.candidate_tokens), 10_000, t.timestamp)
        if res.doc_ids and np.any(archive.timestamps(res.doc_ids) >= t.timestamp):
            bad += 1
    return bad
