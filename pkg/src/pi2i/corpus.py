"""Interaction log ingestion, per-user histories and leave-last-out splits.

Log rows are ``user_id <TAB> item_id <TAB> timestamp [<TAB> key=value ...]``
with no header.  CSV input uses the same column order.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

log = logging.getLogger(__name__)

# side-info fields understood by the scorer; anything else is kept as a string
CATEGORICAL_FIELDS = ("seller_id", "brand_id", "category_id")
NUMERIC_FIELDS = ("price",)

MAX_MALFORMED_FRACTION = 0.5


class MalformedInputError(ValueError):
    """Raised when too many rows of an interaction file cannot be parsed."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    side_info: Mapping[str, str | float] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0:
            raise ValueError(f"negative id in {self!r}")


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    events: tuple[Interaction, ...]

    @property
    def items(self) -> tuple[int, ...]:
        return tuple(e.item_id for e in self.events)

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class Query:
    """One next-item prediction query: what the user clicked before, and what came next."""

    user_id: int
    context: tuple[int, ...]
    target: int
    timestamp: int

    @property
    def truth(self) -> frozenset[int]:
        return frozenset((self.target,))


@dataclass(frozen=True)
class DatasetSplit:
    """Event-disjoint split.

    ``valid_histories`` and ``test_histories`` hold exactly one event per user
    (the target); the context for a target is every earlier event of that user,
    which :meth:`queries` reassembles.
    """

    train_histories: tuple[UserHistory, ...]
    valid_histories: tuple[UserHistory, ...]
    test_histories: tuple[UserHistory, ...]
    item_vocab: frozenset[int]
    user_vocab: frozenset[int]

    def queries(self, which: str = "test") -> list[Query]:
        train = {h.user_id: h for h in self.train_histories}
        valid = {h.user_id: h for h in self.valid_histories}
        if which == "valid":
            return [
                Query(h.user_id, train[h.user_id].items, h.events[0].item_id, h.events[0].timestamp)
                for h in self.valid_histories
            ]
        if which != "test":
            raise ValueError(f"unknown split {which!r}")
        return [
            Query(
                h.user_id,
                train[h.user_id].items + valid[h.user_id].items,
                h.events[0].item_id,
                h.events[0].timestamp,
            )
            for h in self.test_histories
        ]

    def full_histories(self) -> list[UserHistory]:
        """Train, valid and test events merged back into one history per user."""
        parts = defaultdict(list)
        for group in (self.train_histories, self.valid_histories, self.test_histories):
            for h in group:
                parts[h.user_id].extend(h.events)
        return [UserHistory(u, tuple(parts[u])) for u in sorted(parts)]


class Vocabulary:
    """Raw string id -> dense integer id, assigned in first-seen order."""

    def __init__(self, raw_ids: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        for raw in raw_ids:
            self.add(raw)

    def add(self, raw: str) -> int:
        dense = self._ids.get(raw)
        if dense is None:
            dense = self._ids[raw] = len(self._ids)
        return dense

    def __getitem__(self, raw: str) -> int:
        return self._ids[raw]

    def __contains__(self, raw: str) -> bool:
        return raw in self._ids

    def __len__(self):
        return len(self._ids)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._ids == other._ids

    def items(self):
        return self._ids.items()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for raw, dense in self._ids.items():
                f.write(f"{raw}\t{dense}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                raw, dense = line.split("\t")
                if vocab.add(raw) != int(dense):
                    raise ValueError(f"{path}:{lineno}: dense ids must be 0..n-1 in file order")
        return vocab


class LoadResult(NamedTuple):
    interactions: list[Interaction]
    n_malformed: int


def _parse_side_info(cols: Sequence[str]) -> dict[str, str | float]:
    side: dict[str, str | float] = {}
    for col in cols:
        key, sep, value = col.partition("=")
        if not sep or not key:
            raise ValueError(f"side-info column {col!r} is not key=value")
        if key in NUMERIC_FIELDS:
            number = float(value)
            if not math.isfinite(number):
                raise ValueError(f"non-finite {key}")
            side[key] = number
        else:
            side[key] = value
    return side


def _parse_id(raw: str, vocab: Vocabulary | None) -> int:
    if vocab is not None:
        return vocab.add(raw)
    return int(raw)


def _parse_rows(rows: Iterable[list[str]], users: Vocabulary | None, items: Vocabulary | None) -> LoadResult:
    out: list[Interaction] = []
    bad = 0
    for cols in rows:
        if not cols or cols == [""]:
            continue
        try:
            if len(cols) < 3:
                raise ValueError("fewer than 3 columns")
            ts = int(cols[2])
            side = _parse_side_info(cols[3:])
            out.append(Interaction(_parse_id(cols[0], users), _parse_id(cols[1], items), ts, side))
        except ValueError as exc:
            bad += 1
            log.debug("skipping malformed row %r: %s", cols, exc)
    return LoadResult(out, bad)


def load_interactions(
    path: str | Path,
    format: str = "tsv",
    users: Vocabulary | None = None,
    items: Vocabulary | None = None,
) -> LoadResult:
    """Read an interaction log, preserving row order.

    Without vocabularies the id columns must already be non-negative integers;
    with them, raw ids are mapped to dense ids (and the vocabularies grow).
    Malformed rows are skipped and counted; more than half malformed is fatal.
    """
    if format not in ("tsv", "csv"):
        raise ValueError(f"unsupported format {format!r}")
    with open(path, encoding="utf-8", newline="") as f:
        if format == "tsv":
            rows = (line.rstrip("\r\n").split("\t") for line in f)
            result = _parse_rows(rows, users, items)
        else:
            result = _parse_rows(csv.reader(f), users, items)
    total = len(result.interactions) + result.n_malformed
    if result.n_malformed:
        log.warning("%s: skipped %d malformed of %d rows", path, result.n_malformed, total)
    if total and result.n_malformed / total > MAX_MALFORMED_FRACTION:
        raise MalformedInputError(f"{path}: {result.n_malformed} of {total} rows are malformed")
    return result


def load_sharded(paths: Sequence[str | Path], format: str = "tsv", threads: int = 1) -> LoadResult:
    """Load several shards (integer ids only) and concatenate them in the given path order."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(lambda p: load_interactions(p, format), paths))
    merged = [x for part in parts for x in part.interactions]
    return LoadResult(merged, sum(p.n_malformed for p in parts))


def _format_value(value: str | float) -> str:
    return repr(value) if isinstance(value, float) else value


def write_interactions(path: str | Path, interactions: Iterable[Interaction]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for x in interactions:
            cols = [str(x.user_id), str(x.item_id), str(x.timestamp)]
            cols += [f"{k}={_format_value(v)}" for k, v in sorted(x.side_info.items())]
            f.write("\t".join(cols) + "\n")


def write_histories(path: str | Path, histories: Iterable[UserHistory]) -> None:
    write_interactions(path, (e for h in histories for e in h.events))


def build_histories(interactions: Iterable[Interaction]) -> list[UserHistory]:
    """Group events by user, each history sorted by (timestamp, item_id); users ascending."""
    by_user: dict[int, list[Interaction]] = defaultdict(list)
    for x in interactions:
        by_user[x.user_id].append(x)
    return [
        UserHistory(u, tuple(sorted(by_user[u], key=lambda e: (e.timestamp, e.item_id))))
        for u in sorted(by_user)
    ]


def split_leave_last(histories: Sequence[UserHistory], min_len: int = 3) -> DatasetSplit:
    """Last event -> test target, second-to-last -> valid target, the rest -> train.

    Histories shorter than ``min_len`` go to train whole and yield no targets.
    """
    if min_len < 3:
        raise ValueError("min_len must be >= 3")
    train, valid, test = [], [], []
    items: set[int] = set()
    for h in histories:
        items.update(h.items)
        if len(h) < min_len:
            train.append(h)
            continue
        train.append(UserHistory(h.user_id, h.events[:-2]))
        valid.append(UserHistory(h.user_id, h.events[-2:-1]))
        test.append(UserHistory(h.user_id, h.events[-1:]))
    return DatasetSplit(
        tuple(train),
        tuple(valid),
        tuple(test),
        frozenset(items),
        frozenset(h.user_id for h in histories),
    )


def item_side_info(interactions: Iterable[Interaction]) -> dict[int, dict[str, str | float]]:
    """First-seen side info per item (later rows fill only missing keys)."""
    attrs: dict[int, dict[str, str | float]] = {}
    for x in interactions:
        if not x.side_info:
            continue
        slot = attrs.setdefault(x.item_id, {})
        for k, v in x.side_info.items():
            slot.setdefault(k, v)
    return attrs
