"""Swing item-to-item index construction.

The score of an item pair sums, over ordered pairs of users who clicked both
items, ``w_u * w_v / (alpha + |I_u & I_v|)`` where ``w_u = 1/sqrt(|I_u|)`` when
user weighting is on.  Terms for one item pair are always accumulated in
lexicographic ``(u, v)`` order, so the float result does not depend on how the
work is partitioned and structurally tied pairs get bit-identical scores.
"""

from __future__ import annotations

import hashlib
import io
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import UserHistory

DEFAULT_ALPHA = 1.0
DEFAULT_TRUNCATION = 1250
DEFAULT_USER_CAP = 500

FORMAT_VERSION = "v1"
_MAGIC = "#pi2i-index"


class IndexFormatError(ValueError):
    pass


def capped_sequence(items: Sequence[int], user_cap: int | None) -> list[int]:
    """Drop events of items outside the user's ``user_cap`` most recently clicked distinct items."""
    if user_cap is None or user_cap <= 0:
        return list(items)
    keep: set[int] = set()
    for item in reversed(items):
        if len(keep) >= user_cap:
            break
        keep.add(item)
    return [i for i in items if i in keep]


@dataclass(frozen=True, eq=False)
class CoClickStats:
    """Who clicked what, and how many users co-clicked each item pair.

    Pair counts are stored once per unordered pair in ``pair_keys`` order
    (``pair_i < pair_j``); :meth:`coclick_count` answers in either order.
    """

    users_by_item: dict[int, frozenset[int]]
    items_by_user: dict[int, frozenset[int]]
    pair_i: np.ndarray
    pair_j: np.ndarray
    counts: np.ndarray
    window: int | None = None
    # windowed mode only: sorted users supporting each pair, aligned with pair_i/pair_j
    pair_users: tuple[tuple[int, ...], ...] | None = field(default=None, repr=False)

    @property
    def n_pairs(self) -> int:
        return len(self.counts)

    def _find(self, i: int, j: int) -> int:
        a, b = (i, j) if i < j else (j, i)
        lo = np.searchsorted(self.pair_i, a, side="left")
        hi = np.searchsorted(self.pair_i, a, side="right")
        pos = lo + np.searchsorted(self.pair_j[lo:hi], b)
        if pos < hi and self.pair_j[pos] == b:
            return int(pos)
        return -1

    def coclick_count(self, i: int, j: int) -> int:
        pos = self._find(i, j)
        return 0 if pos < 0 else int(self.counts[pos])

    def shared_users(self, i: int, j: int) -> tuple[int, ...]:
        if self.pair_users is None:
            return tuple(sorted(self.users_by_item.get(i, frozenset()) & self.users_by_item.get(j, frozenset())))
        pos = self._find(i, j)
        return () if pos < 0 else self.pair_users[pos]

    def pairs(self) -> Iterator[tuple[int, int, int]]:
        for i, j, c in zip(self.pair_i.tolist(), self.pair_j.tolist(), self.counts.tolist()):
            yield i, j, c


def accumulate_coclicks(
    histories: Sequence[UserHistory],
    window: int | None = None,
    user_cap: int | None = DEFAULT_USER_CAP,
) -> CoClickStats:
    """Collect user/item sets and co-click counts.

    Repeated clicks on an item count once.  With ``window`` set, two items
    co-occur for a user only if some clicks of them are at most ``window``
    positions apart in the user's (capped) history.
    """
    if window is not None and window < 1:
        raise ValueError("window must be >= 1")
    users_by_item: dict[int, set[int]] = {}
    items_by_user: dict[int, frozenset[int]] = {}
    keys_i, keys_j, owners = [], [], []
    for h in sorted(histories, key=lambda h: h.user_id):
        seq = capped_sequence(h.items, user_cap)
        if not seq:
            continue
        item_set = frozenset(seq)
        items_by_user[h.user_id] = item_set | items_by_user.get(h.user_id, frozenset())
        for item in item_set:
            users_by_item.setdefault(item, set()).add(h.user_id)
        if window is None:
            arr = np.array(sorted(item_set), dtype=np.int64)
            a, b = np.triu_indices(len(arr), k=1)
            pi, pj = arr[a], arr[b]
        else:
            found = set()
            for pos, x in enumerate(seq):
                for y in seq[pos + 1 : pos + 1 + window]:
                    if x != y:
                        found.add((min(x, y), max(x, y)))
            ordered = sorted(found)
            pi = np.array([p[0] for p in ordered], dtype=np.int64)
            pj = np.array([p[1] for p in ordered], dtype=np.int64)
        keys_i.append(pi)
        keys_j.append(pj)
        owners.append(np.full(len(pi), h.user_id, dtype=np.int64))

    if keys_i:
        all_i = np.concatenate(keys_i)
        all_j = np.concatenate(keys_j)
        all_u = np.concatenate(owners)
    else:
        all_i = all_j = all_u = np.zeros(0, dtype=np.int64)
    order = np.lexsort((all_u, all_j, all_i))
    all_i, all_j, all_u = all_i[order], all_j[order], all_u[order]
    if len(all_i):
        new = np.ones(len(all_i), dtype=bool)
        new[1:] = (all_i[1:] != all_i[:-1]) | (all_j[1:] != all_j[:-1])
        starts = np.flatnonzero(new)
        counts = np.diff(np.append(starts, len(all_i))).astype(np.int64)
        pair_i, pair_j = all_i[starts], all_j[starts]
    else:
        starts = np.zeros(0, dtype=np.int64)
        counts = np.zeros(0, dtype=np.int64)
        pair_i = pair_j = np.zeros(0, dtype=np.int64)

    pair_users = None
    if window is not None:
        bounds = np.append(starts, len(all_u))
        users_list = all_u.tolist()
        pair_users = tuple(tuple(users_list[bounds[k] : bounds[k + 1]]) for k in range(len(starts)))

    return CoClickStats(
        {i: frozenset(us) for i, us in users_by_item.items()},
        items_by_user,
        pair_i,
        pair_j,
        counts,
        window,
        pair_users,
    )


def _user_weight(stats: CoClickStats, u: int, weighted: bool) -> float:
    return 1.0 / math.sqrt(len(stats.items_by_user[u])) if weighted else 1.0


def swing_score(
    i: int,
    j: int,
    stats: CoClickStats,
    alpha: float = DEFAULT_ALPHA,
    weighted: bool = True,
    exclude_self_pairs: bool = False,
) -> float:
    """Swing similarity of a single item pair (symmetric, >= 0)."""
    if i == j:
        raise ValueError("swing_score is undefined for an item with itself")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    shared = stats.shared_users(i, j)
    score = 0.0
    for u in shared:
        w_u = _user_weight(stats, u, weighted)
        for v in shared:
            if exclude_self_pairs and u == v:
                continue
            w_v = _user_weight(stats, v, weighted)
            overlap = len(stats.items_by_user[u] & stats.items_by_user[v])
            score += w_u * w_v / (alpha + overlap)
    return score


def _concat_ranges(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + n)`` for each (s, n)."""
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return offsets + np.arange(total)


def _within_group_pairs(group_start: np.ndarray, group_len: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (left, right) positions with left < right inside each contiguous group, groups in order.

    Also returns the group index of every pair.
    """
    n = int(group_len.sum())
    member_group = np.repeat(np.arange(len(group_len)), group_len)
    pos = np.arange(n)
    after = np.repeat(group_start + group_len, group_len) - pos - 1
    left = np.repeat(pos, after)
    right = left + 1 + _concat_ranges(np.zeros(n, dtype=np.int64), after)
    return left, right, member_group[left]


def _pair_scores_by_user_pairs(
    stats: CoClickStats,
    alpha: float,
    weighted: bool,
    exclude_self_pairs: bool,
    chunk_triples: int = 4_000_000,
) -> np.ndarray:
    """Scores for every stored pair, accumulated per ordered user pair.

    For users u, v with common items C, every item pair inside C receives the
    same term.  (u, v, item) triples are enumerated and sorted so that each
    item pair receives its terms in lexicographic (u, v) order, which is the
    order of the per-pair double loop.
    """
    scores = np.zeros(stats.n_pairs)
    if stats.n_pairs == 0:
        return scores
    item_ids = np.array(sorted(stats.users_by_item), dtype=np.int64)
    user_ids = np.array(sorted(stats.items_by_user), dtype=np.int64)
    n_items = len(item_ids)
    slot_keys = np.searchsorted(item_ids, stats.pair_i) * n_items + np.searchsorted(item_ids, stats.pair_j)

    cols = [np.searchsorted(item_ids, np.array(sorted(stats.items_by_user[u]), dtype=np.int64)) for u in user_ids.tolist()]
    sizes = np.array([len(c) for c in cols], dtype=np.int64)
    X = sp.csr_matrix(
        (np.ones(int(sizes.sum())), np.concatenate(cols), np.concatenate([[0], np.cumsum(sizes)])),
        shape=(len(user_ids), n_items),
    )
    Xt = X.T.tocsr()
    Xt.sort_indices()
    item_deg = np.diff(Xt.indptr)
    weights = 1.0 / np.sqrt(sizes) if weighted else np.ones(len(user_ids))
    row_load = np.add.reduceat(item_deg[X.indices], X.indptr[:-1]) if X.nnz else np.zeros(len(user_ids), dtype=np.int64)

    r0 = 0
    while r0 < len(user_ids):
        r1 = r0 + 1
        load = row_load[r0]
        while r1 < len(user_ids) and load + row_load[r1] <= chunk_triples:
            load += row_load[r1]
            r1 += 1
        lo, hi = X.indptr[r0], X.indptr[r1]
        items = X.indices[lo:hi].astype(np.int64)
        owners = np.repeat(np.arange(r0, r1), np.diff(X.indptr[r0 : r1 + 1]))
        deg = item_deg[items]
        u = np.repeat(owners, deg)
        i = np.repeat(items, deg)
        v = Xt.indices[_concat_ranges(Xt.indptr[items].astype(np.int64), deg)].astype(np.int64)
        if exclude_self_pairs:
            keep = u != v
            u, v, i = u[keep], v[keep], i[keep]
        order = np.lexsort((i, v, u))
        u, v, i = u[order], v[order], i[order]
        r0 = r1
        if len(u) == 0:
            continue
        new = np.ones(len(u), dtype=bool)
        new[1:] = (u[1:] != u[:-1]) | (v[1:] != v[:-1])
        g_start = np.flatnonzero(new)
        g_len = np.diff(np.append(g_start, len(u)))
        big = g_len >= 2
        if not big.any():
            continue
        # drop singleton groups, keeping the survivors contiguous and in order
        member = np.repeat(big, g_len)
        u, v, i = u[member], v[member], i[member]
        g_len = g_len[big]
        g_start = np.concatenate([[0], np.cumsum(g_len)[:-1]])
        left, right, grp = _within_group_pairs(g_start, g_len)
        gu, gv = u[g_start], v[g_start]
        term = weights[gu] * weights[gv] / (alpha + g_len)
        keys = i[left] * n_items + i[right]
        np.add.at(scores, np.searchsorted(slot_keys, keys), term[grp])
    return scores


def _pair_scores_direct(stats: CoClickStats, alpha: float, weighted: bool, exclude_self_pairs: bool) -> np.ndarray:
    return np.array(
        [swing_score(i, j, stats, alpha, weighted, exclude_self_pairs) for i, j, _ in stats.pairs()],
        dtype=np.float64,
    )


class IndexEntry(NamedTuple):
    target: int
    score: float
    rank: int


class _EntriesView(Mapping):
    def __init__(self, table: "I2ITable"):
        self._table = table

    def __getitem__(self, trigger):
        targets, scores = self._table.row(trigger)
        if len(targets) == 0 and trigger not in self._table:
            raise KeyError(trigger)
        return tuple(IndexEntry(t, s, r) for r, (t, s) in enumerate(zip(targets.tolist(), scores.tolist()), 1))

    def __iter__(self):
        return iter(self._table.triggers.tolist())

    def __len__(self):
        return len(self._table.triggers)


@dataclass(frozen=True, eq=False)
class I2ITable:
    """Trigger -> ranked, truncated target list, stored CSR-style.

    Row ``k`` of trigger ``triggers[k]`` is ``targets[indptr[k]:indptr[k+1]]``
    (rank 1 first) with matching ``scores``.
    """

    triggers: np.ndarray
    indptr: np.ndarray
    targets: np.ndarray
    scores: np.ndarray
    truncation_size: int
    alpha: float = DEFAULT_ALPHA
    weighted: bool = True
    exclude_self_pairs: bool = False
    vocab_hash: str = ""
    _rows: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_entries(cls, entries: Mapping[int, Sequence[tuple[int, float]]], truncation_size: int, **meta) -> "I2ITable":
        """Build from ``{trigger: [(target, score), ...]}`` given in rank order."""
        triggers = sorted(t for t, row in entries.items() if len(row))
        indptr = [0]
        targets, scores = [], []
        for t in triggers:
            row = list(entries[t])
            targets.extend(int(x[0]) for x in row)
            scores.extend(float(x[1]) for x in row)
            indptr.append(len(targets))
        return cls(
            np.array(triggers, dtype=np.int64),
            np.array(indptr, dtype=np.int64),
            np.array(targets, dtype=np.int64),
            np.array(scores, dtype=np.float64),
            truncation_size,
            **meta,
        )

    @property
    def entries(self) -> Mapping[int, tuple[IndexEntry, ...]]:
        return _EntriesView(self)

    def __contains__(self, trigger) -> bool:
        return trigger in self._slots

    @cached_property
    def _slots(self) -> dict[int, int]:
        return {t: k for k, t in enumerate(self.triggers.tolist())}

    @cached_property
    def _score_list(self) -> list[float]:
        return self.scores.tolist()

    def _slot(self, trigger: int) -> int:
        return self._slots.get(trigger, -1)

    def row(self, trigger: int) -> tuple[np.ndarray, np.ndarray]:
        k = self._slot(trigger)
        if k < 0:
            return self.targets[:0], self.scores[:0]
        lo, hi = self.indptr[k], self.indptr[k + 1]
        return self.targets[lo:hi], self.scores[lo:hi]

    def positions(self, trigger: int) -> dict[int, int]:
        """target -> 0-based position in the trigger's list (cached)."""
        pos = self._rows.get(trigger)
        if pos is None:
            targets, _ = self.row(trigger)
            pos = self._rows[trigger] = {t: p for p, t in enumerate(targets.tolist())}
        return pos

    def lookup(self, trigger: int, target: int) -> tuple[int, float] | None:
        """(1-based rank, score) of ``target`` in ``trigger``'s list, if present."""
        pos = self.positions(trigger).get(target)
        if pos is None:
            return None
        return pos + 1, self._score_list[int(self.indptr[self._slots[trigger]]) + pos]

    def truncate(self, T: int) -> "I2ITable":
        """Keep the first ``T`` entries of every list."""
        if T < 1:
            raise ValueError("T must be >= 1")
        lengths = np.minimum(np.diff(self.indptr), T)
        keep = np.concatenate([np.arange(lo, lo + n) for lo, n in zip(self.indptr[:-1], lengths)]) if len(lengths) else np.zeros(0, dtype=np.int64)
        keep = keep.astype(np.int64)
        return I2ITable(
            self.triggers.copy(),
            np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
            self.targets[keep],
            self.scores[keep],
            T,
            self.alpha,
            self.weighted,
            self.exclude_self_pairs,
            self.vocab_hash,
        )

    @property
    def n_entries(self) -> int:
        return len(self.targets)

    def item_set(self) -> set[int]:
        return set(self.triggers.tolist()) | set(self.targets.tolist())

    def __eq__(self, other):
        if not isinstance(other, I2ITable):
            return NotImplemented
        return (
            self.truncation_size == other.truncation_size
            and self.alpha == other.alpha
            and self.weighted == other.weighted
            and self.exclude_self_pairs == other.exclude_self_pairs
            and self.vocab_hash == other.vocab_hash
            and np.array_equal(self.triggers, other.triggers)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.scores, other.scores)
        )


def table_from_pair_scores(
    pair_i: np.ndarray,
    pair_j: np.ndarray,
    scores: np.ndarray,
    T: int,
    min_score: float = 0.0,
    **meta,
) -> I2ITable:
    """Rank each item's neighbors by (score desc, item asc) and keep the top ``T``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    keep = (scores > 0) & (scores >= min_score)
    pi, pj, s = pair_i[keep], pair_j[keep], scores[keep]
    trig = np.concatenate([pi, pj])
    targ = np.concatenate([pj, pi])
    sc = np.concatenate([s, s])
    order = np.lexsort((targ, -sc, trig))
    trig, targ, sc = trig[order], targ[order], sc[order]
    if len(trig) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return I2ITable(empty, np.zeros(1, dtype=np.int64), empty, np.zeros(0), T, **meta)
    first = np.ones(len(trig), dtype=bool)
    first[1:] = trig[1:] != trig[:-1]
    starts = np.flatnonzero(first)
    rank0 = np.arange(len(trig)) - np.repeat(starts, np.diff(np.append(starts, len(trig))))
    sel = rank0 < T
    trig, targ, sc = trig[sel], targ[sel], sc[sel]
    triggers, counts = np.unique(trig, return_counts=True)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return I2ITable(triggers.astype(np.int64), indptr, targ.astype(np.int64), sc.astype(np.float64), T, **meta)


def build_index(
    histories: Sequence[UserHistory],
    alpha: float = DEFAULT_ALPHA,
    T: int = DEFAULT_TRUNCATION,
    weighted: bool = True,
    min_score: float = 0.0,
    exclude_self_pairs: bool = False,
    window: int | None = None,
    user_cap: int | None = DEFAULT_USER_CAP,
    vocab_hash: str = "",
    stats: CoClickStats | None = None,
) -> I2ITable:
    """Score all co-clicked pairs with Swing and truncate each item's list to ``T``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if stats is None:
        stats = accumulate_coclicks(histories, window=window, user_cap=user_cap)
    if stats.window is None:
        scores = _pair_scores_by_user_pairs(stats, alpha, weighted, exclude_self_pairs)
    else:
        scores = _pair_scores_direct(stats, alpha, weighted, exclude_self_pairs)
    return table_from_pair_scores(
        stats.pair_i,
        stats.pair_j,
        scores,
        T,
        min_score,
        alpha=float(alpha),
        weighted=bool(weighted),
        exclude_self_pairs=bool(exclude_self_pairs),
        vocab_hash=vocab_hash,
    )


def _header(table: I2ITable, digest: str) -> str:
    return (
        f"{_MAGIC} {FORMAT_VERSION} alpha={table.alpha!r} T={table.truncation_size} "
        f"weighted={int(table.weighted)} exclude_self={int(table.exclude_self_pairs)} "
        f"vocab={table.vocab_hash or '-'} sha256={digest}\n"
    )


def _body(table: I2ITable) -> bytes:
    buf = io.StringIO()
    targets = table.targets.tolist()
    scores = table.scores.tolist()
    for k, trig in enumerate(table.triggers.tolist()):
        lo, hi = int(table.indptr[k]), int(table.indptr[k + 1])
        for rank, p in enumerate(range(lo, hi), 1):
            buf.write(f"{trig}\t{targets[p]}\t{scores[p]:.17g}\t{rank}\n")
    return buf.getvalue().encode("utf-8")


def save_index(table: I2ITable, path: str | Path) -> None:
    body = _body(table)
    with open(path, "wb") as f:
        f.write(_header(table, hashlib.sha256(body).hexdigest()).encode("utf-8"))
        f.write(body)


def load_index(path: str | Path) -> I2ITable:
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8").rstrip("\n")
        body = f.read()
    parts = header.split(" ")
    if len(parts) < 2 or parts[0] != _MAGIC:
        raise IndexFormatError(f"{path}: not a pi2i index file")
    if parts[1] != FORMAT_VERSION:
        raise IndexFormatError(f"{path}: index version {parts[1]!r}, expected {FORMAT_VERSION!r}")
    meta = dict(p.split("=", 1) for p in parts[2:])
    digest = hashlib.sha256(body).hexdigest()
    if meta.get("sha256") != digest:
        raise IndexFormatError(f"{path}: checksum mismatch (file is corrupted or was edited)")
    entries: dict[int, list[tuple[int, float]]] = {}
    for lineno, line in enumerate(body.decode("utf-8").splitlines(), 2):
        trig, targ, score, rank = line.split("\t")
        row = entries.setdefault(int(trig), [])
        if int(rank) != len(row) + 1:
            raise IndexFormatError(f"{path}:{lineno}: rank {rank} out of sequence")
        row.append((int(targ), float(score)))
    vocab = meta.get("vocab", "-")
    return I2ITable.from_entries(
        entries,
        int(meta["T"]),
        alpha=float(meta["alpha"]),
        weighted=meta["weighted"] == "1",
        exclude_self_pairs=meta.get("exclude_self", "0") == "1",
        vocab_hash="" if vocab == "-" else vocab,
    )
