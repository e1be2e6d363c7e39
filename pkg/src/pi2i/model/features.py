"""Feature vocabulary and padded batch encoding for the scorer.

Every embedding table reserves row 0 for unknown ids.  Item features are the
item-id embedding followed by one embedding per categorical side field, in
``CATEGORICAL_FIELDS`` order.  Cross features are four bucketized quantities
derived from the (trigger, target) provenance, in this order: best index
rank, best swing score, number of triggers, relative price gap.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..corpus import CATEGORICAL_FIELDS, Interaction, item_side_info
from ..sampler import Provenance, TrainingSample

N_BUCKETS = 16
CROSS_FEATURES = ("rank", "score", "count", "price")
# log2 offsets so the useful range of each quantity lands inside the 16 buckets
_BUCKET_OFFSET = {"rank": 0, "score": 12, "count": 0, "price": 15}

TRIGGER_MODES = ("multi", "single_random", "none")


def log_bucket(x: float, offset: int) -> int:
    """Row 1..16 for ``floor(log2(x)) + offset`` clipped to [0, 15]; non-positive or NaN -> 1."""
    if not x > 0:
        return 1
    exponent = math.frexp(x)[1] - 1  # exact floor(log2(x))
    return 1 + min(N_BUCKETS - 1, max(0, exponent + offset))


def log_buckets(x: np.ndarray, offset: int) -> np.ndarray:
    """Vectorized :func:`log_bucket`."""
    x = np.asarray(x, dtype=np.float64)
    ok = x > 0
    exponent = np.frexp(np.where(ok, x, 1.0))[1] - 1
    return np.where(ok, 1 + np.clip(exponent + offset, 0, N_BUCKETS - 1), 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class FeatureSpace:
    """Dense embedding rows for items, users and side-info values."""

    item_ids: tuple[int, ...]
    user_ids: tuple[int, ...]
    fields: tuple[str, ...]
    field_values: Mapping[str, tuple[str, ...]]
    # per field: item row -> value row (0 = unknown / missing)
    field_rows: Mapping[str, np.ndarray]
    # item row -> price (NaN when unknown)
    prices: np.ndarray
    vocab_hash: str

    @classmethod
    def build(
        cls,
        item_ids: Iterable[int],
        user_ids: Iterable[int],
        side_info: Mapping[int, Mapping[str, str | float]] | None = None,
    ) -> "FeatureSpace":
        items = tuple(sorted(set(item_ids)))
        users = tuple(sorted(set(user_ids)))
        side_info = side_info or {}
        present = {k for attrs in side_info.values() for k in attrs}
        fields = tuple(f for f in CATEGORICAL_FIELDS if f in present)
        values = {f: tuple(sorted({str(a[f]) for a in side_info.values() if f in a})) for f in fields}
        field_rows = {}
        for f in fields:
            index = {v: r for r, v in enumerate(values[f], 1)}
            rows = np.zeros(len(items) + 1, dtype=np.int64)
            for r, item in enumerate(items, 1):
                v = side_info.get(item, {}).get(f)
                if v is not None:
                    rows[r] = index[str(v)]
            field_rows[f] = rows
        prices = np.full(len(items) + 1, np.nan)
        for r, item in enumerate(items, 1):
            p = side_info.get(item, {}).get("price")
            if isinstance(p, (int, float)):
                prices[r] = float(p)
        blob = json.dumps(
            {
                "items": items,
                "users": users,
                "fields": {f: values[f] for f in fields},
                "field_rows": {f: field_rows[f].tolist() for f in fields},
                "prices": [None if math.isnan(p) else repr(float(p)) for p in prices.tolist()],
            },
            sort_keys=True,
        )
        digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
        return cls(items, users, fields, values, field_rows, prices, digest)

    @classmethod
    def from_interactions(cls, interactions: Sequence[Interaction]) -> "FeatureSpace":
        return cls.build(
            (x.item_id for x in interactions),
            (x.user_id for x in interactions),
            item_side_info(interactions),
        )

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def item_rows(self, items: Sequence[int]) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        if not self.item_ids:
            return np.zeros(items.shape, dtype=np.int64)
        ids = self._item_array
        pos = np.minimum(np.searchsorted(ids, items), len(ids) - 1)
        return np.where(ids[pos] == items, pos + 1, 0).astype(np.int64)

    @cached_property
    def _item_array(self) -> np.ndarray:
        return np.asarray(self.item_ids, dtype=np.int64)

    def user_row(self, user: int) -> int:
        ids = self.user_ids
        k = int(np.searchsorted(ids, user)) if ids else 0
        return k + 1 if k < len(ids) and ids[k] == user else 0


def _pick(seed: int, user: int, candidate: int, n: int) -> int:
    """Deterministic stand-in for 'pick one trigger at random'."""
    h = hashlib.blake2b(f"{seed}:{user}:{candidate}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % n


def select_triggers(prov: Provenance, mode: str, seed: int, user: int, candidate: int) -> Provenance:
    if mode == "multi":
        return prov
    if mode == "none" or not prov:
        return ()
    if mode == "single_random":
        return (prov[_pick(seed, user, candidate, len(prov))],)
    raise ValueError(f"unknown trigger_mode {mode!r}")


@dataclass
class Batch:
    """Padded arrays for S queries with up to Cm candidates each.

    Candidate slot 0 holds the positive item during training.
    """

    user_rows: np.ndarray  # (S,)
    seq_rows: np.ndarray  # (S, L)
    seq_mask: np.ndarray  # (S, L) bool
    target_rows: np.ndarray  # (S, Cm)
    cand_mask: np.ndarray  # (S, Cm) bool
    trig_rows: np.ndarray  # (S, Cm, Tm)
    trig_w: np.ndarray  # (S, Cm, Tm) averaging weights, 0 on padding
    cross_rows: np.ndarray  # (S, Cm, 4)

    def __len__(self):
        return len(self.user_rows)

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def encode(
    space: FeatureSpace,
    queries: Sequence[tuple[int, Sequence[int], Sequence[int], Mapping[int, Provenance]]],
    max_seq_len: int,
    trigger_mode: str = "multi",
    seed: int = 0,
) -> Batch:
    """Encode ``(user, history, candidates, provenance)`` tuples into one padded batch."""
    S = len(queries)
    L = max(1, min(max_seq_len, max((len(q[1]) for q in queries), default=1)))
    Cm = max(1, max((len(q[2]) for q in queries), default=1))
    selected = []
    Tm = 1
    for user, _, cands, prov in queries:
        row = [select_triggers(prov.get(c, ()), trigger_mode, seed, user, c) for c in cands]
        selected.append(row)
        Tm = max(Tm, max((len(t) for t in row), default=1))

    user_rows = np.zeros(S, dtype=np.int64)
    seq_rows = np.zeros((S, L), dtype=np.int64)
    seq_mask = np.zeros((S, L), dtype=bool)
    target_rows = np.zeros((S, Cm), dtype=np.int64)
    cand_mask = np.zeros((S, Cm), dtype=bool)
    trig_rows = np.zeros((S, Cm, Tm), dtype=np.int64)
    trig_w = np.zeros((S, Cm, Tm))
    cross_rows = np.zeros((S, Cm, len(CROSS_FEATURES)), dtype=np.int64)

    # flat (query, candidate, slot) records of every selected trigger
    q_idx, c_idx, t_slot, t_item, t_rank, t_score = [], [], [], [], [], []
    for s, (user, history, cands, _) in enumerate(queries):
        user_rows[s] = space.user_row(user)
        hist = list(history)[-max_seq_len:]
        seq_rows[s, : len(hist)] = space.item_rows(hist)
        seq_mask[s, : len(hist)] = True
        n = len(cands)
        if n == 0:
            continue
        target_rows[s, :n] = space.item_rows(cands)
        cand_mask[s, :n] = True
        for c, trig in enumerate(selected[s]):
            for k, (item, rank, score) in enumerate(trig):
                q_idx.append(s)
                c_idx.append(c)
                t_slot.append(k)
                t_item.append(item)
                t_rank.append(rank)
                t_score.append(score)
    if q_idx:
        qi, ci, ki = np.array(q_idx), np.array(c_idx), np.array(t_slot)
        trows = space.item_rows(t_item)
        trig_rows[qi, ci, ki] = trows
        counts = np.zeros((S, Cm), dtype=np.int64)
        np.add.at(counts, (qi, ci), 1)
        has = counts > 0
        trig_w[qi, ci, ki] = 1.0 / counts[qi, ci]
        rank = np.full((S, Cm), np.inf)
        np.minimum.at(rank, (qi, ci), np.array(t_rank, dtype=np.float64))
        best = np.zeros((S, Cm))
        np.maximum.at(best, (qi, ci), np.array(t_score, dtype=np.float64))
        # relative gap between the target price and the mean trigger price
        p_trig = space.prices[trows]
        missing = np.zeros((S, Cm), dtype=bool)
        missing[qi[np.isnan(p_trig)], ci[np.isnan(p_trig)]] = True
        mean_trig = np.where(trig_rows > 0, space.prices[trig_rows], 0.0).sum(axis=-1) / np.maximum(counts, 1)
        p_target = space.prices[target_rows]
        denom = np.maximum(np.abs(p_target), np.abs(mean_trig))
        with np.errstate(invalid="ignore", divide="ignore"):
            gap = np.where(denom > 0, np.abs(p_target - mean_trig) / denom, 0.0)
        known = has & ~missing & ~np.isnan(p_target)
        cross_rows[..., 0] = np.where(has, log_buckets(np.where(has, rank, 1.0), _BUCKET_OFFSET["rank"]), 0)
        cross_rows[..., 1] = np.where(has, log_buckets(best, _BUCKET_OFFSET["score"]), 0)
        cross_rows[..., 2] = np.where(has, log_buckets(counts, _BUCKET_OFFSET["count"]), 0)
        cross_rows[..., 3] = np.where(known, log_buckets(np.where(known, gap, 1.0), _BUCKET_OFFSET["price"]), 0)
    return Batch(user_rows, seq_rows, seq_mask, target_rows, cand_mask, trig_rows, trig_w, cross_rows)


def encode_samples(space: FeatureSpace, samples: Sequence[TrainingSample], max_seq_len: int, trigger_mode: str = "multi", seed: int = 0) -> Batch:
    return encode(
        space,
        [(s.user_id, s.history, s.candidates, s.trigger_of) for s in samples],
        max_seq_len,
        trigger_mode,
        seed,
    )
