"""Trigger-target negative sampling.

A training example is a (history, next item) pair.  History items whose index
list contains the next item are its positive triggers; hard negatives come
from the positive triggers' lists (biased toward the top of the list), easy
negatives from the lists of the remaining history items (biased toward the
tail).  Examples with no positive trigger are discarded, so every training
candidate lives in the same space the retriever scores at inference time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import DatasetSplit
from .indexer import I2ITable

Provenance = tuple[tuple[int, int, float], ...]  # (trigger, rank, score) per listing trigger


@dataclass(frozen=True)
class SamplerConfig:
    n_hard: int = 20
    n_easy: int = 80
    hard_bias: float = 1.0
    easy_bias: float = 1.0
    seed: int = 0
    max_seq_len: int = 50

    def __post_init__(self):
        if self.n_hard < 0 or self.n_easy < 0 or self.n_hard + self.n_easy < 1:
            raise ValueError("need n_hard >= 0, n_easy >= 0 and n_hard + n_easy >= 1")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")


@dataclass(frozen=True)
class TrainingSample:
    user_id: int
    history: tuple[int, ...]
    positive_item: int
    positive_triggers: tuple[int, ...]
    hard_negatives: tuple[int, ...]
    easy_negatives: tuple[int, ...]
    trigger_of: dict[int, Provenance] = field(hash=False)

    @property
    def negatives(self) -> tuple[int, ...]:
        return self.hard_negatives + self.easy_negatives

    @property
    def candidates(self) -> tuple[int, ...]:
        """Positive first, then hard, then easy negatives."""
        return (self.positive_item,) + self.hard_negatives + self.easy_negatives


@dataclass(frozen=True)
class SampleStats:
    n_attempted: int = 0
    n_kept: int = 0
    mean_positive_triggers: float = 0.0
    mean_hard: float = 0.0
    mean_easy: float = 0.0

    @property
    def n_discarded(self) -> int:
        return self.n_attempted - self.n_kept

    @property
    def discard_rate(self) -> float:
        return self.n_discarded / self.n_attempted if self.n_attempted else 0.0


def trigger_list(history: Sequence[int], max_seq_len: int) -> list[int]:
    """Distinct items of the last ``max_seq_len`` clicks, ordered by their latest click."""
    recent = list(history)[-max_seq_len:]
    last = {item: pos for pos, item in enumerate(recent)}
    return sorted(last, key=last.__getitem__)


def provenance(candidate: int, triggers: Sequence[int], table: I2ITable) -> Provenance:
    out = []
    for t in triggers:
        hit = table.lookup(t, candidate)
        if hit is not None:
            out.append((t, hit[0], hit[1]))
    return tuple(out)


def _weighted_pool(rows: list[tuple[np.ndarray, np.ndarray]], exclude: set[int]) -> tuple[np.ndarray, np.ndarray]:
    """Union of items over rows with the max weight per item, sorted by item id."""
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    items = np.concatenate([r[0] for r in rows])
    weights = np.concatenate([r[1] for r in rows])
    if exclude:
        mask = ~np.isin(items, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
        items, weights = items[mask], weights[mask]
    if len(items) == 0:
        return items, weights
    order = np.lexsort((-weights, items))
    items, weights = items[order], weights[order]
    first = np.ones(len(items), dtype=bool)
    first[1:] = items[1:] != items[:-1]
    return items[first], weights[first]


def _draw(items: np.ndarray, weights: np.ndarray, quota: int, rng: np.random.Generator) -> tuple[int, ...]:
    if quota <= 0 or len(items) == 0:
        return ()
    if len(items) <= quota:
        return tuple(items.tolist())
    picked = rng.choice(len(items), size=quota, replace=False, p=weights / weights.sum())
    return tuple(sorted(items[picked].tolist()))


def make_sample(
    history: Sequence[int],
    next_item: int,
    table: I2ITable,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    user_id: int = 0,
) -> TrainingSample | None:
    """One trigger-target sample, or ``None`` when no history item's list contains ``next_item``.

    History items missing from the table simply contribute no targets.
    Items the user already clicked are never used as negatives.
    """
    if not history:
        raise ValueError("history must be nonempty")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, user_id])
    triggers = trigger_list(history, cfg.max_seq_len)
    positive, other = [], []
    for t in triggers:
        (positive if next_item in table.positions(t) else other).append(t)
    if not positive:
        return None

    hard_rows, easy_rows, hard_eligible = [], [], set()
    for t in positive:
        targets, _ = table.row(t)
        n = len(targets)
        hard_rows.append((targets, (n - np.arange(n, dtype=np.float64)) ** cfg.hard_bias))
        hard_eligible.update(targets.tolist())
    for t in other:
        targets, _ = table.row(t)
        easy_rows.append((targets, np.arange(1, len(targets) + 1, dtype=np.float64) ** cfg.easy_bias))

    clicked = set(history) | {next_item}
    hard = _draw(*_weighted_pool(hard_rows, clicked), cfg.n_hard, rng)
    easy = _draw(*_weighted_pool(easy_rows, clicked | hard_eligible), cfg.n_easy, rng)

    trig_of = {c: provenance(c, triggers, table) for c in (next_item,) + hard + easy}
    return TrainingSample(
        user_id=user_id,
        history=tuple(list(history)[-cfg.max_seq_len :]),
        positive_item=next_item,
        positive_triggers=tuple(positive),
        hard_negatives=hard,
        easy_negatives=easy,
        trigger_of=trig_of,
    )


def _user_samples(user_id: int, items: tuple[int, ...], table: I2ITable, cfg: SamplerConfig):
    rng = np.random.default_rng([cfg.seed, user_id])
    kept = []
    for n in range(1, len(items)):
        s = make_sample(items[:n], items[n], table, cfg, rng, user_id)
        if s is not None:
            kept.append(s)
    return kept, max(0, len(items) - 1)


def summarize(samples: Sequence[TrainingSample], n_attempted: int) -> SampleStats:
    if not samples:
        return SampleStats(n_attempted=n_attempted)
    return SampleStats(
        n_attempted=n_attempted,
        n_kept=len(samples),
        mean_positive_triggers=float(np.mean([len(s.positive_triggers) for s in samples])),
        mean_hard=float(np.mean([len(s.hard_negatives) for s in samples])),
        mean_easy=float(np.mean([len(s.easy_negatives) for s in samples])),
    )


def sample_dataset(
    split: DatasetSplit,
    table: I2ITable,
    cfg: SamplerConfig,
    threads: int = 1,
) -> tuple[list[TrainingSample], SampleStats]:
    """Attempt one sample per (training prefix, next click) pair of every user.

    Each user draws from its own generator seeded by ``(seed, user_id)``, so
    the output does not depend on ``threads``.
    """
    histories = sorted(split.train_histories, key=lambda h: h.user_id)
    work = [(h.user_id, h.items) for h in histories]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda w: _user_samples(w[0], w[1], table, cfg), work))
    else:
        parts = [_user_samples(u, items, table, cfg) for u, items in work]
    samples = [s for kept, _ in parts for s in kept]
    return samples, summarize(samples, sum(n for _, n in parts))


def _join(items: Iterable[int]) -> str:
    return ",".join(str(i) for i in items)


def write_samples(path: str | Path, samples: Iterable[TrainingSample]) -> None:
    """``user \\t positive \\t triggers \\t hards \\t easies`` with comma-joined lists."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(
                f"{s.user_id}\t{s.positive_item}\t{_join(s.positive_triggers)}\t"
                f"{_join(s.hard_negatives)}\t{_join(s.easy_negatives)}\n"
            )


def read_samples(path: str | Path) -> list[tuple[int, int, tuple[int, ...], tuple[int, ...], tuple[int, ...]]]:
    def ids(col: str) -> tuple[int, ...]:
        return tuple(int(x) for x in col.split(",")) if col else ()

    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            user, pos, trig, hard, easy = line.rstrip("\n").split("\t")
            rows.append((int(user), int(pos), ids(trig), ids(hard), ids(easy)))
    return rows
