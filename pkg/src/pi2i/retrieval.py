"""Candidate fan-out from the index, scoring, Top-K and hit-rate evaluation."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Query, UserHistory
from .indexer import I2ITable, build_index
from .model.features import encode
from .model.network import ModelParams, TrainConfig, score_batch
from .sampler import Provenance

log = logging.getLogger(__name__)

# (user_id, history, candidates, provenance) -> one score per candidate
Scorer = Callable[[int, Sequence[int], np.ndarray, Mapping[int, Provenance]], np.ndarray]


@dataclass(frozen=True, eq=False)
class RetrievalRun:
    user_id: int
    query_history: tuple[int, ...]
    candidates: np.ndarray  # ascending item ids
    provenance: dict[int, Provenance] = field(repr=False)
    scores: np.ndarray = field(repr=False)  # aligned with candidates
    topk: tuple[int, ...] = ()

    def score_of(self, item: int) -> float:
        k = int(np.searchsorted(self.candidates, item))
        if k < len(self.candidates) and self.candidates[k] == item:
            return float(self.scores[k])
        raise KeyError(item)


def gather_candidates(history: Sequence[int], table: I2ITable, max_seq_len: int = 50) -> tuple[tuple[int, ...], np.ndarray, dict[int, Provenance]]:
    """Union of the index lists of the recent history, minus those history items.

    Provenance lists triggers in order of their latest click (oldest first).
    """
    query = tuple(history)[-max_seq_len:]
    last = {item: pos for pos, item in enumerate(query)}
    triggers = sorted(last, key=last.__getitem__)
    cols_t, cols_c, cols_r, cols_s = [], [], [], []
    for order, t in enumerate(triggers):
        targets, scores = table.row(t)
        if len(targets) == 0:
            continue
        cols_t.append(np.full(len(targets), order))
        cols_c.append(targets)
        cols_r.append(np.arange(1, len(targets) + 1))
        cols_s.append(scores)
    if not cols_c:
        return query, np.zeros(0, dtype=np.int64), {}
    t_ord = np.concatenate(cols_t)
    cand = np.concatenate(cols_c)
    rank = np.concatenate(cols_r)
    score = np.concatenate(cols_s)
    keep = ~np.isin(cand, np.fromiter(last, dtype=np.int64, count=len(last)))
    t_ord, cand, rank, score = t_ord[keep], cand[keep], rank[keep], score[keep]
    order = np.lexsort((t_ord, cand))
    t_ord, cand, rank, score = t_ord[order], cand[order], rank[order], score[order]
    uniq, starts = np.unique(cand, return_index=True)
    bounds = np.append(starts, len(cand)).tolist()
    trig_list = [triggers[i] for i in t_ord.tolist()]
    rank_list, score_list = rank.tolist(), score.tolist()
    prov = {
        c: tuple(zip(trig_list[lo:hi], rank_list[lo:hi], score_list[lo:hi]))
        for c, lo, hi in zip(uniq.tolist(), bounds[:-1], bounds[1:])
    }
    return query, uniq.astype(np.int64), prov


def swing_scorer(user_id, history, candidates, provenance) -> np.ndarray:
    """Unpersonalized item-CF baseline: a candidate's score is the sum of its swing scores over triggers."""
    return np.array([sum(p[2] for p in provenance[c]) for c in candidates.tolist()], dtype=np.float64)


class ModelScorer:
    """Scores candidates with a trained network, ``chunk`` candidates at a time."""

    def __init__(self, params: ModelParams, cfg: TrainConfig, chunk: int = 2048):
        self.params = params
        self.cfg = cfg
        self.chunk = chunk

    def __call__(self, user_id, history, candidates, provenance) -> np.ndarray:
        out = np.empty(len(candidates))
        cands = candidates.tolist()
        for lo in range(0, len(cands), self.chunk):
            part = cands[lo : lo + self.chunk]
            b = encode(self.params.space, [(user_id, history, part, provenance)], self.cfg.max_seq_len, self.cfg.trigger_mode, self.cfg.seed)
            out[lo : lo + len(part)] = score_batch(self.params, b, self.cfg)[0, : len(part)]
        return out


def top_k(candidates: np.ndarray, scores: np.ndarray, K: int) -> tuple[int, ...]:
    """Highest scores first, ties by ascending item id."""
    order = np.lexsort((candidates, -scores))
    return tuple(candidates[order[:K]].tolist())


def retrieve(
    history: Sequence[int],
    table: I2ITable,
    scorer: Scorer,
    K: int,
    user_id: int = 0,
    max_seq_len: int = 50,
) -> RetrievalRun:
    if not history:
        raise ValueError("history must be nonempty")
    query, cands, prov = gather_candidates(history, table, max_seq_len)
    if len(cands) == 0:
        log.debug("user %s: empty candidate set", user_id)
        return RetrievalRun(user_id, query, cands, prov, np.zeros(0), ())
    scores = np.asarray(scorer(user_id, query, cands, prov), dtype=np.float64)
    return RetrievalRun(user_id, query, cands, prov, scores, top_k(cands, scores, K))


def hit_rate(runs: Sequence[RetrievalRun], truths: Sequence[frozenset[int] | set[int]], K: int) -> float:
    """Mean over queries of |topK ∩ truth| / |truth|; queries with empty truth are skipped."""
    if len(runs) != len(truths):
        raise ValueError("runs and truths differ in length")
    ratios = [len(set(r.topk[:K]) & set(t)) / len(t) for r, t in zip(runs, truths) if t]
    if not ratios:
        raise ValueError("no query with a nonempty truth set")
    return float(np.mean(ratios))


def pool_hit_rate(runs: Sequence[RetrievalRun], truths: Sequence[frozenset[int] | set[int]]) -> float:
    ratios = [len(set(r.candidates.tolist()) & set(t)) / len(t) for r, t in zip(runs, truths) if t]
    if not ratios:
        raise ValueError("no query with a nonempty truth set")
    return float(np.mean(ratios))


@dataclass
class EvalReport:
    hr_at_k: dict[int, float]
    candidate_pool_hr: float  # HR with unlimited K: the best any scorer can do on this pool
    n_queries: int
    n_excluded: int
    mean_candidates: dict[int, float]
    discard_rate: float | None = None

    def to_tsv(self) -> str:
        lines = ["K\thr\tpool_hr\tmean_candidates"]
        for k in sorted(self.hr_at_k):
            lines.append(f"{k}\t{self.hr_at_k[k]:.17g}\t{self.candidate_pool_hr:.17g}\t{self.mean_candidates[k]:.17g}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def run_queries(
    queries: Sequence[Query],
    table: I2ITable,
    scorer: Scorer,
    K: int,
    max_seq_len: int = 50,
    threads: int = 1,
) -> list[RetrievalRun]:
    """Retrieve for every query; output order follows ``queries`` regardless of ``threads``."""

    def one(q: Query) -> RetrievalRun:
        return retrieve(q.context, table, scorer, K, q.user_id, max_seq_len)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]


def evaluate_runs(runs: Sequence[RetrievalRun], truths: Sequence[frozenset[int]], ks: Sequence[int], discard_rate: float | None = None) -> EvalReport:
    kept = [(r, t) for r, t in zip(runs, truths) if t]
    if not kept:
        raise ValueError("no query with a nonempty truth set")
    runs_k, truths_k = zip(*kept)
    sizes = np.array([len(r.candidates) for r in runs_k])
    return EvalReport(
        hr_at_k={k: hit_rate(runs_k, truths_k, k) for k in sorted(ks)},
        candidate_pool_hr=pool_hit_rate(runs_k, truths_k),
        n_queries=len(kept),
        n_excluded=len(runs) - len(kept),
        mean_candidates={k: float(np.minimum(sizes, k).mean()) for k in sorted(ks)},
        discard_rate=discard_rate,
    )


def evaluate(
    queries: Sequence[Query],
    table: I2ITable,
    scorer: Scorer,
    ks: Sequence[int],
    max_seq_len: int = 50,
    threads: int = 1,
    discard_rate: float | None = None,
) -> tuple[EvalReport, list[RetrievalRun]]:
    runs = run_queries(queries, table, scorer, max(ks), max_seq_len, threads)
    return evaluate_runs(runs, [q.truth for q in queries], ks, discard_rate), runs


@dataclass(frozen=True)
class SweepRow:
    T: int
    pool_hr: float
    hr_at_k: dict[int, float]
    total_candidates: int


def sweep_truncation(
    queries: Sequence[Query],
    T_values: Sequence[int],
    scorer: Scorer,
    ks: Sequence[int],
    table: I2ITable | None = None,
    histories: Sequence[UserHistory] | None = None,
    index_kwargs: Mapping | None = None,
    max_seq_len: int = 50,
    threads: int = 1,
) -> list[SweepRow]:
    """Evaluate the same scorer at each truncation size.

    With ``table`` (built at T >= max(T_values)) each size is a prefix
    truncation; with ``histories`` the index is rebuilt per size.
    """
    if list(T_values) != sorted(T_values):
        raise ValueError("T_values must be ascending")
    if table is None and histories is None:
        raise ValueError("need a table to truncate or histories to rebuild from")
    if table is not None and table.truncation_size < max(T_values):
        raise ValueError(f"table truncated at {table.truncation_size} < {max(T_values)}")
    rows = []
    for T in T_values:
        t_table = table.truncate(T) if table is not None else build_index(histories, T=T, **(index_kwargs or {}))
        report, runs = evaluate(queries, t_table, scorer, ks, max_seq_len, threads)
        rows.append(SweepRow(T, report.candidate_pool_hr, report.hr_at_k, int(sum(len(r.candidates) for r in runs))))
    return rows


def sweep_to_tsv(rows: Sequence[SweepRow]) -> str:
    ks = sorted(rows[0].hr_at_k) if rows else []
    lines = ["\t".join(["T", "pool_hr"] + [f"hr@{k}" for k in ks] + ["total_candidates"])]
    for r in rows:
        lines.append("\t".join([str(r.T), f"{r.pool_hr:.17g}"] + [f"{r.hr_at_k[k]:.17g}" for k in ks] + [str(r.total_candidates)]))
    return "\n".join(lines) + "\n"


@dataclass
class TriggerIndexStats:
    overall: Counter  # recency index (1 = most recent click) -> hits
    per_user: dict[int, Counter]

    def mode(self) -> int | None:
        if not self.overall:
            return None
        return min(self.overall, key=lambda i: (-self.overall[i], i))

    def to_tsv(self) -> str:
        lines = ["trigger_index\thit_count"]
        lines += [f"{i}\t{self.overall[i]}" for i in sorted(self.overall)]
        return "\n".join(lines) + "\n"

    def per_user_tsv(self) -> str:
        lines = ["user_id\ttrigger_index\thit_count"]
        for u in sorted(self.per_user):
            lines += [f"{u}\t{i}\t{c}" for i, c in sorted(self.per_user[u].items())]
        return "\n".join(lines) + "\n"


def attribute_hit(run: RetrievalRun, item: int) -> int | None:
    """Recency index of the trigger credited with ``item``: best index rank, then most recent."""
    prov = run.provenance.get(item)
    if not prov:
        return None
    last = {t: pos for pos, t in enumerate(run.query_history)}
    trigger = min(prov, key=lambda p: (p[1], -last[p[0]]))[0]
    return len(run.query_history) - last[trigger]


def trigger_index_stats(
    runs: Sequence[RetrievalRun],
    truths: Sequence[frozenset[int] | set[int]],
    K: int | None = None,
    top_users: int = 3,
) -> TriggerIndexStats:
    """Histogram of which history position produced each hit, overall and for the most active users."""
    overall: Counter = Counter()
    by_user: dict[int, Counter] = {}
    clicks: Counter = Counter()
    for run, truth in zip(runs, truths):
        clicks[run.user_id] += len(run.query_history)
        hits = set(run.topk if K is None else run.topk[:K]) & set(truth)
        for item in sorted(hits):
            idx = attribute_hit(run, item)
            if idx is None:
                continue
            overall[idx] += 1
            by_user.setdefault(run.user_id, Counter())[idx] += 1
    chosen = sorted(by_user, key=lambda u: (-clicks[u], u))[:top_users]
    return TriggerIndexStats(overall, {u: by_user[u] for u in chosen})
