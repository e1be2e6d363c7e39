"""Slow, obviously-correct reference implementations used as test oracles.

None of these import the code under test except for plain data types.
"""

from __future__ import annotations

import hashlib
import math
from typing import Mapping, Sequence

import numpy as np


def user_item_sets(histories: Mapping[int, Sequence[int]], user_cap: int | None = None) -> dict[int, set[int]]:
    """I_u per user, keeping only the ``user_cap`` most recently clicked distinct items."""
    out = {}
    for u, items in histories.items():
        keep = []
        for item in reversed(items):
            if item not in keep:
                keep.append(item)
        if user_cap:
            keep = keep[:user_cap]
        if keep:
            out[u] = set(keep)
    return out


def naive_coclick(histories: Mapping[int, Sequence[int]]) -> dict[tuple[int, int], int]:
    sets = user_item_sets(histories)
    items = sorted(set().union(*sets.values())) if sets else []
    out = {}
    for a in items:
        for b in items:
            if a != b:
                n = sum(1 for s in sets.values() if a in s and b in s)
                if n:
                    out[(a, b)] = n
    return out


def naive_swing(i, j, sets, alpha, weighted, exclude_self):
    """Literal double sum over ordered user pairs, users ascending."""
    shared = sorted(u for u, s in sets.items() if i in s and j in s)
    total = 0.0
    for u in shared:
        for v in shared:
            if exclude_self and u == v:
                continue
            wu = 1.0 / math.sqrt(len(sets[u])) if weighted else 1.0
            wv = 1.0 / math.sqrt(len(sets[v])) if weighted else 1.0
            total += wu * wv / (alpha + len(sets[u] & sets[v]))
    return total


def naive_index(
    histories: Mapping[int, Sequence[int]],
    alpha: float = 1.0,
    T: int = 1250,
    weighted: bool = True,
    exclude_self: bool = False,
    user_cap: int | None = 500,
) -> dict[int, list[tuple[int, float]]]:
    """Score every ordered item pair, sort by (score desc, item asc), cut at T."""
    sets = user_item_sets(histories, user_cap)
    items = sorted(set().union(*sets.values())) if sets else []
    table = {}
    for i in items:
        row = []
        for j in items:
            if i == j:
                continue
            s = naive_swing(i, j, sets, alpha, weighted, exclude_self)
            if s > 0:
                row.append((j, s))
        row.sort(key=lambda x: (-x[1], x[0]))
        if row:
            table[i] = row[:T]
    return table


def index_file_bytes(table: Mapping[int, list[tuple[int, float]]], alpha: float, T: int, weighted: bool, exclude_self: bool, vocab: str) -> bytes:
    """The on-disk index format, written from scratch."""
    body = "".join(
        f"{t}\t{target}\t{score:.17g}\t{rank}\n"
        for t in sorted(table)
        for rank, (target, score) in enumerate(table[t], 1)
    ).encode("utf-8")
    digest = hashlib.sha256(body).hexdigest()
    header = (
        f"#pi2i-index v1 alpha={alpha!r} T={T} weighted={int(weighted)} "
        f"exclude_self={int(exclude_self)} vocab={vocab or '-'} sha256={digest}\n"
    )
    return header.encode("utf-8") + body


def hr(topks: Sequence[Sequence[int]], truths: Sequence[set[int]], K: int) -> float:
    vals = []
    for top, truth in zip(topks, truths):
        hits = 0
        for item in truth:
            if item in list(top)[:K]:
                hits += 1
        vals.append(hits / len(truth))
    return sum(vals) / len(vals)


def bucket(x: float, offset: int) -> int:
    """floor(log2 x) + offset clipped into 16 buckets, rows 1..16; x <= 0 -> row 1."""
    if not x > 0:
        return 1
    e = 0
    while 2.0 ** (e + 1) <= x:
        e += 1
    while 2.0**e > x:
        e -= 1
    return 1 + min(15, max(0, e + offset))


def _softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def straight_line_logit(P: Mapping[str, np.ndarray], hist_rows, cand_row, trig_rows, cross_rows, user_row, heads, dk, n_out_layers, literal=False):
    """Score one candidate with explicit per-head loops and no batching.

    Only the id embedding is used for items (fixtures carry no side fields).
    """
    E = P["emb_item"]
    x_tgt = E[cand_row]
    e_trig = np.mean([E[r] for r in trig_rows], axis=0) if trig_rows else np.zeros(E.shape[1])
    e_cross = np.concatenate([P[f"emb_cross_{f}"][r] for f, r in zip(("rank", "score", "count", "price"), cross_rows)])
    xq = np.concatenate([e_trig, x_tgt, e_cross])
    h1 = np.maximum(xq @ P["q_w1"] + P["q_b1"], 0.0)
    q = h1 @ P["q_w2"] + P["q_b2"]
    outs = []
    for h in range(heads):
        qh = q[h * dk : (h + 1) * dk]
        keys = [E[r] @ P["attn_wk"][h] for r in hist_rows]
        vals = [E[r] @ P["attn_wv"][h] for r in hist_rows]
        if literal:
            a = _softmax([qh @ k for k in keys])
            outs.append(sum(w * v for w, v in zip(a, vals)) / math.sqrt(dk))
        else:
            a = _softmax([qh @ k / math.sqrt(dk) for k in keys])
            outs.append(sum(w * v for w, v in zip(a, vals)))
    z = np.concatenate(outs + [P["emb_user"][user_row], e_trig, x_tgt, e_cross])
    for k in range(1, n_out_layers + 1):
        z = z @ P[f"out_w{k}"] + P[f"out_b{k}"]
        if k < n_out_layers:
            z = np.maximum(z, 0.0)
    return float(z[0])


def central_difference(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def sample_violations(sample, history, next_item, entries: Mapping[int, Sequence], max_seq_len: int = 50) -> list[str]:
    """Every broken TrainingSample invariant, checked by plain set membership.

    ``entries`` maps trigger -> sequence of objects with a ``target`` field.
    """
    lists = {t: [e.target for e in entries.get(t, ())] for t in set(history[-max_seq_len:])}
    pos = {t for t, targets in lists.items() if next_item in targets}
    pos_union = {x for t in pos for x in lists[t]}
    other_union = {x for t, targets in lists.items() if t not in pos for x in targets}
    bad = []
    if set(sample.positive_triggers) != pos:
        bad.append("positive triggers differ from brute-force membership")
    if not sample.positive_triggers:
        bad.append("no positive trigger")
    hard, easy = sample.hard_negatives, sample.easy_negatives
    if len(set(hard)) != len(hard) or len(set(easy)) != len(easy):
        bad.append("duplicate negatives")
    if set(hard) & set(easy):
        bad.append("hard and easy overlap")
    if next_item in hard or next_item in easy:
        bad.append("positive leaked into negatives")
    if not set(hard) <= pos_union:
        bad.append("hard negative outside positive-trigger lists")
    if not set(easy) <= other_union:
        bad.append("easy negative outside non-trigger lists")
    if set(easy) & pos_union:
        bad.append("easy negative inside a positive-trigger list")
    if set(hard + easy) & set(history):
        bad.append("clicked item used as negative")
    for t in sample.positive_triggers:
        if next_item not in lists[t]:
            bad.append("label: positive missing from a positive trigger's list")
    return bad
