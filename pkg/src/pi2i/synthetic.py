"""Synthetic interaction logs with planted structure, for experiments and fixtures."""

from __future__ import annotations

import numpy as np

from .corpus import Interaction


def planted_preference_log(
    n_users: int = 2000,
    n_items: int = 5000,
    n_clusters: int = 20,
    visits: tuple[int, int] = (6, 10),
    seed: int = 0,
) -> list[Interaction]:
    """Two latent user types preferring disjoint halves of every anchor's neighbor list.

    Items are split into ``n_clusters`` contiguous clusters.  The first item
    of a cluster is its anchor; the rest alternate between type 1 (odd
    offset) and type 0 (even offset).  User ``u`` has type ``u % 2`` and a
    random home cluster.  Each visit clicks the home anchor and then a
    uniformly drawn item of the user's own type, so the anchor's list holds
    both halves with similar scores and only the user's type separates them.
    """
    rng = np.random.default_rng(seed)
    size = n_items // n_clusters
    if size < 3:
        raise ValueError("clusters need at least 3 items")
    out = []
    for u in range(n_users):
        kind = u % 2
        base = int(rng.integers(n_clusters)) * size
        offsets = np.arange(1 + (1 - kind), size, 2)
        ts = 0
        for _ in range(rng.integers(visits[0], visits[1] + 1)):
            ts += 1
            out.append(Interaction(u, base, ts))
            ts += 1
            out.append(Interaction(u, base + int(rng.choice(offsets)), ts))
    return out


def item_type(item: int, n_items: int = 5000, n_clusters: int = 20) -> int | None:
    """Planted type of an item in :func:`planted_preference_log` (None for anchors)."""
    offset = item % (n_items // n_clusters)
    return None if offset == 0 else offset % 2


def planted_recency_log(
    n_users: int = 200,
    lag: int = 3,
    n_pairs: int = 40,
    n_blocks: int = 3,
    seed: int = 0,
) -> list[Interaction]:
    """Histories built from blocks ``a_k, filler x (lag-1), b_k``.

    Every ``b_k`` is clicked exactly ``lag`` clicks after its partner ``a_k``
    and fillers are (almost surely) never repeated, so an index built with a
    co-click window of ``lag`` and self pairs excluded ranks ``b_k`` first in
    ``a_k``'s list: hits on the final click are triggered at recency ``lag``.
    """
    rng = np.random.default_rng(seed)
    out = []
    filler_base = 2 * n_pairs
    for u in range(n_users):
        ts = 0
        for _ in range(n_blocks):
            k = int(rng.integers(n_pairs))
            fillers = [filler_base + int(x) for x in rng.choice(1_000_000, size=lag - 1, replace=False)]
            for item in [k, *fillers, n_pairs + k]:
                ts += 1
                out.append(Interaction(u, item, ts))
    return out


def toy_log(n_users: int = 60, n_items: int = 40, seed: int = 7) -> list[Interaction]:
    """Small log with side info used as the bundled example dataset."""
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        ts = 1_600_000_000 + int(rng.integers(0, 1000))
        kind = u % 2
        for _ in range(int(rng.integers(4, 10))):
            group = int(rng.integers(4))
            item = group * 10 + 2 * int(rng.integers(5)) + kind
            ts += int(rng.integers(1, 500))
            out.append(
                Interaction(
                    u,
                    item,
                    ts,
                    {"brand_id": f"b{item % 7}", "category_id": f"c{group}", "price": float(5 + item % 13)},
                )
            )
    return out
