"""Report figures.  Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .retrieval import SweepRow, TriggerIndexStats  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "svg.hashsalt": "pi2i",
}


def _figure():
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        # no software/date metadata so reruns write identical bytes
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_hr_curve(curves: Mapping[str, Mapping[int, float]], path: str | Path, pool_hr: float | None = None) -> Path:
    """HR@K against K for one or more scorers, log-scaled K axis."""
    fig, ax = _figure()
    for label, hr in curves.items():
        ks = sorted(hr)
        ax.plot(ks, [hr[k] for k in ks], marker="o", label=label)
    if pool_hr is not None:
        ax.axhline(pool_hr, color="0.5", linestyle="--", linewidth=0.8, label="candidate pool")
    ax.set_xscale("log")
    ax.set_xlabel("K")
    ax.set_ylabel("HR@K")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep(rows: Sequence[SweepRow], path: str | Path) -> Path:
    """Pool HR and HR@K against truncation size, with total candidates on a twin axis."""
    fig, ax = _figure()
    Ts = [r.T for r in rows]
    ax.plot(Ts, [r.pool_hr for r in rows], marker="s", color="k", label="pool HR")
    for k in sorted(rows[0].hr_at_k) if rows else []:
        ax.plot(Ts, [r.hr_at_k[k] for r in rows], marker="o", label=f"HR@{k}")
    ax.set_xscale("log")
    ax.set_xlabel("truncation size T")
    ax.set_ylabel("hit rate")
    ax.legend(frameon=False, loc="upper left")
    twin = ax.twinx()
    twin.plot(Ts, [r.total_candidates for r in rows], color="0.6", linestyle=":", marker="x")
    twin.set_ylabel("total candidates", color="0.4")
    twin.spines["top"].set_visible(False)
    return _save(fig, path)


def plot_trigger_index(stats: TriggerIndexStats, path: str | Path, max_index: int = 20) -> Path:
    """Hit counts by trigger recency (1 = most recent click); one panel row per listed user."""
    users = sorted(stats.per_user)
    n = 1 + len(users)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 1, figsize=(5.0, 1.6 * n), sharex=True, squeeze=False)
    idx = list(range(1, max_index + 1))
    for ax, (title, counts) in zip(axes[:, 0], [("all users", stats.overall)] + [(f"user {u}", stats.per_user[u]) for u in users]):
        ax.bar(idx, [counts.get(i, 0) for i in idx], color="0.3", width=0.8)
        ax.set_ylabel("hits")
        ax.set_title(title, loc="left", fontsize=8)
    axes[-1, 0].set_xlabel("trigger index (1 = most recent)")
    axes[-1, 0].set_xticks(idx[::2] if max_index > 10 else idx)
    return _save(fig, path)
