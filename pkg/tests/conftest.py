from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pi2i.corpus import Interaction, build_histories

settings.register_profile("pi2i", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pi2i")

ROOT = Path(__file__).resolve().parent.parent
TOY = ROOT / "src" / "pi2i" / "data" / "toy.tsv"
TOY_CONF = ROOT / "configs" / "toy.conf"
GOLDENS = Path(__file__).resolve().parent / "goldens"


def random_histories(rng: np.random.Generator, n_users: int, n_items: int, max_len: int = 12):
    """Random integer-id histories; densities vary per user."""
    out = []
    ts = 0
    for u in range(n_users):
        for _ in range(int(rng.integers(1, max_len + 1))):
            ts += int(rng.integers(1, 4))
            out.append(Interaction(u, int(rng.integers(n_items)), ts))
    return build_histories(out)


def as_item_lists(histories):
    return {h.user_id: list(h.items) for h in histories}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


PIPELINE = ["build-index", "sample", "train", "evaluate", "retrieve", "sweep", "stats"]
GOLDEN_FILES = [
    "index.tsv",
    "samples.tsv",
    "model.ckpt",
    "reports/sample_stats.tsv",
    "reports/eval.tsv",
    "reports/eval_swing.tsv",
    "reports/retrieve.tsv",
    "reports/sweep.tsv",
    "reports/trigger_index.tsv",
    "reports/trigger_index_users.tsv",
]


def run_toy_pipeline(workdir: Path) -> None:
    """Every CLI stage on the bundled toy log with configs/toy.conf, single-threaded."""
    from pi2i.cli import main

    for cmd in PIPELINE:
        code = main([cmd, "--config", str(TOY_CONF), "--data", str(TOY), "--workdir", str(workdir), "--threads", "1"])
        if code != 0:
            raise RuntimeError(f"{cmd} exited {code}")


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
        if rep.when == "call"
        for name, value in rep.user_properties
        if name == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
