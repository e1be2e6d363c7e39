"""Batch command line: build-index, sample, train, evaluate, retrieve, sweep, stats.

Every command reads one flat ``key = value`` config file (optional) and
accepts each key as a ``--key`` flag; flags win over the file.  Outputs are a
pure function of the config and the input files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from threadpoolctl import threadpool_limits

from .corpus import (
    DatasetSplit,
    Interaction,
    MalformedInputError,
    Vocabulary,
    build_histories,
    load_interactions,
    split_leave_last,
)
from .indexer import I2ITable, IndexFormatError, build_index, load_index, save_index
from .model import FeatureSpace, TrainConfig, TrainingDiverged, VocabularyMismatch, load_params, save_params, train
from .retrieval import (
    ModelScorer,
    evaluate,
    run_queries,
    swing_scorer,
    sweep_to_tsv,
    sweep_truncation,
    trigger_index_stats,
)
from .sampler import SamplerConfig, sample_dataset, write_samples

log = logging.getLogger("pi2i")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
LOG_LEVEL_ENV = "PI2I_LOG_LEVEL"


class ConfigError(ValueError):
    """Bad config file, bad value, or missing input: exit code 2."""


# ---------------------------------------------------------------------------
# config


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: tuple[Key, ...] = (
    # paths
    Key("data", str, "", "interaction log (user, item, timestamp [, k=v ...])"),
    Key("format", str, "tsv", "input format: tsv or csv"),
    Key("raw_ids", _parse_bool, False, "map string ids to dense ids; vocabularies are written to workdir"),
    Key("workdir", str, "pi2i-out", "directory for artifacts whose path is left empty"),
    Key("index", str, "", "index file; empty means workdir/index.tsv"),
    Key("samples", str, "", "sample dump; empty means workdir/samples.tsv"),
    Key("checkpoint", str, "", "model checkpoint; empty means workdir/model.ckpt"),
    Key("reports", str, "", "report directory; empty means workdir/reports"),
    Key("seed", int, 0, "root seed; stage seeds are derived from it"),
    # split
    Key("min_len", int, 3, "users with fewer clicks get no valid/test target"),
    Key("split", str, "test", "evaluation queries: test or valid"),
    # indexer
    Key("alpha", float, 1.0, "swing smoothing constant"),
    Key("T", int, 1250, "truncation size per trigger list"),
    Key("weighted", _parse_bool, True, "weight users by 1/sqrt(#clicked items)"),
    Key("exclude_self_pairs", _parse_bool, False, "drop u=v terms from the swing sum"),
    Key("window", int, 0, "co-click window in positions (0 = whole history)"),
    Key("user_cap", int, 500, "keep each user's N most recent distinct items (0 = no cap)"),
    Key("min_score", float, 0.0, "drop index entries scoring below this"),
    # sampler
    Key("n_hard", int, 20, "hard negatives per sample"),
    Key("n_easy", int, 80, "easy negatives per sample"),
    Key("hard_bias", float, 1.0, "exponent on (L - rank + 1) for hard negatives"),
    Key("easy_bias", float, 1.0, "exponent on rank for easy negatives"),
    Key("max_seq_len", int, 50, "most recent clicks used as triggers and attention keys"),
    # model
    Key("learning_rate", float, 0.01, "Adam learning rate"),
    Key("batch_size", int, 512, "samples per Adam step"),
    Key("embedding_dim", int, 64, "embedding width d"),
    Key("heads", int, 2, "attention heads"),
    Key("key_dim", int, 0, "per-head key width (0 = d / heads)"),
    Key("query_hidden", int, 0, "query MLP hidden width (0 = 2d)"),
    Key("out_hidden", _parse_ints, (128, 64), "output MLP hidden widths"),
    Key("epochs", int, 1, "training epochs"),
    Key("attention_mode", str, "target", "target or self"),
    Key("trigger_mode", str, "multi", "multi, single_random or none"),
    Key("scale_attention_output", _parse_bool, False, "scale attention output instead of logits by 1/sqrt(d_k)"),
    # evaluation
    Key("scorer", str, "model", "model or swing (sum of swing scores over triggers)"),
    Key("ks", _parse_ints, (50, 100, 200, 500, 1000), "K values for HR@K"),
    Key("retrieve_k", int, 50, "items listed per query by retrieve"),
    Key("sweep_T", _parse_ints, (50, 250, 1250), "truncation sizes for sweep"),
    Key("stats_k", int, 0, "Top-K used for trigger-index stats (0 = max of ks)"),
    Key("top_users", int, 3, "users with per-user trigger-index histograms"),
)
KEY_BY_NAME = {k.name: k for k in KEYS}


def default_config() -> dict[str, Any]:
    return {k.name: k.default for k in KEYS}


def parse_value(name: str, text: str) -> Any:
    key = KEY_BY_NAME.get(name)
    if key is None:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        return key.parse(text.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {e}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        name, value = line.split("=", 1)
        name = name.strip()
        if name in out:
            raise ConfigError(f"{source}:{n}: duplicate key {name!r}")
        out[name] = parse_value(name, value)
    return out


def dump_config(cfg: dict[str, Any]) -> str:
    """Canonical form: every key in declaration order."""
    return "".join(f"{k.name} = {_fmt(cfg[k.name])}\n" for k in KEYS)


def validate(cfg: dict[str, Any]) -> None:
    if cfg["format"] not in ("tsv", "csv"):
        raise ConfigError(f"format must be tsv or csv, got {cfg['format']!r}")
    if cfg["split"] not in ("test", "valid"):
        raise ConfigError(f"split must be test or valid, got {cfg['split']!r}")
    if cfg["scorer"] not in ("model", "swing"):
        raise ConfigError(f"scorer must be model or swing, got {cfg['scorer']!r}")
    if not cfg["ks"] or min(cfg["ks"]) < 1:
        raise ConfigError("ks must list positive integers")
    if not cfg["sweep_T"] or min(cfg["sweep_T"]) < 1:
        raise ConfigError("sweep_T must list positive integers")
    for name in ("T", "retrieve_k", "min_len"):
        if cfg[name] < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg["alpha"] <= 0:
        raise ConfigError("alpha must be positive")
    for name in ("window", "user_cap", "stats_k", "top_users"):
        if cfg[name] < 0:
            raise ConfigError(f"{name} must be >= 0")
    try:
        sampler_config(cfg)
        train_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def stage_seed(root: int, stage: str) -> int:
    """Stable 32-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{root}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def sampler_config(cfg: dict[str, Any]) -> SamplerConfig:
    return SamplerConfig(
        n_hard=cfg["n_hard"],
        n_easy=cfg["n_easy"],
        hard_bias=cfg["hard_bias"],
        easy_bias=cfg["easy_bias"],
        seed=stage_seed(cfg["seed"], "sample"),
        max_seq_len=cfg["max_seq_len"],
    )


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        embedding_dim=cfg["embedding_dim"],
        heads=cfg["heads"],
        key_dim=cfg["key_dim"],
        query_hidden=cfg["query_hidden"],
        out_hidden=tuple(cfg["out_hidden"]),
        max_seq_len=cfg["max_seq_len"],
        epochs=cfg["epochs"],
        seed=stage_seed(cfg["seed"], "train"),
        attention_mode=cfg["attention_mode"],
        trigger_mode=cfg["trigger_mode"],
        scale_attention_output=cfg["scale_attention_output"],
    )


def path_of(cfg: dict[str, Any], name: str) -> Path:
    defaults = {"index": "index.tsv", "samples": "samples.tsv", "checkpoint": "model.ckpt", "reports": "reports"}
    return Path(cfg[name]) if cfg[name] else Path(cfg["workdir"]) / defaults[name]


# ---------------------------------------------------------------------------
# pipeline pieces


@dataclass
class Data:
    interactions: list[Interaction]
    split: DatasetSplit
    space: FeatureSpace


def load_data(cfg: dict[str, Any]) -> Data:
    if not cfg["data"]:
        raise ConfigError("no input: set data = <interaction file>")
    path = Path(cfg["data"])
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    users = items = None
    if cfg["raw_ids"]:
        users, items = Vocabulary(), Vocabulary()
    result = load_interactions(path, cfg["format"], users, items)
    if not result.interactions:
        raise ConfigError(f"{path}: no valid interactions")
    if users is not None:
        work = Path(cfg["workdir"])
        work.mkdir(parents=True, exist_ok=True)
        users.save(work / "users.vocab")
        items.save(work / "items.vocab")
    split = split_leave_last(build_histories(result.interactions), min_len=cfg["min_len"])
    space = FeatureSpace.from_interactions(result.interactions)
    return Data(result.interactions, split, space)


def require(path: Path, made_by: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{path} not found (run `pi2i {made_by}` first)")
    return path


def load_table(cfg: dict[str, Any], data: Data) -> I2ITable:
    table = load_index(require(path_of(cfg, "index"), "build-index"))
    if table.vocab_hash and table.vocab_hash != data.space.vocab_hash:
        raise VocabularyMismatch(
            f"index was built for vocabulary {table.vocab_hash}, data has {data.space.vocab_hash}"
        )
    return table


def make_scorer(cfg: dict[str, Any], data: Data, table: I2ITable):
    if cfg["scorer"] == "swing":
        return swing_scorer, cfg["max_seq_len"]
    params, tcfg = load_params(require(path_of(cfg, "checkpoint"), "train"), data.space)
    if table.vocab_hash and table.vocab_hash != params.space.vocab_hash:
        raise VocabularyMismatch("checkpoint and index were built from different vocabularies")
    return ModelScorer(params, tcfg), tcfg.max_seq_len


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_build_index(cfg: dict[str, Any], threads: int) -> int:
    data = load_data(cfg)
    t0 = time.perf_counter()
    table = build_index(
        data.split.train_histories,
        alpha=cfg["alpha"],
        T=cfg["T"],
        weighted=cfg["weighted"],
        min_score=cfg["min_score"],
        exclude_self_pairs=cfg["exclude_self_pairs"],
        window=cfg["window"] or None,
        user_cap=cfg["user_cap"] or None,
        vocab_hash=data.space.vocab_hash,
    )
    out = path_of(cfg, "index")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_index(table, out)
    n = len(table.triggers)
    stats = {
        "items_indexed": n,
        "entries": int(table.n_entries),
        "mean_list_length": table.n_entries / n if n else 0.0,
        "T": cfg["T"],
        "alpha": cfg["alpha"],
        "vocab_hash": data.space.vocab_hash,
    }
    write_text(path_of(cfg, "reports") / "build_index.jsonl", json.dumps(stats, sort_keys=True) + "\n")
    _note(
        f"indexed {n} items, {stats['entries']} entries, mean list length {stats['mean_list_length']:.2f} "
        f"({time.perf_counter() - t0:.1f}s) -> {out}"
    )
    return EXIT_OK


def _samples(cfg, data, table, threads):
    samples, stats = sample_dataset(data.split, table, sampler_config(cfg), threads=threads)
    _note(f"samples kept {stats.n_kept} of {stats.n_attempted} (discard rate {stats.discard_rate:.4f})")
    return samples, stats


def cmd_sample(cfg: dict[str, Any], threads: int) -> int:
    data = load_data(cfg)
    table = load_table(cfg, data)
    samples, stats = _samples(cfg, data, table, threads)
    out = path_of(cfg, "samples")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_samples(out, samples)
    rows = [
        ("attempted", stats.n_attempted),
        ("kept", stats.n_kept),
        ("discarded", stats.n_discarded),
        ("discard_rate", f"{stats.discard_rate:.17g}"),
        ("mean_positive_triggers", f"{stats.mean_positive_triggers:.17g}"),
        ("mean_hard", f"{stats.mean_hard:.17g}"),
        ("mean_easy", f"{stats.mean_easy:.17g}"),
    ]
    write_text(path_of(cfg, "reports") / "sample_stats.tsv", "stat\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows))
    return EXIT_OK


def cmd_train(cfg: dict[str, Any], threads: int) -> int:
    data = load_data(cfg)
    table = load_table(cfg, data)
    samples, _ = _samples(cfg, data, table, threads)
    if not samples:
        raise ConfigError("no training samples survive the discard rule; check T and the data")
    tcfg = train_config(cfg)
    params, tlog = train(samples, data.space, tcfg)
    ckpt = path_of(cfg, "checkpoint")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_params(ckpt, params, tcfg)
    reports = path_of(cfg, "reports")
    reports.mkdir(parents=True, exist_ok=True)
    tlog.write(reports / "train_log.tsv")
    for epoch, loss, wall in tlog.epochs:
        _note(f"epoch {epoch}: mean loss {loss:.6f} ({wall:.1f}s)")
    _note(f"checkpoint -> {ckpt}")
    return EXIT_OK


def _queries(cfg, data):
    queries = data.split.queries(cfg["split"])
    if not queries:
        raise ConfigError(f"no {cfg['split']} queries (every user has fewer than min_len={cfg['min_len']} clicks)")
    return queries


def cmd_evaluate(cfg: dict[str, Any], threads: int) -> int:
    from .plotting import plot_hr_curve

    data = load_data(cfg)
    table = load_table(cfg, data)
    scorer, seq_len = make_scorer(cfg, data, table)
    queries = _queries(cfg, data)
    report, _ = evaluate(queries, table, scorer, cfg["ks"], seq_len, threads)
    reports = path_of(cfg, "reports")
    write_text(reports / "eval.tsv", report.to_tsv())
    curves = {cfg["scorer"]: report.hr_at_k}
    if cfg["scorer"] == "model":
        baseline, _ = evaluate(queries, table, swing_scorer, cfg["ks"], seq_len, threads)
        write_text(reports / "eval_swing.tsv", baseline.to_tsv())
        curves["swing"] = baseline.hr_at_k
    plot_hr_curve(curves, reports / "hr_curve.png", pool_hr=report.candidate_pool_hr)
    for k in sorted(report.hr_at_k):
        _note(f"HR@{k} = {report.hr_at_k[k]:.4f}")
    _note(f"candidate pool HR = {report.candidate_pool_hr:.4f} over {report.n_queries} queries")
    return EXIT_OK


def cmd_retrieve(cfg: dict[str, Any], threads: int) -> int:
    data = load_data(cfg)
    table = load_table(cfg, data)
    scorer, seq_len = make_scorer(cfg, data, table)
    runs = run_queries(_queries(cfg, data), table, scorer, cfg["retrieve_k"], seq_len, threads)
    lines = ["user_id\trank\titem_id\tscore\ttrigger"]
    for run in runs:
        for rank, item in enumerate(run.topk, 1):
            best = min(run.provenance[item], key=lambda p: (p[1], p[0]))
            lines.append(f"{run.user_id}\t{rank}\t{item}\t{run.score_of(item):.17g}\t{best[0]}")
    write_text(path_of(cfg, "reports") / "retrieve.tsv", "\n".join(lines) + "\n")
    _note(f"retrieved top-{cfg['retrieve_k']} for {len(runs)} queries")
    return EXIT_OK


def cmd_sweep(cfg: dict[str, Any], threads: int) -> int:
    from .plotting import plot_sweep

    data = load_data(cfg)
    table = load_table(cfg, data)
    scorer, seq_len = make_scorer(cfg, data, table)
    grid = sorted(set(cfg["sweep_T"]))
    kwargs = dict(
        alpha=cfg["alpha"],
        weighted=cfg["weighted"],
        min_score=cfg["min_score"],
        exclude_self_pairs=cfg["exclude_self_pairs"],
        window=cfg["window"] or None,
        user_cap=cfg["user_cap"] or None,
        vocab_hash=data.space.vocab_hash,
    )
    if table.truncation_size >= grid[-1]:
        rows = sweep_truncation(_queries(cfg, data), grid, scorer, cfg["ks"], table=table, max_seq_len=seq_len, threads=threads)
    else:
        _note(f"index truncated at T={table.truncation_size} < {grid[-1]}; rebuilding per T")
        rows = sweep_truncation(
            _queries(cfg, data), grid, scorer, cfg["ks"], histories=data.split.train_histories,
            index_kwargs=kwargs, max_seq_len=seq_len, threads=threads,
        )
    reports = path_of(cfg, "reports")
    write_text(reports / "sweep.tsv", sweep_to_tsv(rows))
    plot_sweep(rows, reports / "sweep.png")
    for r in rows:
        _note(f"T={r.T}: pool HR {r.pool_hr:.4f}, {r.total_candidates} candidates")
    return EXIT_OK


def cmd_stats(cfg: dict[str, Any], threads: int) -> int:
    from .plotting import plot_trigger_index

    data = load_data(cfg)
    table = load_table(cfg, data)
    scorer, seq_len = make_scorer(cfg, data, table)
    queries = _queries(cfg, data)
    K = cfg["stats_k"] or max(cfg["ks"])
    runs = run_queries(queries, table, scorer, K, seq_len, threads)
    stats = trigger_index_stats(runs, [q.truth for q in queries], K=K, top_users=cfg["top_users"])
    reports = path_of(cfg, "reports")
    write_text(reports / "trigger_index.tsv", stats.to_tsv())
    write_text(reports / "trigger_index_users.tsv", stats.per_user_tsv())
    plot_trigger_index(stats, reports / "trigger_index.png", max_index=max(10, min(cfg["max_seq_len"], 20)))
    _note(f"trigger index mode: {stats.mode()} ({sum(stats.overall.values())} hits at K={K})")
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[dict, int], int], str]] = {
    "build-index": (cmd_build_index, "build the swing item-to-item index from the training split"),
    "sample": (cmd_sample, "dump trigger-target training samples"),
    "train": (cmd_train, "train the scorer and write a checkpoint"),
    "evaluate": (cmd_evaluate, "HR@K on held-out queries"),
    "retrieve": (cmd_retrieve, "list the top-K items per query"),
    "sweep": (cmd_sweep, "HR against index truncation size"),
    "stats": (cmd_stats, "which history position triggered each hit"),
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pi2i", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: available cores)")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        keys = p.add_argument_group("config keys (file or flag; flags win)")
        for k in KEYS:
            keys.add_argument(f"--{k.name}", metavar="V", default=None, help=f"{k.help} (default: {_fmt(k.default) or '<empty>'})")
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for k in KEYS:
        raw = getattr(args, k.name)
        if raw is not None:
            cfg[k.name] = parse_value(k.name, raw)
    validate(cfg)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_LEVEL_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run, _ = COMMANDS[args.command]
        with threadpool_limits(limits=args.threads):
            code = run(cfg, args.threads)
        write_text(path_of(cfg, "reports") / f"{args.command}.config", dump_config(cfg))
        return code
    except ConfigError as e:
        _note(f"pi2i {args.command}: error: {e}")
        return EXIT_USAGE
    except (VocabularyMismatch, IndexFormatError, MalformedInputError, TrainingDiverged, ValueError, OSError) as e:
        _note(f"pi2i {args.command}: failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
