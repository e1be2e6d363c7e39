"""Adam training loop, training log and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..sampler import TrainingSample
from .features import Batch, FeatureSpace, encode_samples
from .network import ModelParams, TrainConfig, check_params, init_params, loss_and_grad, param_shapes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"#pi2i-ckpt v1\n"


class TrainingDiverged(RuntimeError):
    pass


class VocabularyMismatch(ValueError):
    pass


class Adam:
    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainLog:
    config: TrainConfig
    epochs: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, mean loss, wall seconds)
    initial_loss: float = float("nan")

    def header(self) -> str:
        c = self.config
        return (
            f"# d={c.embedding_dim} batch={c.batch_size} lr={c.learning_rate!r} heads={c.heads} "
            f"d_k={c.d_k} max_seq_len={c.max_seq_len} attention={c.attention_mode} "
            f"trigger={c.trigger_mode} scale_attention_output={int(c.scale_attention_output)} seed={c.seed}"
        )

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.header() + "\n")
            f.write("epoch\tmean_loss\twall_seconds\n")
            for epoch, loss, wall in self.epochs:
                f.write(f"{epoch}\t{loss:.17g}\t{wall:.3f}\n")

    @staticmethod
    def read_losses(path: str | Path) -> list[float]:
        with open(path, encoding="utf-8") as f:
            rows = [line.rstrip("\n").split("\t") for line in f if not line.startswith(("#", "epoch"))]
        return [float(r[1]) for r in rows if r and r[0]]


def train(
    samples: Sequence[TrainingSample],
    space: FeatureSpace,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    steps: int | None = None,
    encoded: Batch | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Adam over shuffled mini-batches for ``cfg.epochs`` epochs (or exactly ``steps`` updates).

    Deterministic given ``cfg.seed``.  A non-finite loss aborts with the
    epoch and batch that produced it.
    """
    if not samples:
        raise ValueError("no training samples")
    params = init_params(space, cfg) if params is None else params.copy()
    check_params(params, cfg)
    data = encoded if encoded is not None else encode_samples(space, samples, cfg.max_seq_len, cfg.trigger_mode, cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 7])
    tlog = TrainLog(cfg)
    n = len(samples)
    budget = steps
    epoch = 0
    while (budget is None and epoch < cfg.epochs) or (budget is not None and budget > 0):
        epoch += 1
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            if budget is not None and budget <= 0:
                break
            idx = order[lo : lo + cfg.batch_size]
            loss, losses, g = loss_and_grad(params, data.take(idx), cfg)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch {b} (samples {idx[:5].tolist()}...)")
            if epoch == 1 and b == 0:
                tlog.initial_loss = loss
            total += float(losses.sum())
            seen += len(idx)
            opt.step(params, g)
            if budget is not None:
                budget -= 1
        tlog.epochs.append((epoch, total / seen, time.perf_counter() - t0))
        log.info("epoch %d mean loss %.6f", epoch, total / seen)
    return params, tlog


def mean_loss(params: ModelParams, samples: Sequence[TrainingSample], cfg: TrainConfig, encoded: Batch | None = None) -> float:
    data = encoded if encoded is not None else encode_samples(params.space, samples, cfg.max_seq_len, cfg.trigger_mode, cfg.seed)
    total = 0.0
    for lo in range(0, len(data), cfg.batch_size):
        _, losses, _ = loss_and_grad(params, data.take(np.arange(lo, min(lo + cfg.batch_size, len(data)))), cfg, need_grad=False)
        total += float(losses.sum())
    return total / len(data)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["out_hidden"] = list(cfg.out_hidden)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["out_hidden"] = tuple(d["out_hidden"])
    return TrainConfig(**d)


def save_params(path: str | Path, params: ModelParams, cfg: TrainConfig) -> None:
    """Header line, one JSON line (config, vocab hash, tensor manifest), then raw <f8 tensors in manifest order."""
    check_params(params, cfg)
    meta = {
        "config": config_to_dict(cfg),
        "vocab_hash": params.space.vocab_hash,
        "tensors": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in params.items():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str | Path, space: FeatureSpace) -> tuple[ModelParams, TrainConfig]:
    """Read a checkpoint; refuses one trained against a different feature vocabulary."""
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a pi2i checkpoint (header {magic[:40]!r})")
        meta = json.loads(f.readline())
        blob = f.read()
    if meta["vocab_hash"] != space.vocab_hash:
        raise VocabularyMismatch(
            f"{path}: checkpoint vocabulary {meta['vocab_hash']} does not match data vocabulary {space.vocab_hash}"
        )
    cfg = config_from_dict(meta["config"])
    expected = param_shapes(space, cfg)
    tensors = {}
    offset = 0
    for name, shape in meta["tensors"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise ValueError(f"{path}: tensor {name} has shape {shape}, config implies {expected.get(name)}")
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    params = ModelParams(tensors, space)
    check_params(params, cfg)
    return params, cfg
