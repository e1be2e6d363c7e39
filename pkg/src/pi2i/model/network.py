"""Target-attention scoring network with a hand-written backward pass.

Query MLP over [E_trigger, E_target, E_cross] -> multi-head attention over the
behavior sequence -> output MLP over [MHA, E_profile, E_trigger, E_target,
E_cross] -> one logit per candidate.  Everything is float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from ..sampler import TrainingSample
from .features import CROSS_FEATURES, N_BUCKETS, TRIGGER_MODES, Batch, FeatureSpace, encode

_MASKED = -1e30


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 512
    embedding_dim: int = 64
    heads: int = 2
    key_dim: int = 0  # 0 -> embedding_dim // heads
    query_hidden: int = 0  # 0 -> 2 * embedding_dim
    out_hidden: tuple[int, ...] = (128, 64)
    max_seq_len: int = 50
    epochs: int = 1
    seed: int = 0
    attention_mode: str = "target"
    trigger_mode: str = "multi"
    scale_attention_output: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "embedding_dim", "heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.epochs < 0 or self.key_dim < 0 or self.query_hidden < 0:
            raise ValueError("learning_rate, epochs, key_dim and query_hidden must be non-negative")
        if any(w < 1 for w in self.out_hidden):
            raise ValueError("out_hidden widths must be positive")
        if self.attention_mode not in ("target", "self"):
            raise ValueError(f"attention_mode must be 'target' or 'self', got {self.attention_mode!r}")
        if self.trigger_mode not in TRIGGER_MODES:
            raise ValueError(f"trigger_mode must be one of {TRIGGER_MODES}, got {self.trigger_mode!r}")

    @property
    def d_k(self) -> int:
        return self.key_dim or max(1, self.embedding_dim // self.heads)

    @property
    def q_hidden(self) -> int:
        return self.query_hidden or 2 * self.embedding_dim

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass(eq=False)
class ModelParams:
    """Named float64 tensors in a fixed order, plus the feature vocabulary they index."""

    tensors: dict[str, np.ndarray]
    space: FeatureSpace = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.space)

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.tensors.items()}, self.space)

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return list(self) == list(other) and all(np.allclose(self[k], other[k], **kw) for k in self)

    def identical(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


def param_shapes(space: FeatureSpace, cfg: TrainConfig) -> dict[str, tuple[int, ...]]:
    """Tensor layout; this order is also the checkpoint order."""
    d, n, dk = cfg.embedding_dim, cfg.heads, cfg.d_k
    d_item = d * (1 + len(space.fields))
    shapes: dict[str, tuple[int, ...]] = {"emb_item": (space.n_items + 1, d)}
    for f in space.fields:
        shapes[f"emb_{f}"] = (len(space.field_values[f]) + 1, d)
    shapes["emb_user"] = (space.n_users + 1, d)
    for c in CROSS_FEATURES:
        shapes[f"emb_cross_{c}"] = (N_BUCKETS + 1, d)
    if cfg.attention_mode == "target":
        d_q = 2 * d_item + len(CROSS_FEATURES) * d
        shapes.update(q_w1=(d_q, cfg.q_hidden), q_b1=(cfg.q_hidden,), q_w2=(cfg.q_hidden, n * dk), q_b2=(n * dk,))
    else:
        shapes["attn_wq"] = (n, d_item, dk)
    shapes["attn_wk"] = (n, d_item, dk)
    shapes["attn_wv"] = (n, d_item, dk)
    width = n * dk + d + 2 * d_item + len(CROSS_FEATURES) * d
    for k, h in enumerate(cfg.out_hidden + (1,), 1):
        shapes[f"out_w{k}"] = (width, h)
        shapes[f"out_b{k}"] = (h,)
        width = h
    return shapes


def init_params(space: FeatureSpace, cfg: TrainConfig, seed: int | None = None) -> ModelParams:
    """Embeddings ~ U(-1/sqrt(d), 1/sqrt(d)); weights ~ U(-1/sqrt(fan_in), ...); biases 0."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(space, cfg).items():
        if name.startswith("emb_"):
            bound = 1.0 / np.sqrt(cfg.embedding_dim)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith(("q_b", "out_b")):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[-2])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors, space)


def check_params(params: ModelParams, cfg: TrainConfig) -> None:
    expected = param_shapes(params.space, cfg)
    if list(expected) != list(params):
        raise ValueError(f"tensor names {list(params)} do not match config layout {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"{name}: non-finite values")


# ---------------------------------------------------------------------------
# forward


def _item_table(P: ModelParams) -> np.ndarray:
    """Per item row: id embedding followed by its side-field embeddings, (R, Di)."""
    parts = [P["emb_item"]]
    for f in P.space.fields:
        parts.append(P[f"emb_{f}"][P.space.field_rows[f]])
    return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]


def _trigger_matrix(b: Batch, n_rows: int) -> sp.csr_matrix:
    """Sparse (S*Cm, R) averaging weights over each candidate's triggers."""
    S, Cm, Tm = b.trig_rows.shape
    w = b.trig_w.reshape(-1)
    keep = w != 0
    slots = np.repeat(np.arange(S * Cm), Tm)[keep]
    return sp.csr_matrix((w[keep], (slots, b.trig_rows.reshape(-1)[keep])), shape=(S * Cm, n_rows))


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, _MASKED)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z) * mask
    return e / e.sum(axis=-1, keepdims=True)


def _relu(x):
    return np.maximum(x, 0.0)


def _heads_proj(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """(S, L, D) x (n, D, dk) -> (S, n, L, dk)."""
    n, D, dk = W.shape
    S, L, _ = x.shape
    return (x.reshape(S * L, D) @ W.transpose(1, 0, 2).reshape(D, n * dk)).reshape(S, L, n, dk).transpose(0, 2, 1, 3)


def _heads_proj_grads(x: np.ndarray, W: np.ndarray, dY: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`_heads_proj` w.r.t. W and x given dY (S, n, L, dk)."""
    n, D, dk = W.shape
    S, L, _ = x.shape
    dY2 = dY.transpose(0, 2, 1, 3).reshape(S * L, n * dk)
    W2 = W.transpose(1, 0, 2).reshape(D, n * dk)
    dW = (x.reshape(S * L, D).T @ dY2).reshape(D, n, dk).transpose(1, 0, 2)
    return dW, (dY2 @ W2.T).reshape(S, L, D)


def _flat_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over all leading axes of outer(a, b)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _scatter_add(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """``target[rows] += values`` with repeated rows accumulated."""
    rows = rows.reshape(-1)
    m = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(target.shape[0], len(rows)))
    target += m @ values.reshape(len(rows), -1)


def _forward(P: ModelParams, b: Batch, cfg: TrainConfig):
    S, Cm = b.target_rows.shape
    n, dk = cfg.heads, cfg.d_k
    s_in, s_out = (1.0, 1.0 / np.sqrt(dk)) if cfg.scale_attention_output else (1.0 / np.sqrt(dk), 1.0)
    c: dict = {"s_in": s_in, "s_out": s_out}

    table = _item_table(P)
    x_seq = table[b.seq_rows]  # (S, L, Di)
    x_tgt = table[b.target_rows]  # (S, Cm, Di)
    trig_m = _trigger_matrix(b, table.shape[0])
    e_trig = (trig_m @ table).reshape(S, Cm, table.shape[1])
    e_cross = np.concatenate([P[f"emb_cross_{f}"][b.cross_rows[..., k]] for k, f in enumerate(CROSS_FEATURES)], axis=-1)
    e_prof = P["emb_user"][b.user_rows]  # (S, d)

    K = _heads_proj(x_seq, P["attn_wk"])  # (S, n, L, dk)
    V = _heads_proj(x_seq, P["attn_wv"])
    key_mask = b.seq_mask[:, None, None, :]
    c.update(trig_m=trig_m, x_seq=x_seq, x_tgt=x_tgt, e_trig=e_trig, e_cross=e_cross, K=K, V=V)

    if cfg.attention_mode == "target":
        xq = np.concatenate([e_trig, x_tgt, e_cross], axis=-1)
        a1 = xq @ P["q_w1"] + P["q_b1"]
        h1 = _relu(a1)
        qf = h1 @ P["q_w2"] + P["q_b2"]
        Q = qf.reshape(S, Cm, n, dk).transpose(0, 2, 1, 3)  # (S, n, Cm, dk)
        A = _masked_softmax(Q @ K.transpose(0, 1, 3, 2) * s_in, key_mask)  # (S, n, Cm, L)
        H = (A @ V) * s_out  # (S, n, Cm, dk)
        mha = H.transpose(0, 2, 1, 3).reshape(S, Cm, n * dk)
        c.update(xq=xq, a1=a1, h1=h1, Q=Q, A=A)
    else:
        Qs = _heads_proj(x_seq, P["attn_wq"])
        A = _masked_softmax(Qs @ K.transpose(0, 1, 3, 2) * s_in, key_mask)  # (S, n, L, L)
        O = (A @ V) * s_out  # (S, n, L, dk)
        qw = b.seq_mask / b.seq_mask.sum(axis=1, keepdims=True)  # (S, L)
        pooled = np.einsum("sl,shlk->shk", qw, O)
        mha = np.broadcast_to(pooled.reshape(S, 1, n * dk), (S, Cm, n * dk))
        c.update(Qs=Qs, A=A, qw=qw)

    z = np.concatenate(
        [mha, np.broadcast_to(e_prof[:, None, :], (S, Cm, e_prof.shape[-1])), e_trig, x_tgt, e_cross], axis=-1
    )
    acts = [z]
    pre = []
    n_layers = len(cfg.out_hidden) + 1
    h = z
    for k in range(1, n_layers + 1):
        a = h @ P[f"out_w{k}"] + P[f"out_b{k}"]
        pre.append(a)
        h = _relu(a) if k < n_layers else a
        acts.append(h)
    c.update(acts=acts, pre=pre)
    return h[..., 0], c


def score_batch(params: ModelParams, batch: Batch, cfg: TrainConfig) -> np.ndarray:
    """Logits (S, Cm); padded candidate slots are NaN."""
    logits, _ = _forward(params, batch, cfg)
    return np.where(batch.cand_mask, logits, np.nan)


def attention_weights(params: ModelParams, batch: Batch, cfg: TrainConfig) -> np.ndarray:
    _, c = _forward(params, batch, cfg)
    return c["A"]


def forward(params: ModelParams, sample: TrainingSample, candidate: int, cfg: TrainConfig) -> float:
    """Logit of one candidate of a training sample (uses the candidate's full provenance)."""
    prov = {candidate: sample.trigger_of.get(candidate, ())}
    b = encode(params.space, [(sample.user_id, sample.history, [candidate], prov)], cfg.max_seq_len, cfg.trigger_mode, cfg.seed)
    return float(score_batch(params, b, cfg)[0, 0])


# ---------------------------------------------------------------------------
# loss and backward


def _sample_losses(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample softmax cross-entropy with the positive in slot 0; also returns probabilities."""
    z = np.where(mask, logits, _MASKED)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m) * mask
    tot = e.sum(axis=1, keepdims=True)
    losses = (np.log(tot) + m)[:, 0] - z[:, 0]
    return losses, e / tot


def softmax_loss(logits: np.ndarray) -> float:
    """-log softmax(logits)[0] for one sample, max-shifted."""
    losses, _ = _sample_losses(np.asarray(logits, dtype=np.float64)[None, :], np.ones((1, len(logits)), dtype=bool))
    return float(losses[0])


def _scatter_item_table(G: dict, P: ModelParams, d_table: np.ndarray) -> None:
    d = P["emb_item"].shape[1]
    G["emb_item"] += d_table[:, :d]
    for k, f in enumerate(P.space.fields, 1):
        _scatter_add(G[f"emb_{f}"], P.space.field_rows[f], d_table[:, k * d : (k + 1) * d])


def loss_and_grad(params: ModelParams, batch: Batch, cfg: TrainConfig, need_grad: bool = True):
    """Mean sampled-softmax loss over the batch, per-sample losses, and the exact gradient."""
    P = params
    logits, c = _forward(P, batch, cfg)
    losses, probs = _sample_losses(logits, batch.cand_mask)
    loss = float(losses.mean())
    if not need_grad:
        return loss, losses, None

    S, Cm = batch.target_rows.shape
    n, dk = cfg.heads, cfg.d_k
    d = cfg.embedding_dim
    G = {k: np.zeros_like(v) for k, v in P.items()}

    dlogit = probs.copy()
    dlogit[:, 0] -= 1.0
    dlogit /= S
    dh = dlogit[..., None]  # (S, Cm, 1)
    n_layers = len(cfg.out_hidden) + 1
    for k in range(n_layers, 0, -1):
        if k < n_layers:
            dh = dh * (c["pre"][k - 1] > 0)
        h_in = c["acts"][k - 1]
        G[f"out_w{k}"] += _flat_outer(h_in, dh)
        G[f"out_b{k}"] += dh.sum(axis=(0, 1))
        dh = dh @ P[f"out_w{k}"].T
    dz = dh

    d_item = c["x_tgt"].shape[-1]
    w_mha = n * dk
    offs = np.cumsum([0, w_mha, d, d_item, d_item])
    d_mha = dz[..., offs[0] : offs[1]]
    d_prof = dz[..., offs[1] : offs[2]].sum(axis=1)
    d_trig = dz[..., offs[2] : offs[3]].copy()
    d_tgt = dz[..., offs[3] : offs[4]].copy()
    d_cross = dz[..., offs[4] :].copy()

    K, V, A = c["K"], c["V"], c["A"]
    s_in, s_out = c["s_in"], c["s_out"]
    if cfg.attention_mode == "target":
        dH = d_mha.reshape(S, Cm, n, dk).transpose(0, 2, 1, 3) * s_out  # (S, n, Cm, dk)
        dV = A.transpose(0, 1, 3, 2) @ dH  # (S, n, L, dk)
        dA = dH @ V.transpose(0, 1, 3, 2)  # (S, n, Cm, L)
        dL = A * (dA - (A * dA).sum(axis=-1, keepdims=True)) * s_in
        dQ = dL @ K  # (S, n, Cm, dk)
        dK = dL.transpose(0, 1, 3, 2) @ c["Q"]  # (S, n, L, dk)
        dqf = dQ.transpose(0, 2, 1, 3).reshape(S, Cm, n * dk)
        G["q_w2"] += _flat_outer(c["h1"], dqf)
        G["q_b2"] += dqf.sum(axis=(0, 1))
        da1 = (dqf @ P["q_w2"].T) * (c["a1"] > 0)
        G["q_w1"] += _flat_outer(c["xq"], da1)
        G["q_b1"] += da1.sum(axis=(0, 1))
        dxq = da1 @ P["q_w1"].T
        d_trig += dxq[..., :d_item]
        d_tgt += dxq[..., d_item : 2 * d_item]
        d_cross += dxq[..., 2 * d_item :]
        dx_seq = np.zeros_like(c["x_seq"])
    else:
        d_pooled = d_mha.sum(axis=1).reshape(S, n, dk)  # broadcast over candidates
        dO = np.einsum("sl,shk->shlk", c["qw"], d_pooled) * s_out
        dV = A.transpose(0, 1, 3, 2) @ dO
        dA = dO @ V.transpose(0, 1, 3, 2)
        dL = A * (dA - (A * dA).sum(axis=-1, keepdims=True)) * s_in
        dQs = dL @ K
        dK = dL.transpose(0, 1, 3, 2) @ c["Qs"]
        dW, dx_seq = _heads_proj_grads(c["x_seq"], P["attn_wq"], dQs)
        G["attn_wq"] += dW

    x_seq = c["x_seq"]
    dWk, dxk = _heads_proj_grads(x_seq, P["attn_wk"], dK)
    dWv, dxv = _heads_proj_grads(x_seq, P["attn_wv"], dV)
    G["attn_wk"] += dWk
    G["attn_wv"] += dWv
    dx_seq += dxk + dxv

    d_table = np.zeros((P["emb_item"].shape[0], d_item))
    _scatter_add(d_table, batch.seq_rows, dx_seq * batch.seq_mask[..., None])
    _scatter_add(d_table, batch.target_rows, d_tgt)
    d_table += c["trig_m"].T @ d_trig.reshape(S * Cm, d_item)
    _scatter_item_table(G, P, d_table)
    for k, f in enumerate(CROSS_FEATURES):
        _scatter_add(G[f"emb_cross_{f}"], batch.cross_rows[..., k], d_cross[..., k * d : (k + 1) * d])
    _scatter_add(G["emb_user"], batch.user_rows, d_prof)
    return loss, losses, ModelParams(G, P.space)


def loss(params: ModelParams, sample: TrainingSample, cfg: TrainConfig) -> float:
    if not sample.negatives:
        raise ValueError("sample has no negatives")
    b = encode(params.space, [(sample.user_id, sample.history, sample.candidates, sample.trigger_of)], cfg.max_seq_len, cfg.trigger_mode, cfg.seed)
    return loss_and_grad(params, b, cfg, need_grad=False)[0]


def grad(params: ModelParams, batch: list[TrainingSample], cfg: TrainConfig) -> ModelParams:
    """Gradient of the mean batch loss, shaped like ``params``."""
    if not batch:
        raise ValueError("batch must be nonempty")
    b = encode(params.space, [(s.user_id, s.history, s.candidates, s.trigger_of) for s in batch], cfg.max_seq_len, cfg.trigger_mode, cfg.seed)
    return loss_and_grad(params, b, cfg)[2]
