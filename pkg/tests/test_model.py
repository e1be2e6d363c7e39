import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bucket, central_difference, straight_line_logit
from pi2i.corpus import Interaction, build_histories, split_leave_last
from pi2i.indexer import build_index
from pi2i.model import (
    FeatureSpace,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    VocabularyMismatch,
    attention_weights,
    encode,
    encode_samples,
    forward,
    grad,
    init_params,
    load_params,
    log_bucket,
    loss,
    loss_and_grad,
    save_params,
    score_batch,
    softmax_loss,
    train,
)
from pi2i.model.features import log_buckets, select_triggers
from pi2i.sampler import SamplerConfig, sample_dataset
from pi2i.synthetic import toy_log


def plain_log(seed=0, n_users=25, n_items=18):
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        for t in range(int(rng.integers(4, 9))):
            out.append(Interaction(u, int(rng.integers(n_items)), t))
    return out


def setup(log, n_hard=3, n_easy=3, T=8):
    split = split_leave_last(build_histories(log))
    table = build_index(split.train_histories, T=T)
    samples, _ = sample_dataset(split, table, SamplerConfig(n_hard=n_hard, n_easy=n_easy))
    return FeatureSpace.from_interactions(log), samples, table


@pytest.fixture(scope="module")
def plain():
    return setup(plain_log())


@pytest.fixture(scope="module")
def toy():
    return setup(toy_log())


# -- features ------------------------------------------------------------------


@given(st.floats(min_value=-10, max_value=1e9, allow_nan=False), st.sampled_from([0, 12, 15]))
def test_log_bucket_matches_oracle(x, offset):
    assert log_bucket(x, offset) == bucket(x, offset)
    assert log_buckets(np.array([x]), offset)[0] == bucket(x, offset)


def test_log_bucket_edges():
    assert log_bucket(float("nan"), 0) == 1
    assert log_bucket(0.0, 0) == 1
    assert log_bucket(1.0, 0) == 1 and log_bucket(2.0, 0) == 2 and log_bucket(1e30, 0) == 16


def test_unknown_ids_map_to_row_zero():
    space = FeatureSpace.build([5, 3], [1])
    assert space.item_rows([3, 5, 4]).tolist() == [1, 2, 0]
    assert space.user_row(1) == 1 and space.user_row(9) == 0


def test_vocab_hash_tracks_vocabulary():
    a = FeatureSpace.build([1, 2], [0])
    assert a.vocab_hash == FeatureSpace.build([2, 1], [0]).vocab_hash
    assert a.vocab_hash != FeatureSpace.build([1, 2, 3], [0]).vocab_hash


def test_cross_features_match_oracle(toy):
    space, samples, _ = toy
    b = encode_samples(space, samples, 50)
    for s, smp in enumerate(samples):
        for c, cand in enumerate(smp.candidates):
            prov = smp.trigger_of.get(cand, ())
            if not prov:
                assert b.cross_rows[s, c].tolist() == [0, 0, 0, 0]
                continue
            pt = space.prices[space.item_rows([cand])[0]]
            pr = space.prices[space.item_rows([t for t, _, _ in prov])]
            mean = sum(pr) / len(pr)
            gap = abs(pt - mean) / max(abs(pt), abs(mean))
            want = [bucket(min(p[1] for p in prov), 0), bucket(max(p[2] for p in prov), 12), bucket(len(prov), 0), bucket(gap, 15)]
            assert b.cross_rows[s, c].tolist() == want


def test_trigger_modes():
    prov = ((1, 2, 0.5), (3, 1, 0.9), (4, 7, 0.1))
    assert select_triggers(prov, "multi", 0, 0, 9) == prov
    assert select_triggers(prov, "none", 0, 0, 9) == ()
    one = select_triggers(prov, "single_random", 0, 0, 9)
    assert len(one) == 1 and one[0] in prov
    assert one == select_triggers(prov, "single_random", 0, 0, 9)
    picks = {select_triggers(prov, "single_random", s, 0, 9) for s in range(40)}
    assert len(picks) == 3


def test_none_mode_zeroes_trigger_inputs(plain):
    space, samples, _ = plain
    b = encode_samples(space, samples[:5], 50, trigger_mode="none")
    assert not b.trig_w.any() and not b.cross_rows.any()


# -- forward -------------------------------------------------------------------


def test_zero_network_gives_zero_logits(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(5,))
    P = init_params(space, cfg)
    for k in P:
        P[k][...] = 0.0
    b = encode_samples(space, samples[:4], 50)
    logits = score_batch(P, b, cfg)
    assert np.all(logits[b.cand_mask] == 0.0)


def test_single_event_sequence_ignores_query(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, heads=2, out_hidden=(6,))
    P = init_params(space, cfg)
    smp = samples[0]
    q = [(smp.user_id, smp.history[-1:], smp.candidates, smp.trigger_of)]
    b = encode(space, q, 50)
    A = attention_weights(P, b, cfg)
    assert np.all(A[..., 0] == 1.0)
    before = score_batch(P, b, cfg)
    for name in ("q_w1", "q_w2", "q_b1", "q_b2"):
        P[name][...] = np.random.default_rng(1).normal(size=P[name].shape)
    np.testing.assert_array_equal(score_batch(P, b, cfg), before)


@pytest.mark.parametrize("heads,literal", [(1, False), (2, False), (1, True)])
def test_forward_matches_straight_line(plain, heads, literal):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, heads=heads, out_hidden=(7, 3), scale_attention_output=literal, seed=heads)
    P = init_params(space, cfg)
    rng = np.random.default_rng(9)
    for k in P:
        P[k][...] = rng.normal(scale=0.7, size=P[k].shape)
    smp = next(s for s in samples if len(s.history) >= 3)
    history = smp.history[-3:]
    for cand in smp.candidates:
        prov = smp.trigger_of.get(cand, ())
        cross = [0, 0, 0, 0]
        if prov:
            cross = [bucket(min(p[1] for p in prov), 0), bucket(max(p[2] for p in prov), 12), bucket(len(prov), 0), 0]
        want = straight_line_logit(
            P,
            space.item_rows(history).tolist(),
            int(space.item_rows([cand])[0]),
            space.item_rows([p[0] for p in prov]).tolist(),
            cross,
            space.user_row(smp.user_id),
            heads,
            cfg.d_k,
            len(cfg.out_hidden) + 1,
            literal,
        )
        b = encode(space, [(smp.user_id, history, [cand], smp.trigger_of)], 50)
        assert float(score_batch(P, b, cfg)[0, 0]) == pytest.approx(want, abs=1e-10)


def test_forward_single_candidate_api(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    P = init_params(space, cfg)
    smp = samples[3]
    b = encode(space, [(smp.user_id, smp.history, smp.candidates, smp.trigger_of)], cfg.max_seq_len)
    logits = score_batch(P, b, cfg)[0]
    for c, cand in enumerate(smp.candidates):
        assert forward(P, smp, cand, cfg) == pytest.approx(logits[c], abs=1e-12)


def test_padding_does_not_change_scores(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    P = init_params(space, cfg)
    alone = [score_batch(P, encode_samples(space, [s], 50), cfg)[0, : len(s.candidates)] for s in samples[:6]]
    together = score_batch(P, encode_samples(space, samples[:6], 50), cfg)
    for k, s in enumerate(samples[:6]):
        np.testing.assert_allclose(together[k, : len(s.candidates)], alone[k], rtol=0, atol=1e-12)
        assert np.all(np.isnan(together[k, len(s.candidates) :]))


# -- loss ----------------------------------------------------------------------


def test_loss_closed_forms():
    assert softmax_loss([0.3, 0.3]) == pytest.approx(math.log(2), abs=1e-15)
    assert softmax_loss([1.0, 0.0]) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-15)
    assert softmax_loss([1.0, 0.0]) == pytest.approx(0.313262, abs=1e-6)


def test_loss_monotone_and_stable():
    vals = [softmax_loss([p, 0.0, -1.0]) for p in np.linspace(-5, 20, 40)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert softmax_loss([800.0, 0.0, -1.0]) == 0.0
    assert softmax_loss([1000.0, 999.0]) == pytest.approx(softmax_loss([1.0, 0.0]), abs=1e-12)
    assert math.isfinite(softmax_loss([-1e4, 1e4]))


def test_equal_logit_gradient_on_positive():
    # d loss / d logit_p = p_p - 1 = -(1 - 1/(1+|V|)) when all logits tie
    for n_neg in (1, 3, 9):
        z = np.zeros(n_neg + 1)
        d = central_difference(lambda: softmax_loss(z), z, 0, h=1e-6)
        assert d == pytest.approx(-(1 - 1 / (1 + n_neg)), abs=1e-8)


def test_loss_of_sample(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    P = init_params(space, cfg)
    smp = samples[0]
    logits = [forward(P, smp, c, cfg) for c in smp.candidates]
    assert loss(P, smp, cfg) == pytest.approx(softmax_loss(logits), abs=1e-12)


# -- gradients -----------------------------------------------------------------


def test_duplicated_batch_same_gradient(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    P = init_params(space, cfg)
    g1 = grad(P, [samples[2]], cfg)
    g2 = grad(P, [samples[2], samples[2]], cfg)
    assert g1.allclose(g2, rtol=1e-12, atol=1e-15)


def test_untouched_rows_have_zero_gradient(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    P = init_params(space, cfg)
    batch = samples[:3]
    G = grad(P, batch, cfg)
    touched = set()
    for s in batch:
        touched |= set(s.history) | set(s.candidates) | {t for c in s.candidates for t, _, _ in s.trigger_of.get(c, ())}
    rows = set(space.item_rows(sorted(touched)).tolist())
    for r in range(G["emb_item"].shape[0]):
        if r not in rows:
            assert not G["emb_item"][r].any()
    users = {space.user_row(s.user_id) for s in batch}
    for r in range(G["emb_user"].shape[0]):
        if r not in users:
            assert not G["emb_user"][r].any()


@pytest.mark.parametrize("attention", ["target", "self"])
@pytest.mark.parametrize("trigger_mode", ["multi", "single_random", "none"])
def test_gradient_matches_finite_differences(toy, attention, trigger_mode):
    space, samples, _ = toy
    cfg = TrainConfig(embedding_dim=4, heads=2, out_hidden=(5,), attention_mode=attention, trigger_mode=trigger_mode)
    P = init_params(space, cfg, seed=4)
    b = encode_samples(space, samples[:4], 5, trigger_mode, cfg.seed)
    _, _, G = loss_and_grad(P, b, cfg)
    rng = np.random.default_rng(0)
    for name in P:
        for _ in range(2):
            idx = tuple(int(rng.integers(n)) for n in P[name].shape)
            fd = central_difference(lambda: loss_and_grad(P, b, cfg, need_grad=False)[0], P[name], idx)
            assert G[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8), name


# -- training and checkpoints --------------------------------------------------


def test_zero_learning_rate_keeps_params(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,), learning_rate=0.0, batch_size=8)
    P0 = init_params(space, cfg)
    P1, _ = train(samples, space, cfg)
    assert P1.identical(P0)


def test_zero_epochs_is_initialization(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,), epochs=0)
    P1, log = train(samples, space, cfg)
    assert P1.identical(init_params(space, cfg)) and log.epochs == []


def test_training_is_deterministic(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,), batch_size=16, epochs=2)
    a, la = train(samples, space, cfg)
    b, lb = train(samples, space, cfg)
    assert a.identical(b)
    assert [e[1] for e in la.epochs] == [e[1] for e in lb.epochs]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(plain):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    P = init_params(space, cfg)
    P["out_w2"][...] = 1e308
    P["out_b2"][...] = 1e308
    with pytest.raises(TrainingDiverged, match="batch 0"):
        train(samples, space, cfg, params=P)


def test_log_header_records_defaults(tmp_path, plain):
    log = TrainLog(TrainConfig())
    assert "d=64 batch=512 lr=0.01" in log.header()
    space, samples, _ = plain
    _, tlog = train(samples, space, TrainConfig(embedding_dim=4, out_hidden=(4,), epochs=2))
    tlog.write(tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[1] == "epoch\tmean_loss\twall_seconds"
    assert TrainLog.read_losses(tmp_path / "log.tsv") == [e[1] for e in tlog.epochs]


def test_checkpoint_round_trip(tmp_path, toy):
    space, samples, _ = toy
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,), attention_mode="self")
    P, _ = train(samples, space, cfg.with_(epochs=1, batch_size=32))
    save_params(tmp_path / "m.ckpt", P, cfg)
    Q, cfg2 = load_params(tmp_path / "m.ckpt", space)
    assert Q.identical(P) and cfg2 == cfg
    b = encode_samples(space, samples[:5], 50)
    np.testing.assert_array_equal(score_batch(P, b, cfg), score_batch(Q, b, cfg2))


def test_checkpoint_refuses_other_vocabulary(tmp_path, plain, toy):
    space, samples, _ = plain
    cfg = TrainConfig(embedding_dim=4, out_hidden=(4,))
    save_params(tmp_path / "m.ckpt", init_params(space, cfg), cfg)
    with pytest.raises(VocabularyMismatch):
        load_params(tmp_path / "m.ckpt", toy[0])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(attention_mode="cross")
    with pytest.raises(ValueError):
        TrainConfig(trigger_mode="all")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(embedding_dim=8, heads=2).d_k == 4
