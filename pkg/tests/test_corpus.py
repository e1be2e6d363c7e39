import pytest
from hypothesis import given
from hypothesis import strategies as st

from pi2i.corpus import (
    Interaction,
    MalformedInputError,
    UserHistory,
    Vocabulary,
    build_histories,
    item_side_info,
    load_interactions,
    load_sharded,
    split_leave_last,
    write_histories,
    write_interactions,
)

events = st.lists(
    st.tuples(st.integers(0, 5), st.integers(0, 20), st.integers(0, 50)),
    max_size=60,
)


def _ix(rows):
    return [Interaction(u, i, t) for u, i, t in rows]


def test_negative_ids_rejected():
    with pytest.raises(ValueError):
        Interaction(-1, 3, 0)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    res = load_interactions(p)
    assert res.interactions == [] and res.n_malformed == 0


def test_three_rows_in_file_order(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("3\t9\t100\n1\t2\t50\n3\t1\t100\n")
    res = load_interactions(p)
    assert [(x.user_id, x.item_id, x.timestamp) for x in res.interactions] == [(3, 9, 100), (1, 2, 50), (3, 1, 100)]


def test_malformed_rows_counted(tmp_path):
    good = [f"{u}\t{u + 1}\t{u * 10}" for u in range(8)]
    lines = good[:3] + ["oops"] + good[3:6] + ["1\tx\t5"] + good[6:]
    p = tmp_path / "log.tsv"
    p.write_text("\n".join(lines) + "\n")
    res = load_interactions(p)
    assert len(res.interactions) == 8
    assert res.n_malformed == 2


def test_mostly_malformed_is_fatal(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("a\tb\tc\n1\t2\n0\t1\t5\n")
    with pytest.raises(MalformedInputError):
        load_interactions(p)


def test_side_info_and_csv(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("1,2,3,brand_id=b7,price=9.5\n")
    (x,) = load_interactions(p, format="csv").interactions
    assert x.side_info == {"brand_id": "b7", "price": 9.5}


def test_raw_ids_first_seen(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("alice\tsku9\t1\nbob\tsku2\t2\nalice\tsku2\t3\n")
    users, items = Vocabulary(), Vocabulary()
    res = load_interactions(p, users=users, items=items)
    assert [(x.user_id, x.item_id) for x in res.interactions] == [(0, 0), (1, 1), (0, 1)]
    items.save(tmp_path / "items.vocab")
    assert Vocabulary.load(tmp_path / "items.vocab") == items


def test_sharded_equals_concatenation(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    a.write_text("0\t1\t1\n0\t2\t2\n")
    b.write_text("1\t1\t3\n")
    one = load_sharded([a, b], threads=1)
    two = load_sharded([a, b], threads=2)
    assert one == two
    assert [x.item_id for x in one.interactions] == [1, 2, 1]


def test_build_histories_empty():
    assert build_histories([]) == []


def test_reverse_order_sorted():
    hist = build_histories(_ix([(0, 3, 30), (0, 2, 20), (0, 1, 10)]))
    assert [h.items for h in hist] == [(1, 2, 3)]


def test_equal_timestamps_break_by_item():
    (h,) = build_histories(_ix([(0, 9, 5), (0, 4, 5), (0, 7, 1)]))
    assert h.items == (7, 4, 9)


def test_interleaved_users_regrouped():
    rows = [(0, 1, 1), (1, 5, 2), (0, 2, 3), (1, 6, 4), (0, 3, 5), (1, 7, 6)]
    hist = build_histories(_ix(rows))
    assert [h.user_id for h in hist] == [0, 1]
    assert [h.items for h in hist] == [(1, 2, 3), (5, 6, 7)]


@given(events)
def test_histories_conserve_events(rows):
    hist = build_histories(_ix(rows))
    flat = sorted((e.user_id, e.item_id, e.timestamp) for h in hist for e in h.events)
    assert flat == sorted(rows)
    for h in hist:
        keys = [(e.timestamp, e.item_id) for e in h.events]
        assert keys == sorted(keys)


def test_split_short_history_all_train():
    split = split_leave_last(build_histories(_ix([(0, 1, 1), (0, 2, 2)])), min_len=3)
    assert split.test_histories == () and split.queries("test") == []
    assert split.train_histories[0].items == (1, 2)


def test_split_worked_example():
    split = split_leave_last(build_histories(_ix([(0, 10, 1), (0, 11, 2), (0, 12, 3), (0, 13, 4)])), min_len=3)
    (q,) = split.queries("test")
    assert q.target == 13 and q.context == (10, 11, 12)
    (v,) = split.queries("valid")
    assert v.target == 12 and v.context == (10, 11)
    assert split.train_histories[0].items == (10, 11)


def test_min_len_below_three_rejected():
    with pytest.raises(ValueError):
        split_leave_last([], min_len=2)


@given(events)
def test_split_invariants(rows):
    hist = build_histories(_ix(rows))
    split = split_leave_last(hist)
    # event conservation
    n = sum(len(h) for part in (split.train_histories, split.valid_histories, split.test_histories) for h in part)
    assert n == len(rows)
    assert split.full_histories() == hist
    assert len(split.test_histories) == sum(1 for h in hist if len(h) >= 3)
    # no leakage (non-strict only where timestamps tie; order is by (ts, item))
    train = {h.user_id: h for h in split.train_histories}
    for v, t in zip(split.valid_histories, split.test_histories):
        last = train[v.user_id].events[-1]
        assert (last.timestamp, last.item_id) <= (v.events[0].timestamp, v.events[0].item_id)
        assert (v.events[0].timestamp, v.events[0].item_id) <= (t.events[0].timestamp, t.events[0].item_id)
    assert split.item_vocab == {i for _, i, _ in rows}


@given(events)
def test_write_reload_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "h.tsv"
    hist = build_histories(_ix(rows))
    write_histories(path, hist)
    assert build_histories(load_interactions(path).interactions) == hist


def test_side_info_round_trip(tmp_path):
    xs = [Interaction(0, 1, 5, {"brand_id": "b1", "price": 2.25}), Interaction(0, 2, 6)]
    write_interactions(tmp_path / "x.tsv", xs)
    assert load_interactions(tmp_path / "x.tsv").interactions == xs
    assert item_side_info(xs) == {1: {"brand_id": "b1", "price": 2.25}}


def test_history_type():
    h = UserHistory(3, (Interaction(3, 1, 1), Interaction(3, 2, 2)))
    assert len(h) == 2 and h.items == (1, 2)
