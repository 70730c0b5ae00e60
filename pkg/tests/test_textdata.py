import json

import pytest
from hypothesis import given, settings, strategies as st

from ppsebm import textdata
from ppsebm.textdata import (KIND_OF, MARKERS, RESERVED, TASK_NAMES, VOCAB, QAPair, Vocab,
                             deserialize, make_task, serialize, solve, task_orders, toy_battery)

CONTENT = [t for t in VOCAB.tokens if t not in RESERVED]


def test_reserved_ids():
    assert (VOCAB.pad, VOCAB.gen, VOCAB.sep, VOCAB.eos) == (0, 1, 2, 3)
    assert len(VOCAB) == len(set(VOCAB.tokens))


def test_serialize_frame():
    p = QAPair(("review", "good"), ("positive",))
    ids = serialize(p)
    assert ids[0] == VOCAB.gen and ids[-1] == VOCAB.eos
    assert ids[3] == VOCAB.sep
    assert VOCAB.decode(ids[1:3]) == ("review", "good")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(CONTENT), min_size=1, max_size=8),
       st.lists(st.sampled_from(CONTENT), min_size=1, max_size=8))
def test_serialize_round_trip(q, a):
    p = QAPair(tuple(q), tuple(a))
    assert deserialize(serialize(p)) == p


def test_reserved_tokens_rejected():
    with pytest.raises(ValueError):
        QAPair(("review", "<sep>"), ("positive",))
    with pytest.raises(ValueError):
        QAPair((), ("positive",))
    with pytest.raises(ValueError):
        QAPair(("review",), ("positive",), source="other")


def test_deserialize_rejects_bad_frames():
    good = serialize(QAPair(("review", "good"), ("positive",)))
    with pytest.raises(ValueError):
        deserialize(good[1:])
    with pytest.raises(ValueError):
        deserialize(good[:-1])
    no_sep = [VOCAB.gen, VOCAB.index["good"], VOCAB.index["bad"], VOCAB.index["sad"], VOCAB.eos]
    with pytest.raises(ValueError):
        deserialize(no_sep)


def test_unknown_token_rejected():
    with pytest.raises(ValueError, match="not in vocabulary"):
        VOCAB.encode(["zebra"])


def test_vocab_dedups_and_reserves():
    v = Vocab(["a", "b", "a"])
    assert v.tokens == RESERVED + ("a", "b")


def test_rules():
    assert solve("classify", ("review", "good", "bad", "fine")) == ("positive",)
    assert solve("classify", ("review", "bad", "movie")) == ("negative",)
    assert solve("tag", ("roles", "john", "saw", "ball")) == ("A0", "V", "A1")
    assert solve("slots", ("state", "please", "thai", "north")) == ("food", "thai", "area", "north")
    assert solve("slots", ("state", "cheap", "docks", "pasta")) == (
        "food", "pasta", "area", "docks", "price", "cheap")
    with pytest.raises(ValueError):
        solve("poetry", ("x",))


@pytest.mark.parametrize("kind", sorted(MARKERS))
def test_make_task_is_solvable_disjoint_and_deterministic(kind):
    t = make_task(kind, 3, n_train=200, n_test=50)
    assert len(t.train) == 200 and len(t.test) == 50
    assert {p.question for p in t.train}.isdisjoint({p.question for p in t.test})
    for p in t.train + t.test:
        assert p.question[0] == MARKERS[kind]
        assert solve(kind, p.question) == p.answer
    assert make_task(kind, 3, 200, 50).train == t.train
    assert make_task(kind, 4, 200, 50).train != t.train


def test_make_task_rejects_impossible_sizes(monkeypatch):
    with pytest.raises(ValueError):
        make_task("classify", 0, n_train=0)
    # a generator with a single distinct question exhausts the retry budget
    monkeypatch.setattr(textdata, "_question", lambda kind, rng: ("review", "good"))
    with pytest.raises(ValueError, match="distinct"):
        make_task("classify", 0, n_train=1, n_test=1)


def test_battery_and_orders():
    b = toy_battery(0, 16, 8)
    assert list(b) == ["sst-toy", "srl-toy", "woz-toy"]
    assert {KIND_OF[n] for n in b} == set(TASK_NAMES)
    orders = task_orders(list(b))
    assert len(orders) == len(set(orders)) == 6
    assert orders[0] == ("sst-toy", "srl-toy", "woz-toy")
    with pytest.raises(ValueError):
        task_orders(["a", "a", "b"])


def test_jsonl_round_trip(tmp_path):
    t = make_task("slots", 1, 10, 5)
    path = tmp_path / "train.jsonl"
    t.to_jsonl(path)
    rows = [QAPair.from_json(json.loads(line)) for line in path.read_text().splitlines()]
    assert rows == t.train
