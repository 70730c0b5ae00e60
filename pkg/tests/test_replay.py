import pytest
from hypothesis import given, settings, strategies as st

from ppsebm.diffcore import Rng
from ppsebm.latent_ebm import EBMState, LangevinConfig
from ppsebm.replay import (GenerationResult, ReplayConfig, SampleStore, Shortfall,
                           generate_pseudo, merge, parse_generated, pseudo_count)
from ppsebm.textdata import VOCAB, QAPair, make_task, serialize

LCFG = LangevinConfig(k0=5, k1=5)


def gen_pair(i):
    return QAPair(("review", "good"), ("positive",) * (1 + i % 2), source="generated")


def fake_generate(count):
    return GenerationResult([gen_pair(i) for i in range(count)], count)


@pytest.mark.parametrize("gamma,n,expected", [
    (0.0, 512, 0), (0.01, 512, 6), (0.05, 512, 26), (0.2, 512, 103), (0.1, 10, 1), (1.0, 7, 7)])
def test_pseudo_count(gamma, n, expected):
    assert pseudo_count(gamma, n) == expected


def test_replay_config_validates():
    with pytest.raises(ValueError):
        ReplayConfig(gamma=1.5)
    with pytest.raises(ValueError):
        ReplayConfig(k=0)


def test_parse_generated():
    good = serialize(QAPair(("review", "good"), ("positive",)))[1:]
    p = parse_generated(good)
    assert p.source == "generated" and p.answer == ("positive",)
    assert parse_generated(good[:-1]) is None
    assert parse_generated([VOCAB.sep, VOCAB.index["good"], VOCAB.eos]) is None
    assert parse_generated([]) is None


def test_generate_zero_and_determinism():
    state = EBMState.init(len(VOCAB), Rng(0), latent_dim=4, embed_dim=8, hidden=8, prior_hidden=8)
    cfg = ReplayConfig(max_len=6)
    empty = generate_pseudo(state, 0, cfg, LCFG, Rng(1))
    assert empty.samples == [] and empty.shortfall is None and empty.attempts == 0
    a = generate_pseudo(state, 5, cfg, LCFG, Rng(2))
    b = generate_pseudo(state, 5, cfg, LCFG, Rng(2))
    assert a.samples == b.samples and a.attempts == b.attempts
    # untrained decoder: mostly invalid, so the budget is exhausted and reported
    assert a.attempts <= 5 * cfg.max_attempts_factor
    if a.shortfall is not None:
        assert a.shortfall.missing == 5 - len(a.samples)
    for p in a.samples:
        assert p.source == "generated"
        assert parse_generated(serialize(p)[1:]) == p
    with pytest.raises(ValueError):
        generate_pseudo(state, -1, cfg, LCFG, Rng(0))


def test_shortfall_missing():
    assert Shortfall(26, 20, 260).missing == 6


def test_store_round_trip_and_order(tmp_path):
    store = SampleStore(tmp_path / "s")
    assert store.load() == [] and store.stages() == []
    s1, s2 = [gen_pair(0)], [gen_pair(1), gen_pair(2)]
    store.persist(1, s1)
    assert store.load() == s1
    files1 = set(p.name for p in (tmp_path / "s").iterdir())
    store.persist(2, s2)
    assert store.load() == s1 + s2
    assert files1 <= set(p.name for p in (tmp_path / "s").iterdir())
    assert store.stages() == [1, 2]


def test_store_rejects_regression_and_real_samples(tmp_path):
    store = SampleStore(tmp_path)
    store.persist(2, [gen_pair(0)])
    with pytest.raises(ValueError):
        store.persist(2, [gen_pair(1)])
    with pytest.raises(ValueError):
        store.persist(1, [gen_pair(1)])
    with pytest.raises(ValueError):
        store.persist(3, [QAPair(("review", "good"), ("positive",))])


def test_store_malformed_line_names_line(tmp_path):
    store = SampleStore(tmp_path)
    store.persist(1, [gen_pair(0), gen_pair(1)])
    path = tmp_path / "stage_1.jsonl"
    lines = path.read_text().splitlines()
    path.write_text(lines[0] + "\n{not json\n")
    with pytest.raises(ValueError, match=r"stage_1\.jsonl:2"):
        store.load()


def test_merge_gamma_zero_touches_nothing(tmp_path):
    cur = make_task("classify", 0, 40, 5).train
    store = SampleStore(tmp_path / "never")
    out = merge(cur, store, 1, 0.0, lambda c: pytest.fail("generated"), Rng(0))
    assert out.train == cur and out.requested == 0
    assert not (tmp_path / "never").exists()


@pytest.mark.parametrize("gamma,expected", [(0.01, 6), (0.05, 26), (0.2, 103)])
def test_merge_counts_and_no_leakage(tmp_path, gamma, expected):
    cur = make_task("classify", 0, 512, 5).train
    store = SampleStore(tmp_path)
    out = merge(cur, store, 1, gamma, fake_generate, Rng(1))
    assert out.requested == out.generated == expected and out.shortfall is None
    assert sum(p.source == "generated" for p in out.train) == expected
    assert sorted(map(repr, out.train)) == sorted(map(repr, cur + fake_generate(expected).samples))
    assert all(p.source == "generated" for p in store.load())
    assert all(p.source == "real" for p in cur)


def test_merge_reports_shortfall(tmp_path):
    cur = make_task("tag", 0, 100, 5).train

    def weak(count):
        return GenerationResult([gen_pair(0)], count * 10, Shortfall(count, 1, count * 10))

    out = merge(cur, SampleStore(tmp_path), 1, 0.05, weak, Rng(0))
    assert out.requested == 5 and out.generated == 1 and out.shortfall.missing == 4
    assert len(out.train) == 101


def test_merge_shuffle_is_seeded(tmp_path):
    cur = make_task("slots", 0, 60, 5).train
    a = merge(cur, SampleStore(tmp_path / "a"), 1, 0.1, fake_generate, Rng(3))
    b = merge(cur, SampleStore(tmp_path / "b"), 1, 0.1, fake_generate, Rng(3))
    c = merge(cur, SampleStore(tmp_path / "c"), 1, 0.1, fake_generate, Rng(4))
    assert a.train == b.train != c.train


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(4, len(VOCAB) - 1), min_size=0, max_size=8),
       st.lists(st.integers(4, len(VOCAB) - 1), min_size=0, max_size=8),
       st.booleans())
def test_parse_generated_round_trips(q, a, eos):
    ids = q + [VOCAB.sep] + a + ([VOCAB.eos] if eos else [])
    p = parse_generated(ids)
    if q and a and eos:
        assert p is not None and serialize(p)[1:] == ids
    else:
        assert p is None
