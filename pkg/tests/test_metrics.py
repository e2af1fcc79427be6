import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_seq, random_store
from oracles import brute_df_rrd, brute_query_ranks, brute_rank
from tiekg.metrics import (
    DeletedCandidateIndex,
    current_and_average,
    df_and_rrd,
    evaluate_ranks,
    hits_at_k,
    mrr,
    rank,
    rank_of,
)
from tiekg.model import OBJECT, SUBJECT, create_store


def test_rank_unique_max_is_one():
    assert rank_of(np.array([0.1, 0.9, 0.3]), np.arange(3), 1) == 1


def test_rank_ties_break_by_id():
    assert rank_of(np.zeros(4), np.arange(4), 0) == 1
    assert rank_of(np.zeros(4), np.arange(4), 3) == 4


def test_rank_missing_target():
    with pytest.raises(ValueError):
        rank_of(np.zeros(3), np.arange(3), 7)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=20, max_size=20), st.integers(0, 19))
def test_rank_matches_sort_oracle(scores, target):
    sc = np.array(scores, dtype=float)
    cands = np.arange(100, 120)
    got = rank_of(sc, cands, 100 + target)
    assert got == brute_rank(lambda c: sc[c - 100], cands.tolist(), 100 + target)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=5, max_size=15), st.data())
def test_rank_invariant_under_monotone_transform(scores, data):
    sc = np.array(scores, dtype=float)
    t = data.draw(st.integers(0, len(sc) - 1))
    cands = np.arange(len(sc))
    r = rank_of(sc, cands, t)
    assert rank_of(sc**3 * 2 + 7, cands, t) == r
    # an extra candidate at -inf changes nothing
    assert rank_of(np.append(sc, -np.inf), np.append(cands, 99), t) == r


def test_rank_via_store():
    st_ = create_store(4, 1, 1, dim=1, encoder="static", decoder="distmult", rng=np.random.default_rng(0))
    st_.params["E"][:] = [[1.0], [0.5], [2.0], [-1.0]]
    st_.params["R"][:] = [[1.0]]
    assert rank(st_, (0, 0, 1, 1), np.arange(4), OBJECT) == 3
    assert rank(st_, (0, 0, 2, 1), np.arange(4), OBJECT) == 1


def test_hits_examples():
    assert hits_at_k([1, 1, 1], 10) == 1.0
    assert hits_at_k([1, 11], 10) == 0.5
    with pytest.raises(ValueError):
        hits_at_k([], 10)
    rng = np.random.default_rng(0)
    r = rng.integers(1, 30, size=100)
    assert hits_at_k(r, 10) == sum(1 for x in r if x <= 10) / 100


def test_mrr_examples():
    assert mrr([1]) == 1.0
    assert mrr([1, 2, 4]) == pytest.approx(0.58333, abs=1e-5)
    r = np.random.default_rng(1).integers(1, 50, size=100)
    assert mrr(r) == pytest.approx(sum(1 / x for x in r) / 100, rel=1e-14)
    with pytest.raises(ValueError):
        mrr([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=50))
def test_hits_monotone_and_mrr_bounds(ranks):
    hs = [hits_at_k(ranks, k) for k in range(1, 42)]
    assert all(a <= b for a, b in zip(hs, hs[1:]))
    assert hits_at_k(ranks, 40) == 1.0
    m = mrr(ranks)
    assert 0 < m <= 1 and m >= hits_at_k(ranks, 1)


def test_current_and_average():
    c, a = current_and_average([[0.5], [0.2, 0.4]])
    assert c == [0.5, 0.4] and a[0] == c[0] and a[1] == pytest.approx(0.3)
    c, a = current_and_average([[0.7], [0.7, 0.7], [0.7, 0.7, 0.7]])
    assert c == pytest.approx(a)
    with pytest.raises(ValueError):
        current_and_average([[0.1, 0.2]])


# -- DF / RRD ------------------------------------------------------------------------


def toy_world():
    st_ = create_store(5, 2, 2, dim=1, encoder="static", decoder="distmult", rng=np.random.default_rng(0))
    st_.params["E"][:] = [[1.0], [5.0], [4.0], [1.0], [0.5]]
    st_.params["R"][:] = [[1.0], [0.0]]
    seq = make_seq([[(0, 0, 2), (3, 1, 4)], {"train": [(3, 1, 4)], "test": [(0, 0, 1)]}])
    return st_, seq


def test_df_rrd_hand_instance():
    st_, seq = toy_world()
    idx = DeletedCandidateIndex(seq, 2, tau_d=10)
    assert idx.objects(0, 0).tolist() == [2]
    res = df_and_rrd(st_, seq, seq.quadruples("test", [2]), idx, k=10)
    assert res.z == 1
    assert res.df == 1.0
    assert res.rrd == 50.0


def test_df_rrd_empty_window_is_excluded():
    st_, seq = toy_world()
    res = df_and_rrd(st_, seq, np.array([[3, 1, 4, 2]]), DeletedCandidateIndex(seq, 2), k=10)
    assert res.z == 0 and res.df is None and res.rrd is None


def test_rrd_zero_when_ranks_equal():
    # filtered ranking removes the true object when ranking o', so an o'
    # scoring exactly like o lands on the same rank
    st_, seq = toy_world()
    st_.params["E"][2] = st_["E"][1]
    res = df_and_rrd(st_, seq, seq.quadruples("test", [2]), DeletedCandidateIndex(seq, 2), k=10, filtered=True)
    assert res.z == 1 and res.rrd == 0.0 and res.df == 1.0


def test_triple_still_true_is_not_deleted():
    idx = DeletedCandidateIndex(make_seq([[(0, 0, 1)], [(0, 0, 1)]]), 2)
    assert idx.objects(0, 0).tolist() == []


def test_deleted_window_respects_tau_d():
    steps = [[(0, 0, 1)], [(0, 0, 2)], [(0, 0, 3)], [(0, 0, 4)]]
    seq = make_seq(steps)
    assert DeletedCandidateIndex(seq, 4, tau_d=1).objects(0, 0).tolist() == [3]
    assert DeletedCandidateIndex(seq, 4, tau_d=2).objects(0, 0).tolist() == [2, 3]
    assert DeletedCandidateIndex(seq, 4, tau_d=10).objects(0, 0).tolist() == [1, 2, 3]
    assert DeletedCandidateIndex(seq, 4, tau_d=10).subjects(0, 3).tolist() == [0]


def random_world(seed, n_ent=12, T=4):
    rng = np.random.default_rng(seed)
    steps = []
    for _ in range(T):
        tr = {(int(a), int(b), int(c)) for a, b, c in zip(rng.integers(n_ent, size=25), rng.integers(2, size=25),
                                                          rng.integers(n_ent, size=25)) if a != c}
        tr = sorted(tr)
        k = len(tr) // 4
        steps.append({"train": tr[k:], "test": tr[:k]})
    return make_seq(steps, n_entities=n_ent, n_relations=2)


@pytest.mark.parametrize("filtered", [False, True])
def test_rank_facts_match_brute_force(filtered):
    for seed in range(3):
        seq = random_world(seed)
        st_ = random_store("hyte", "transe", dim=4, n_entities=12, n_relations=2, n_steps=4, seed=seed)
        tri = {t: [tuple(x) for x in seq[t].facts.tolist()] for t in seq.steps()}
        facts = np.concatenate([seq.quadruples("test", [t]) for t in seq.steps()])
        rep = evaluate_ranks(st_, seq, facts, filtered=filtered)
        want = brute_query_ranks(st_, tri, facts.tolist(), filtered=filtered)
        assert rep.ranks[OBJECT].tolist() == want["object"]
        assert rep.ranks[SUBJECT].tolist() == want["subject"]


def test_df_rrd_match_brute_force():
    for seed in range(3):
        seq = random_world(seed + 10)
        st_ = random_store("de", "complex", dim=4, n_entities=12, n_relations=2, n_steps=4, seed=seed)
        tri = {t: [tuple(x) for x in seq[t].facts.tolist()] for t in seq.steps()}
        for t in (2, 3, 4):
            test = seq.quadruples("test", [t])
            res = df_and_rrd(st_, seq, test, DeletedCandidateIndex(seq, t, 10), k=3)
            df, rrd, z = brute_df_rrd(st_, tri, test.tolist(), t, 10, 3)
            assert res.z == z
            if z:
                assert res.df == pytest.approx(df, abs=1e-12)
                assert res.rrd == pytest.approx(rrd, abs=1e-12)
                assert 0 <= res.df <= 1 and -100 <= res.rrd <= 100
