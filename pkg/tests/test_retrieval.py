import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hashrec.core import CodeMatrix, InteractionSet, complement_values, pack_query
from hashrec.dae import DaeParams, encode
from hashrec.data import DatasetSplit, SplitSpec
from hashrec.errors import DimensionError
from hashrec.retrieval import (
    BenchRow,
    EvalReport,
    RankedList,
    bench_retrieval,
    encode_cold_item,
    evaluate,
    top_k,
)

from conftest import random_interactions, random_signs


def naive_top_k(query, signs, k, candidates=None):
    """Float dot products plus a full lexsort; the ranking reference."""
    ids = (
        np.arange(signs.shape[0], dtype=np.int64)
        if candidates is None
        else np.unique(np.asarray(candidates, dtype=np.int64))
    )
    dist = (signs.shape[1] - signs[ids] @ query) / 2.0
    order = np.lexsort((ids, dist))[: min(k, ids.size)]
    return ids[order], dist[order].astype(np.int64)


def assert_ranked(out):
    assert isinstance(out, RankedList)
    gaps = np.diff(out.distances)
    assert np.all(gaps >= 0)
    assert np.all(np.diff(out.ids)[gaps == 0] > 0)


def make_split(train, test_sparse=(), test_cold=(), cold_items=()):
    """DatasetSplit built straight from arrays, skipping the carver."""
    return DatasetSplit(
        train=train,
        test_sparse=np.asarray(list(test_sparse), dtype=np.int64).reshape(-1, 2),
        test_cold=np.asarray(list(test_cold), dtype=np.int64).reshape(-1, 2),
        cold_items=np.asarray(list(cold_items), dtype=np.int64),
        user_ids={f"u{u}": u for u in range(train.n_users)},
        item_ids={f"i{j}": j for j in range(train.n_items)},
        spec=SplitSpec(sparsity_level=0.5),
        rep_index=0,
    )


def naive_protocol(train, Bs, Ds, cases, n_negatives, k_max, seed):
    """Re-run the sampled protocol with float scores and a full sort."""
    m = Ds.shape[0]
    ranks, short = [], 0
    for c, (u, i) in enumerate(cases):
        forbidden = np.unique(np.append(train.positives(u), i))
        pool = m - forbidden.size
        take = min(n_negatives, pool)
        short += take < n_negatives
        rng = np.random.default_rng(seed ^ c)
        if take:
            picks = np.sort(rng.choice(pool, size=take, replace=False))
            negs = complement_values(forbidden, picks, m)
        else:
            negs = np.empty(0, dtype=np.int64)
        cand = np.append(negs, i)
        scores = Ds[cand] @ Bs[u]
        order = cand[np.lexsort((cand, -scores))]
        ranks.append(int(np.flatnonzero(order == i)[0]) + 1)
    ranks = np.asarray(ranks)
    acc = {k: float((ranks <= k).mean()) for k in range(1, k_max + 1)}
    return acc, float((1.0 / ranks).mean()), short


# ---------------------------------------------------------------- top_k


def test_top_k_query_item_ranks_first(rng):
    signs = random_signs(rng, 30, 16)
    out = top_k(signs[7], CodeMatrix.from_signs(signs), 5)
    assert out.ids[0] == 7 or out.distances[0] == 0
    assert out.distances[0] == 0
    assert_ranked(out)


def test_top_k_all_ties_returns_lowest_ids():
    signs = np.ones((12, 8))
    out = top_k(-np.ones(8), CodeMatrix.from_signs(signs), 4)
    assert np.array_equal(out.ids, [0, 1, 2, 3])
    assert np.array_equal(out.distances, [8, 8, 8, 8])


def test_top_k_matches_float_oracle():
    for trial in range(100):
        rng = np.random.default_rng(900 + trial)
        m = int(rng.integers(1, 500))
        r = int(rng.choice([1, 2, 16, 64, 100]))
        k = int(rng.integers(1, m + 3))
        signs = random_signs(rng, m, r)
        q = random_signs(rng, 1, r)[0]
        out = top_k(q, CodeMatrix.from_signs(signs), k)
        want_ids, want_dist = naive_top_k(q, signs, k)
        assert np.array_equal(out.ids, want_ids)
        assert np.array_equal(out.distances, want_dist)
        assert_ranked(out)


def test_top_k_candidate_subset(rng):
    signs = random_signs(rng, 60, 8)
    q = random_signs(rng, 1, 8)[0]
    cand = rng.choice(60, size=25, replace=False)
    out = top_k(q, CodeMatrix.from_signs(signs), 10, candidates=cand)
    want_ids, want_dist = naive_top_k(q, signs, 10, candidates=cand)
    assert np.array_equal(out.ids, want_ids)
    assert np.array_equal(out.distances, want_dist)
    assert set(out.ids.tolist()) <= set(cand.tolist())
    # duplicates collapse to the same set
    doubled = np.concatenate([cand, cand])
    again = top_k(q, CodeMatrix.from_signs(signs), 10, candidates=doubled)
    assert np.array_equal(again.ids, out.ids)


def test_top_k_accepts_packed_query(rng):
    signs = random_signs(rng, 40, 70)
    q = random_signs(rng, 1, 70)[0]
    D = CodeMatrix.from_signs(signs)
    a = top_k(q, D, 6)
    b = top_k(pack_query(q), D, 6)
    assert np.array_equal(a.ids, b.ids)
    assert np.array_equal(a.distances, b.distances)


def test_top_k_k_clamped_to_count(rng):
    signs = random_signs(rng, 9, 4)
    out = top_k(signs[0], CodeMatrix.from_signs(signs), 50)
    assert len(out) == 9
    assert sorted(out.ids.tolist()) == list(range(9))


def test_top_k_rejects_bad_inputs(rng):
    D = CodeMatrix.from_signs(random_signs(rng, 10, 70))
    q = random_signs(rng, 1, 70)[0]
    with pytest.raises(DimensionError):
        top_k(q, D, 0)
    with pytest.raises(DimensionError):
        top_k(q, D, 3, candidates=np.empty(0, dtype=np.int64))
    with pytest.raises(DimensionError):
        top_k(q, D, 3, candidates=[4, 10])
    with pytest.raises(DimensionError):
        top_k(q[:-1], D, 3)
    with pytest.raises(DimensionError):
        top_k(np.zeros(1, dtype=np.uint64), D, 3)


def test_ranked_list_validates_ordering():
    RankedList(np.array([3, 1, 2]), np.array([0, 1, 1]))
    with pytest.raises(DimensionError):
        RankedList(np.array([0, 1]), np.array([2, 1]))
    with pytest.raises(DimensionError):
        RankedList(np.array([2, 1]), np.array([1, 1]))
    with pytest.raises(DimensionError):
        RankedList(np.array([0, 1]), np.array([1]))


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 33))
def test_top_k_invariants_hold(seed, m, r):
    rng = np.random.default_rng(seed)
    signs = random_signs(rng, m, r)
    q = random_signs(rng, 1, r)[0]
    out = top_k(q, CodeMatrix.from_signs(signs), int(rng.integers(1, m + 2)))
    assert_ranked(out)
    assert len(set(out.ids.tolist())) == len(out)


# ------------------------------------------------------- encode_cold_item


def test_cold_code_of_zero_vector_is_all_plus_one():
    params = DaeParams.init([6, 4, 6], seed=3)  # biases start at zero
    assert np.array_equal(encode_cold_item(params, np.zeros(6)), np.ones(4))


def test_cold_codes_deterministic_and_batched(rng):
    params = DaeParams.init([9, 5, 9], seed=1)
    rows = rng.random((4, 9))
    batch = encode_cold_item(params, rows)
    assert batch.shape == (4, 5)
    assert np.all(np.abs(batch) == 1)
    for t in range(4):
        row = encode_cold_item(params, rows[t])
        assert np.array_equal(row, batch[t])
        assert np.array_equal(row, np.where(encode(params, rows[t]) >= 0, 1.0, -1.0))
    same = rng.random(9)
    assert np.array_equal(encode_cold_item(params, same), encode_cold_item(params, same.copy()))


def test_cold_code_rejects_wrong_width():
    params = DaeParams.init([6, 4, 6], seed=3)
    with pytest.raises(DimensionError):
        encode_cold_item(params, np.zeros(7))


# --------------------------------------------------------------- evaluate


def test_rank_one_case_hits_everything(rng):
    b = random_signs(rng, 1, 8)
    signs = -np.tile(b, (10, 1))  # everything else is at distance 8
    signs[1] = b[0]
    train = InteractionSet(1, 10, [[0]])
    split = make_split(train, test_sparse=[(0, 1)])
    rep = evaluate(split, b, signs, n_negatives=20, k_max=5, seed=11)["sparse"]
    assert rep.mrr == 1.0
    assert all(v == 1.0 for v in rep.accuracy_at_k.values())
    assert rep.n_test_cases == 1
    assert rep.short_cases == 1  # pool of 8 < 20 requested


def test_evaluate_exhaustive_pool_matches_enumeration(rng):
    # n_negatives >= m forces take = pool, so the candidate list is exactly
    # the eligible set and no sampling randomness is involved at all
    n, m, r = 5, 18, 2
    train = random_interactions(rng, n, m, density=0.3)
    B = random_signs(rng, n, r)
    D = random_signs(rng, m, r)
    cases = []
    for u in range(n):
        pos = set(train.positives(u).tolist())
        cases.extend((u, i) for i in range(m) if i not in pos)
    cases = cases[:25]
    split = make_split(train, test_sparse=cases)
    rep = evaluate(split, B, D, n_negatives=m, k_max=7, seed=4)["sparse"]

    ranks = []
    for u, i in cases:
        eligible = [
            j for j in range(m) if j == i or j not in set(train.positives(u).tolist())
        ]
        scores = {j: float(D[j] @ B[u]) for j in eligible}
        better = [j for j in eligible if scores[j] > scores[i]]
        tied = [j for j in eligible if scores[j] == scores[i] and j < i]
        ranks.append(1 + len(better) + len(tied))
    ranks = np.asarray(ranks)
    assert rep.mrr == float((1.0 / ranks).mean())
    for k in range(1, 8):
        assert rep.accuracy_at_k[k] == float((ranks <= k).mean())
    assert rep.short_cases == len(cases)


@pytest.mark.parametrize("r", [2, 64])
def test_evaluate_matches_naive_oracle_sampled(rng, r):
    n, m = 6, 50
    train = random_interactions(rng, n, m, density=0.25)
    B = random_signs(rng, n, r)
    D = random_signs(rng, m, r)
    cases = []
    for u in range(n):
        pos = set(train.positives(u).tolist())
        cases.extend((u, i) for i in range(m) if i not in pos)
    cases = cases[:40]
    split = make_split(train, test_sparse=cases)
    rep = evaluate(split, B, D, n_negatives=15, k_max=10, seed=77)["sparse"]
    acc, mrr, short = naive_protocol(train, B, D, cases, 15, 10, seed=77)
    assert rep.accuracy_at_k == acc
    assert rep.mrr == mrr
    assert rep.short_cases == short
    assert rep.n_test_cases == 40


def test_evaluate_deterministic_per_seed_and_threads(rng):
    n, m, r = 4, 30, 8
    train = random_interactions(rng, n, m, density=0.3)
    B = random_signs(rng, n, r)
    D = random_signs(rng, m, r)
    cases = [(u, i) for u in range(n) for i in range(m)
             if i not in set(train.positives(u).tolist())][:30]
    split = make_split(train, test_sparse=cases)

    one = evaluate(split, B, D, n_negatives=9, k_max=6, seed=5)["sparse"]
    two = evaluate(split, B, D, n_negatives=9, k_max=6, seed=5)["sparse"]
    par = evaluate(split, B, D, n_negatives=9, k_max=6, seed=5, threads=4)["sparse"]
    for other in (two, par):
        assert one.accuracy_at_k == other.accuracy_at_k
        assert one.mrr == other.mrr
        assert one.short_cases == other.short_cases
    moved = evaluate(split, B, D, n_negatives=9, k_max=6, seed=6)["sparse"]
    assert (moved.accuracy_at_k != one.accuracy_at_k) or (moved.mrr != one.mrr)


def _identity_net(r):
    eye, zero = np.eye(r), np.zeros(r)
    return DaeParams([r, r, r], [eye, eye.copy()], [zero, zero.copy()], 0.0, 0.0)


def test_cold_cases_use_encoder_codes():
    r = 8
    up, down = np.ones(r), -np.ones(r)
    B = np.stack([up, down])
    D = np.stack([up, up, down, down, np.r_[np.ones(4), -np.ones(4)], down])
    content = np.zeros((6, r))
    content[5] = up  # the encoder will place item 5 on user 0
    train = InteractionSet(2, 6, [[0, 1], [2, 3]])
    split = make_split(
        train, test_sparse=[(1, 4)], test_cold=[(0, 5)], cold_items=[5]
    )
    reports = evaluate(
        split, B, D, _identity_net(r), content, n_negatives=10, k_max=4, seed=0
    )
    # trained row 5 is the exact opposite of user 0; rank 1 proves the
    # encoder code replaced it
    assert reports["cold"].mrr == 1.0
    assert reports["cold"].accuracy_at_k[1] == 1.0
    # and the sparse pass keeps the trained codes: item 5 at distance 0
    # from user 1 outranks the ground truth item 4
    assert reports["sparse"].mrr == 0.5
    assert reports["sparse"].accuracy_at_k[1] == 0.0
    assert reports["sparse"].accuracy_at_k[2] == 1.0


def test_cold_eval_requires_encoder_and_content():
    train = InteractionSet(2, 6, [[0, 1], [2, 3]])
    split = make_split(train, test_cold=[(0, 5)], cold_items=[5])
    B = random_signs(np.random.default_rng(0), 2, 4)
    D = random_signs(np.random.default_rng(1), 6, 4)
    with pytest.raises(DimensionError):
        evaluate(split, B, D, None, None, n_negatives=3)


def test_empty_test_sets_report_zero(rng):
    train = random_interactions(rng, 3, 8, density=0.5)
    split = make_split(train)
    reports = evaluate(split, random_signs(rng, 3, 4), random_signs(rng, 8, 4),
                       n_negatives=5, k_max=3)
    for tag in ("sparse", "cold"):
        rep = reports[tag]
        assert rep.n_test_cases == 0
        assert rep.mrr == 0.0
        assert set(rep.accuracy_at_k) == {1, 2, 3}
        assert all(v == 0.0 for v in rep.accuracy_at_k.values())


def test_evaluate_validates_inputs(rng):
    train = random_interactions(rng, 3, 8, density=0.5)
    split = make_split(train, test_sparse=[(0, 0)])
    B = random_signs(rng, 3, 4)
    D = random_signs(rng, 8, 4)
    with pytest.raises(DimensionError):
        evaluate(split, random_signs(rng, 2, 4), D)
    with pytest.raises(DimensionError):
        evaluate(split, B, random_signs(rng, 8, 6))
    with pytest.raises(DimensionError):
        evaluate(split, B, D, k_max=0)
    with pytest.raises(DimensionError):
        evaluate(split, B, D, n_negatives=0)


def test_random_codes_land_near_uniform_null(rng):
    # with random codes the ground truth's rank is uniform over the
    # candidate list, so accuracy@k should sit near k / (negatives + 1)
    m, r, n_neg = 400, 64, 80
    train = InteractionSet(1, m, [[0]])
    cases = [(0, i) for i in range(1, 241)]
    split = make_split(train, test_sparse=cases)
    rep = evaluate(split, random_signs(rng, 1, r), random_signs(rng, m, r),
                   n_negatives=n_neg, k_max=10, seed=99)["sparse"]
    assert abs(rep.accuracy_at_k[1] - 1 / 81) < 0.03
    assert abs(rep.accuracy_at_k[10] - 10 / 81) < 0.06
    assert rep.short_cases == 0
    assert rep.ns_per_query > 0


# ------------------------------------------------------------------ bench


def test_bench_rows_storage_and_timing():
    rows = bench_retrieval([96, 160], r=64, trials=2, seed=0, n_queries=3)
    assert [row.m for row in rows] == [96, 96, 160, 160]
    assert [row.representation for row in rows] == ["hamming", "float64"] * 2
    by_m = {(row.m, row.representation): row for row in rows}
    for m in (96, 160):
        binary = by_m[(m, "hamming")]
        floats = by_m[(m, "float64")]
        assert binary.bytes_total == m * 8
        assert floats.bytes_total == m * 64 * 8
        assert floats.bytes_total == 64 * binary.bytes_total
        assert binary.ns_per_query > 0 and floats.ns_per_query > 0


def test_bench_cross_checks_rankings_without_error():
    # the internal hamming/float comparison runs for every query
    rows = bench_retrieval([40], r=32, trials=1, seed=7, k=40, n_queries=5)
    assert len(rows) == 2
    assert all(isinstance(row, BenchRow) for row in rows)


def test_bench_rejects_bad_arguments():
    with pytest.raises(DimensionError):
        bench_retrieval([10], trials=0)
    with pytest.raises(DimensionError):
        bench_retrieval([10], r=0)


def test_eval_report_asserts_consistency():
    with pytest.raises(AssertionError):
        EvalReport("sparse", {1: 0.5, 2: 0.4}, 0.5, 10, 5, 0.0)
    with pytest.raises(AssertionError):
        EvalReport("sparse", {1: 0.2, 2: 0.4}, 1.5, 10, 5, 0.0)
    with pytest.raises(AssertionError):
        EvalReport("sparse", {1: 0.6, 2: 0.6}, 0.5, 10, 5, 0.0)
    rep = EvalReport("sparse", {1: 0.2, 2: 0.4}, 0.3, 10, 5, 12.5)
    assert rep.short_cases == 0
