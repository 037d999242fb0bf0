"""Hamming-space retrieval and the sampled ranking evaluation protocol.

Serving a recommendation is a nearest-neighbour query: items are ordered
by the Hamming distance between the user's code and each item code, which
is the preference score in disguise (distance r means preference 0,
distance 0 means preference 1).  Evaluation follows the usual implicit
feedback drill: every held-out positive competes against a seeded sample
of negative items and we record where it lands.  Items unseen at training
time get codes from the content encoder instead of the learned table.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import CodeMatrix, complement_values, pack_query, pack_signs, sgn
from .dae import encode
from .errors import DimensionError, SolverInvariantError

__all__ = [
    "BenchRow",
    "EvalReport",
    "RankedList",
    "bench_retrieval",
    "encode_cold_item",
    "evaluate",
    "top_k",
]


@dataclass
class RankedList:
    """Result of a top-k query: item ids with their Hamming distances.

    Entries are sorted by ascending distance, ties by ascending id; both
    arrays have the same length (min(k, candidate count)).
    """

    ids: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.int64)
        if self.ids.shape != self.distances.shape or self.ids.ndim != 1:
            raise DimensionError("ids and distances must be matching 1-d arrays")
        if np.any(np.diff(self.distances) < 0):
            raise DimensionError("distances must be non-decreasing")
        tie = np.diff(self.distances) == 0
        if np.any(tie & (np.diff(self.ids) <= 0)):
            raise DimensionError("ties must be ordered by ascending id")

    def __len__(self):
        return self.ids.size


def _select_sorted(keys, k):
    """Indices of the k smallest keys, in ascending key order."""
    if k < keys.size:
        part = np.argpartition(keys, k - 1)[:k]
        return part[np.argsort(keys[part])]
    return np.argsort(keys)


def top_k(query, items, k, candidates=None):
    """Exact k nearest item codes by Hamming distance, ties by item id.

    The selection runs on a single int64 composite key, distance * count
    + id, so ordering and tie-breaking cost one argpartition.

    Args:
        query: length-r vector of -1/+1 signs, or an already packed row
            of uint64 words (dtype decides).
        items: CodeMatrix of item codes.
        k: how many results; clipped to the candidate count.
        candidates: optional array of item ids restricting the search;
            treated as a set (duplicates collapse).

    Returns:
        RankedList of min(k, candidate count) entries.
    """
    if k < 1:
        raise DimensionError("k must be at least 1")
    query = np.asarray(query)
    if query.dtype == np.uint64:
        if query.shape != (items.n_words,):
            raise DimensionError("packed query has the wrong number of words")
        qwords = query
    else:
        if query.shape != (items.n_bits,):
            raise DimensionError(
                f"query has {query.shape} entries, codes have {items.n_bits} bits"
            )
        qwords = pack_query(query)

    if candidates is None:
        dist = items.distances(qwords)
        keys = dist * items.count + np.arange(items.count, dtype=np.int64)
        order = _select_sorted(keys, int(k))
        return RankedList(order, dist[order])

    cand = np.unique(np.asarray(candidates, dtype=np.int64))
    if cand.size == 0:
        raise DimensionError("candidate set is empty")
    if cand[0] < 0 or cand[-1] >= items.count:
        raise DimensionError("candidate id out of range")
    dist = np.bitwise_count(items.words[cand] ^ qwords).sum(axis=1, dtype=np.int64)
    keys = dist * items.count + cand
    order = _select_sorted(keys, int(k))
    return RankedList(cand[order], dist[order])


def encode_cold_item(params, content_row):
    """Binary code for an item never seen in training: sgn of the encoder.

    Accepts one content vector (V,) or a batch (N, V) and returns -1/+1
    codes of matching shape; deterministic given the parameters.
    """
    return sgn(encode(params, np.asarray(content_row, dtype=np.float64)))


@dataclass
class EvalReport:
    """Ranking quality of one test split under the sampled protocol."""

    split: str
    accuracy_at_k: dict[int, float]
    mrr: float
    n_test_cases: int
    n_negatives: int
    ns_per_query: float
    short_cases: int = 0

    def __post_init__(self):
        ks = sorted(self.accuracy_at_k)
        accs = [self.accuracy_at_k[k] for k in ks]
        assert all(b >= a for a, b in zip(accs, accs[1:])), "accuracy not monotone"
        assert 0.0 <= self.mrr <= 1.0, "mrr out of range"
        if self.n_test_cases and 1 in self.accuracy_at_k:
            assert self.accuracy_at_k[1] <= self.mrr, "accuracy@1 above mrr"


def _as_code_matrix(codes):
    if isinstance(codes, CodeMatrix):
        return codes
    return CodeMatrix.from_signs(np.asarray(codes))


def _protocol_report(tag, cases, train, B, D, n_negatives, k_max, seed, threads):
    """Run the sampled ranking protocol over one array of (u, i) cases."""
    cases = np.asarray(cases, dtype=np.int64).reshape(-1, 2)
    n_cases = cases.shape[0]
    ks = range(1, k_max + 1)
    if n_cases == 0:
        return EvalReport(tag, {k: 0.0 for k in ks}, 0.0, 0, int(n_negatives), 0.0)

    m = D.count
    ranks = np.zeros(n_cases, dtype=np.int64)
    short = np.zeros(n_cases, dtype=bool)
    case_ns = np.zeros(n_cases, dtype=np.int64)

    def one(c):
        u, i = cases[c]
        # eligible negatives: everything except u's train positives and i
        forbidden = np.unique(np.append(train.positives(u), i))
        pool = m - forbidden.size
        take = min(n_negatives, pool)
        short[c] = take < n_negatives
        rng = np.random.default_rng(seed ^ c)
        if take:
            picks = np.sort(rng.choice(pool, size=take, replace=False))
            negs = complement_values(forbidden, picks, m)
        else:
            negs = np.empty(0, dtype=np.int64)
        t0 = time.perf_counter_ns()
        qw = B.words[u]
        d_i = int(np.bitwise_count(D.words[i] ^ qw).sum())
        dn = np.bitwise_count(D.words[negs] ^ qw).sum(axis=1, dtype=np.int64)
        ranks[c] = (
            1
            + np.count_nonzero(dn < d_i)
            + np.count_nonzero((dn == d_i) & (negs < i))
        )
        case_ns[c] = time.perf_counter_ns() - t0

    if threads > 1:
        bounds = np.linspace(0, n_cases, threads + 1).astype(int)
        spans = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]

        def run(span):
            for c in range(span[0], span[1]):
                one(c)

        with ThreadPoolExecutor(max_workers=len(spans)) as ex:
            list(ex.map(run, spans))
    else:
        for c in range(n_cases):
            one(c)

    hits = ranks[:, None] <= np.arange(1, k_max + 1)[None, :]
    acc = hits.mean(axis=0)
    return EvalReport(
        split=tag,
        accuracy_at_k={k: float(a) for k, a in zip(ks, acc)},
        mrr=float((1.0 / ranks).mean()),
        n_test_cases=n_cases,
        n_negatives=int(n_negatives),
        ns_per_query=float(case_ns.sum() / n_cases),
        short_cases=int(short.sum()),
    )


def evaluate(
    split,
    B,
    D,
    dae_params=None,
    content=None,
    n_negatives=1000,
    k_max=20,
    seed=0,
    threads=1,
):
    """Accuracy@k and MRR for the sparse and cold test sets of a split.

    Each held-out positive (u, i) competes against min(n_negatives, pool)
    distinct items drawn without replacement from everything outside u's
    train positives (and != i); the 1 + take candidates are ranked by
    Hamming distance with ties broken by ascending item id, and the case
    scores hit@k when i lands at rank <= k plus 1/rank towards MRR.  Cases
    with a short pool take every eligible item and are counted.  Cold test
    cases score cold items by sgn(encoder(content)) instead of their rows
    in D; negatives still come from the full item universe.

    Args:
        split: DatasetSplit carrying train interactions and both test sets.
        B: user CodeMatrix (or -1/+1 array, one row per user).
        D: item CodeMatrix for the full training universe.
        dae_params: trained encoder; required when the cold set is nonempty.
        content: ContentMatrix or raw (m, V) array backing cold encodings.
        n_negatives: negatives sampled per test case.
        k_max: deepest accuracy cutoff (k runs 1..k_max).
        seed: base seed; case c draws from default_rng(seed ^ c), so runs
            are reproducible and thread-count independent.
        threads: worker threads across test cases.

    Returns:
        {"sparse": EvalReport, "cold": EvalReport}
    """
    B = _as_code_matrix(B)
    D = _as_code_matrix(D)
    train = split.train
    if B.count != train.n_users or D.count != train.n_items:
        raise DimensionError("codes do not match the split's user/item counts")
    if B.n_bits != D.n_bits:
        raise DimensionError("user and item codes differ in length")
    if k_max < 1 or n_negatives < 1:
        raise DimensionError("need k_max >= 1 and n_negatives >= 1")

    reports = {
        "sparse": _protocol_report(
            "sparse", split.test_sparse, train, B, D, n_negatives, k_max, seed, threads
        )
    }

    D_cold = D
    cases_cold = np.asarray(split.test_cold, dtype=np.int64).reshape(-1, 2)
    if cases_cold.size:
        if dae_params is None or content is None:
            raise DimensionError("cold evaluation needs dae_params and content")
        vectors = np.asarray(getattr(content, "vectors", content), dtype=np.float64)
        signs = D.to_signs()
        signs[split.cold_items] = encode_cold_item(
            dae_params, vectors[split.cold_items]
        )
        D_cold = CodeMatrix.from_signs(signs)
    reports["cold"] = _protocol_report(
        "cold", cases_cold, train, B, D_cold, n_negatives, k_max, seed, threads
    )
    return reports


@dataclass
class BenchRow:
    """One (item count, representation) row of the retrieval benchmark."""

    m: int
    representation: str
    ns_per_query: float
    bytes_total: int


def bench_retrieval(m_list, r=64, trials=5, seed=0, k=10, n_queries=8):
    """Time packed-Hamming against float dot-product exact top-k retrieval.

    Item and query features are standard Gaussian draws; codes are their
    signs and the float path ranks the same -1/+1 vectors by descending
    dot product, so both paths must order candidates identically.  That
    equivalence is asserted outside the timed region for every query.
    Timing is the median over `trials` rounds of a warmed-up batch,
    reported as ns per query; bytes_total is the memory each
    representation holds for the item table.

    Returns:
        list of BenchRow, two per entry of m_list (hamming, float64).
    """
    if r < 1 or k < 1 or trials < 1 or n_queries < 1:
        raise DimensionError("r, k, trials and n_queries must be positive")
    rng = np.random.default_rng(seed)
    rows = []
    for m in m_list:
        m = int(m)
        items = sgn(rng.standard_normal((m, r), dtype=np.float32))
        queries = sgn(rng.standard_normal((n_queries, r), dtype=np.float32))
        packed = CodeMatrix.from_signs(items)
        qwords = pack_signs(queries)
        ids = np.arange(m, dtype=np.int64)
        ids_f = ids.astype(np.float64)
        kk = min(k, m)

        def run_hamming():
            return [
                _select_sorted(packed.distances(qw) * m + ids, kk) for qw in qwords
            ]

        def run_float():
            # scores are exact small integers, so the float composite key
            # -score * m + id orders exactly like the Hamming key
            return [_select_sorted((items @ q) * -m + ids_f, kk) for q in queries]

        for got_h, got_f in zip(run_hamming(), run_float()):
            if not np.array_equal(got_h, got_f):
                raise SolverInvariantError(
                    "hamming and float paths disagree on a ranking"
                )

        for name, fn, nbytes in (
            ("hamming", run_hamming, packed.words.nbytes),
            ("float64", run_float, items.nbytes),
        ):
            fn()  # warm-up
            samples = []
            for _ in range(trials):
                t0 = time.perf_counter_ns()
                fn()
                samples.append((time.perf_counter_ns() - t0) / n_queries)
            rows.append(BenchRow(m, name, float(np.median(samples)), int(nbytes)))
    return rows
