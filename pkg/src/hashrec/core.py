"""Shared data model: binary codes, implicit feedback, and the joint objective.

Users and items are represented by length-`n_bits` vectors over {-1, +1}.
The preference score of user ``b`` for item ``d`` is an affine map of the
inner product (equivalently of the Hamming distance between the codes):

    preference(b, d) = 1/2 + (b . d) / (2 * n_bits) = 1 - hamming(b, d) / n_bits

Training minimises a pairwise squared ranking loss over (user, positive,
negative) triples plus a content-regression term and two trace couplings
that push the codes toward balanced, decorrelated real-valued delegates.
Everything in this module is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, MetricUndefinedError

WORD_BITS = 64


def sgn(x):
    """Sign map onto {-1.0, +1.0} with the convention sgn(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def complement_values(forbidden, ranks, universe):
    """Map ranks in the complement of a sorted id array to actual ids.

    Args:
        forbidden: sorted 1-d array of unique ids excluded from the universe.
        ranks: integer array of positions into the complement, each in
            [0, universe - len(forbidden)).
        universe: total number of ids (0 .. universe-1).

    Returns:
        Array of ids, same shape as `ranks`, none of them in `forbidden`.
    """
    forbidden = np.asarray(forbidden, dtype=np.int64)
    ranks = np.asarray(ranks, dtype=np.int64)
    if forbidden.size == 0:
        return ranks.copy()
    # id v has complement rank v - #{f <= v}; invert via the non-decreasing
    # sequence g[t] = forbidden[t] - t.
    g = forbidden - np.arange(forbidden.size, dtype=np.int64)
    return ranks + np.searchsorted(g, ranks, side="right")


class CodeMatrix:
    """Bit-packed matrix of {-1,+1} codes, one row per entity.

    Bit k of entity e is stored in ``words[e, k // 64]`` at position
    ``k % 64`` (least significant bit first); a set bit means +1 and a
    clear bit means -1.  Padding bits past `n_bits` are always zero, so
    XOR/popcount distances between packed rows never see them.
    """

    __slots__ = ("n_bits", "count", "words")

    def __init__(self, n_bits, count, words):
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if n_bits < 1:
            raise DimensionError("code length must be at least 1")
        n_words = (n_bits + WORD_BITS - 1) // WORD_BITS
        if words.shape != (count, n_words):
            raise DimensionError(
                f"expected words of shape {(count, n_words)}, got {words.shape}"
            )
        tail = n_bits % WORD_BITS
        if tail and words.size:
            mask = np.uint64((1 << tail) - 1)
            if np.any(words[:, -1] & ~mask):
                raise DimensionError("padding bits beyond n_bits must be zero")
        self.n_bits = int(n_bits)
        self.count = int(count)
        self.words = words

    @property
    def n_words(self):
        return self.words.shape[1]

    @classmethod
    def from_signs(cls, signs):
        """Pack a (count, n_bits) array with entries in {-1, +1}."""
        signs = np.asarray(signs)
        if signs.ndim != 2:
            raise DimensionError("sign matrix must be 2-d")
        if signs.size and not np.all(np.abs(signs) == 1):
            raise DimensionError("sign matrix entries must be -1 or +1")
        count, n_bits = signs.shape
        return cls(n_bits, count, pack_signs(signs))

    def to_signs(self, dtype=np.float64):
        """Unpack to a dense (count, n_bits) array of -1/+1 values."""
        shifts = np.arange(WORD_BITS, dtype=np.uint64)
        bits = (self.words[:, :, None] >> shifts) & np.uint64(1)
        bits = bits.reshape(self.count, self.n_words * WORD_BITS)[:, : self.n_bits]
        return (bits.astype(dtype) * 2 - 1).astype(dtype, copy=False)

    def distances(self, query_words):
        """Hamming distances from one packed query row to every stored row."""
        query_words = np.asarray(query_words, dtype=np.uint64)
        if query_words.shape != (self.n_words,):
            raise DimensionError("query has the wrong number of words")
        return np.bitwise_count(self.words ^ query_words).sum(axis=1, dtype=np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, CodeMatrix)
            and self.n_bits == other.n_bits
            and self.count == other.count
            and np.array_equal(self.words, other.words)
        )

    def __repr__(self):
        return f"CodeMatrix(n_bits={self.n_bits}, count={self.count})"


def pack_signs(signs):
    """Pack rows of -1/+1 values into uint64 words (LSB-first per word)."""
    signs = np.atleast_2d(np.asarray(signs))
    count, n_bits = signs.shape
    n_words = (n_bits + WORD_BITS - 1) // WORD_BITS
    bits = np.zeros((count, n_words * WORD_BITS), dtype=np.uint64)
    bits[:, :n_bits] = signs > 0
    weights = np.uint64(1) << np.arange(WORD_BITS, dtype=np.uint64)
    return (bits.reshape(count, n_words, WORD_BITS) * weights).sum(
        axis=2, dtype=np.uint64
    )


def pack_query(signs):
    """Pack a single length-r sign vector into its uint64 words."""
    return pack_signs(np.asarray(signs)[None, :])[0]


class InteractionSet:
    """Implicit feedback: the set of items each user has interacted with.

    Stores both orientations (items per user and users per item) plus the
    per-user pair weight z_u = 1 / (n_users * p_u * (n_items - p_u)) used by
    the ranking loss, with z_u = 0 when a user has no positives or no
    negatives.  Item ids never repeat within a user.
    """

    __slots__ = ("n_users", "n_items", "user_items", "item_users", "z", "n_pairs")

    def __init__(self, n_users, n_items, user_items):
        if n_users < 1 or n_items < 1:
            raise DimensionError("need at least one user and one item")
        if len(user_items) != n_users:
            raise DimensionError("one item list per user required")
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        cleaned = []
        per_item = [[] for _ in range(n_items)]
        total = 0
        for u, items in enumerate(user_items):
            arr = np.asarray(items, dtype=np.int64)
            if arr.size:
                arr = np.sort(arr)
                if arr[0] < 0 or arr[-1] >= n_items:
                    raise DimensionError(f"item id out of range for user {u}")
                if np.any(np.diff(arr) == 0):
                    raise DimensionError(f"duplicate item for user {u}")
            cleaned.append(arr)
            total += arr.size
            for i in arr:
                per_item[i].append(u)
        self.user_items = tuple(cleaned)
        self.item_users = tuple(
            np.asarray(users, dtype=np.int64) for users in per_item
        )
        self.n_pairs = total
        p = np.array([a.size for a in cleaned], dtype=np.float64)
        neg = self.n_items - p
        with np.errstate(divide="ignore"):
            z = 1.0 / (self.n_users * p * neg)
        z[(p == 0) | (neg == 0)] = 0.0
        self.z = z

    @classmethod
    def from_pairs(cls, n_users, n_items, pairs):
        """Build from an (N, 2) array of (user id, item id) rows."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs[:, 0].max() >= n_users):
            raise DimensionError("user id out of range")
        per_user = [[] for _ in range(n_users)]
        for u, i in pairs:
            per_user[u].append(i)
        return cls(n_users, n_items, per_user)

    def positives(self, u):
        return self.user_items[u]

    def pos_counts(self):
        return np.array([a.size for a in self.user_items], dtype=np.int64)

    def pairs(self):
        """All (user, item) pairs as an (n_pairs, 2) array, sorted."""
        out = np.empty((self.n_pairs, 2), dtype=np.int64)
        at = 0
        for u, items in enumerate(self.user_items):
            out[at : at + items.size, 0] = u
            out[at : at + items.size, 1] = items
            at += items.size
        return out


@dataclass
class ContentMatrix:
    """Row-normalised TF-IDF item descriptions aligned with item ids."""

    vocab: list[str]
    vectors: np.ndarray  # (n_items, vocab size) float64, rows L2-normalised
    zero_rows: np.ndarray  # (n_items,) bool, items with no usable tokens

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.zero_rows = np.asarray(self.zero_rows, dtype=bool)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != len(self.vocab):
            raise DimensionError("content vectors do not match vocabulary size")
        if self.zero_rows.shape != (self.vectors.shape[0],):
            raise DimensionError("zero-row flags do not match item count")

    @property
    def n_items(self):
        return self.vectors.shape[0]


@dataclass
class DelegateMatrix:
    """Real-valued relaxation of a code matrix, stored bits-by-entities.

    `values` has shape (n_bits, count).  Rows sum to zero (each bit is
    balanced across entities) and values @ values.T = count * I, i.e. the
    scaled rows form an orthogonal family.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError("delegate values must be 2-d")

    @property
    def n_bits(self):
        return self.values.shape[0]

    @property
    def count(self):
        return self.values.shape[1]

    def validate(self, rtol=1e-6):
        """Check balance and orthogonality within `rtol` (relative to count)."""
        scale = rtol * max(self.count, 1)
        row_sums = np.abs(self.values.sum(axis=1)).max() if self.values.size else 0.0
        gram = self.values @ self.values.T
        gram_err = np.abs(gram - self.count * np.eye(self.n_bits)).max()
        if row_sums > scale or gram_err > scale:
            raise DimensionError(
                f"delegate constraints violated: |row sum| {row_sums:.3e}, "
                f"gram error {gram_err:.3e}, allowed {scale:.3e}"
            )


@dataclass(frozen=True)
class HyperParams:
    """Weights and sizes for the joint code-learning objective.

    alpha and beta weigh the trace couplings between codes and their
    delegates (users and items respectively), lam weighs the content
    regression ||d_i - f_i||^2.  neg_samples switches the solver to a
    sampled-negative surrogate for very large catalogues; None keeps the
    exact full-complement objective.
    """

    alpha: float = 1e-5
    beta: float = 1e-3
    lam: float = 20.0
    n_bits: int = 16
    outer_iters: int = 50
    dcd_max_passes: int = 3
    seed: int = 0
    neg_samples: int | None = None

    def __post_init__(self):
        if self.n_bits < 1:
            raise DimensionError("n_bits must be positive")
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise DimensionError("alpha, beta and lam must be non-negative")
        if self.outer_iters < 0 or self.dcd_max_passes < 1:
            raise DimensionError("bad iteration limits")
        if self.neg_samples is not None and self.neg_samples < 1:
            raise DimensionError("neg_samples must be positive when set")


def _as_signs(codes, name):
    if isinstance(codes, CodeMatrix):
        return codes.to_signs()
    arr = np.asarray(codes, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-d or a CodeMatrix")
    return arr


def _as_entity_major(delegate, count, n_bits, name):
    if isinstance(delegate, DelegateMatrix):
        arr = delegate.values.T
    else:
        arr = np.asarray(delegate, dtype=np.float64)
    if arr.shape != (count, n_bits):
        raise DimensionError(
            f"{name} must have shape {(count, n_bits)}, got {arr.shape}"
        )
    return arr


def preference(b, d):
    """Preference of user code `b` for item code `d`, in [0, 1].

    Equals 1 - hamming(b, d) / n_bits: identical codes score 1, opposite
    codes score 0, orthogonal codes score 1/2.
    """
    b = np.asarray(b, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if b.shape != d.shape or b.ndim != 1 or b.size == 0:
        raise DimensionError("codes must be 1-d arrays of equal length")
    return 0.5 + float(b @ d) / (2.0 * b.size)


def _pair_loss_terms(inter, B, D, t_d, gram_d):
    """Weighted sum of (2r - s_i + s_j)^2 over all (u, i, j) triples.

    Uses per-user positive score sums plus the global item aggregates
    t_d = sum_j d_j and gram_d = D^T D, never touching pairs directly.
    """
    r = B.shape[1]
    total = 0.0
    for u in range(inter.n_users):
        z = inter.z[u]
        if z == 0.0:
            continue
        pos = inter.user_items[u]
        b = B[u]
        p = pos.size
        nn = inter.n_items - p
        s_pos = D[pos] @ b
        sp = s_pos.sum()
        sp2 = s_pos @ s_pos
        s_all = t_d @ b
        s2_all = b @ gram_d @ b
        sn = s_all - sp
        sn2 = s2_all - sp2
        total += z * (
            4.0 * r * r * p * nn
            + nn * sp2
            + p * sn2
            - 4.0 * r * nn * sp
            + 4.0 * r * p * sn
            - 2.0 * sp * sn
        )
    return total


def total_loss(interactions, B, D, X, Y, F, hp):
    """Joint objective value for codes, delegates and content embeddings.

    Args:
        interactions: InteractionSet with n users and m items.
        B, D: user and item codes, CodeMatrix or (count, n_bits) sign arrays.
        X, Y: delegates, DelegateMatrix or (count, n_bits) arrays.
        F: (m, n_bits) array of content-encoder outputs.
        hp: HyperParams supplying alpha, beta and lam.

    Returns:
        Pairwise ranking term + lam * ||D - F||^2 - 2 alpha tr(B^T X)
        - 2 beta tr(D^T Y), as a float.
    """
    Bs = _as_signs(B, "B")
    Ds = _as_signs(D, "D")
    n, r = Bs.shape
    m = Ds.shape[0]
    if Ds.shape[1] != r:
        raise DimensionError("user and item codes disagree on n_bits")
    if n != interactions.n_users or m != interactions.n_items:
        raise DimensionError("codes do not match the interaction set")
    Xe = _as_entity_major(X, n, r, "X")
    Ye = _as_entity_major(Y, m, r, "Y")
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (m, r):
        raise DimensionError(f"F must have shape {(m, r)}")

    t_d = Ds.sum(axis=0)
    gram_d = Ds.T @ Ds
    loss = _pair_loss_terms(interactions, Bs, Ds, t_d, gram_d)
    loss += hp.lam * float(((Ds - F) ** 2).sum())
    loss -= 2.0 * hp.alpha * float((Bs * Xe).sum())
    loss -= 2.0 * hp.beta * float((Ds * Ye).sum())
    return loss


def auc(interactions, B, D, method="auto", n_pairs=100_000, seed=0, exclude=None):
    """Mean per-user AUC of the code scores on the given positives.

    For each eligible user, counts (positive, negative) pairs where the
    positive item scores strictly higher; ties count as failures.  Negatives
    are the complement of the user's positives, minus any positives listed
    in `exclude` (pass the training set to score a held-out test set).

    Args:
        interactions: positives to score.
        B, D: user and item codes (CodeMatrix or sign arrays).
        method: "exact" enumerates every pair, "sampled" draws uniform
            pairs, "auto" enumerates only when the total pair count is small.
        n_pairs: approximate total sample size for the sampled path.
        seed: RNG seed for the sampled path.
        exclude: optional InteractionSet whose positives are removed from
            the negative pools.

    Returns:
        Mean AUC over users with at least one positive and one negative.

    Raises:
        MetricUndefinedError: if no user is eligible.
    """
    Bs = _as_signs(B, "B")
    Ds = _as_signs(D, "D")
    if Bs.shape[0] != interactions.n_users or Ds.shape[0] != interactions.n_items:
        raise DimensionError("codes do not match the interaction set")
    if exclude is not None and (
        exclude.n_users != interactions.n_users
        or exclude.n_items != interactions.n_items
    ):
        raise DimensionError("exclude set does not match the interaction set")
    m = interactions.n_items

    forbidden = []
    eligible = []
    for u in range(interactions.n_users):
        pos = interactions.user_items[u]
        if pos.size == 0:
            forbidden.append(None)
            continue
        bad = pos
        if exclude is not None and exclude.user_items[u].size:
            bad = np.union1d(pos, exclude.user_items[u])
        forbidden.append(bad)
        if m - bad.size > 0:
            eligible.append(u)
    if not eligible:
        raise MetricUndefinedError("no user has both a positive and a negative")

    if method == "auto":
        total = sum(
            interactions.user_items[u].size * (m - forbidden[u].size)
            for u in eligible
        )
        method = "exact" if total <= 1_000_000 else "sampled"

    if method == "exact":
        acc = 0.0
        for u in eligible:
            pos = interactions.user_items[u]
            bad = forbidden[u]
            s = Ds @ Bs[u]
            neg_mask = np.ones(m, dtype=bool)
            neg_mask[bad] = False
            neg_sorted = np.sort(s[neg_mask])
            wins = np.searchsorted(neg_sorted, s[pos], side="left").sum()
            acc += wins / (pos.size * neg_sorted.size)
        return acc / len(eligible)

    if method != "sampled":
        raise ValueError(f"unknown auc method {method!r}")
    rng = np.random.default_rng(seed)
    per_user = max(1, -(-n_pairs // len(eligible)))  # ceil division
    acc = 0.0
    for u in eligible:
        pos = interactions.user_items[u]
        bad = forbidden[u]
        s = Ds @ Bs[u]
        i_idx = pos[rng.integers(0, pos.size, size=per_user)]
        ranks = rng.integers(0, m - bad.size, size=per_user)
        j_idx = complement_values(bad, ranks, m)
        acc += float(np.mean(s[i_idx] > s[j_idx]))
    return acc / len(eligible)
