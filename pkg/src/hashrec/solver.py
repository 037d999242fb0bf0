"""Alternating discrete optimisation of user and item hash codes.

The joint objective couples a pairwise ranking loss (every interacted item
should beat every non-interacted one in code preference, each user weighted
equally), a content term tying item codes to the text encoder's outputs,
and trace couplings that pull codes toward balanced, decorrelated
real-valued delegates.

Codes are updated bit by bit: with everything else frozen, the optimal
value of one bit has a closed form assembled from cached sums, so the
(positive, negative) pair set is never enumerated.  Delegates are refreshed
by an SVD projection onto their constraint set and the encoder is finetuned
toward the item codes once per outer iteration.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import (
    CodeMatrix,
    DelegateMatrix,
    HyperParams,
    InteractionSet,
    _as_entity_major,
    complement_values,
    sgn,
    total_loss,
)
from .dae import DaeParams, TrainConfig, checkpoint_bytes, encode, finetune, params_from_bytes
from .errors import (
    ArtifactError,
    DimensionError,
    DivergenceError,
    InfeasibleDimensionError,
    SolverInvariantError,
)

# A bit score whose magnitude is below ZERO_REL times the summed magnitude
# of its additive pieces is treated as exactly zero (keep the bit): the
# pieces are z-weighted integers, so anything smaller is cancellation noise.
ZERO_REL = 1e-11
_DESCENT_RTOL = 1e-9
_CONV_RTOL = 1e-5
_CONV_STREAK = 3

_MODEL_MAGIC = b"HRECMODL"
_MODEL_VERSION = 1


@dataclass
class SolverState:
    """Mutable optimisation state shared by the update phases.

    B and D are entity-major (count, n_bits) float arrays with entries in
    {-1, +1}; X and Y are their delegates; F holds encoder outputs, one row
    per item.  t_d and pos_sums are the aggregates the bit updates read:
    column sums of D, and per-user sums of positive item codes.  When
    negative sampling is on, neg_items/neg_z/rev_neg hold each user's
    sampled negatives, the rescaled pair weights, and the reverse index
    (users that sampled each item).
    """

    interactions: InteractionSet
    B: np.ndarray
    D: np.ndarray
    X: DelegateMatrix
    Y: DelegateMatrix
    F: np.ndarray
    t_d: np.ndarray
    pos_sums: np.ndarray
    loss_trace: list = field(default_factory=list)
    neg_items: tuple | None = None
    neg_z: np.ndarray | None = None
    rev_neg: tuple | None = None

    @property
    def n_bits(self):
        return self.B.shape[1]


@dataclass
class FitResult:
    """Final codes plus everything needed to audit or resume a run."""

    user_codes: CodeMatrix
    item_codes: CodeMatrix
    dae: DaeParams
    hp: HyperParams
    loss_trace: np.ndarray
    user_delegate: DelegateMatrix
    item_delegate: DelegateMatrix
    encoder_outputs: np.ndarray
    n_iters: int
    converged: bool


def _content_vectors(content):
    rows = getattr(content, "vectors", content)
    return np.asarray(rows, dtype=np.float64)


def _positive_code_sums(interactions, D):
    out = np.zeros((interactions.n_users, D.shape[1]))
    pairs = interactions.pairs()
    if pairs.size:
        np.add.at(out, pairs[:, 0], D[pairs[:, 1]])
    return out


def _sample_negatives(interactions, hp, rng):
    """Seeded per-user negative draws plus weights and the reverse index."""
    n, m = interactions.n_users, interactions.n_items
    lists = []
    z = np.zeros(n)
    for u in range(n):
        pos = interactions.user_items[u]
        pool = m - pos.size
        if pos.size == 0 or pool == 0:
            lists.append(np.empty(0, dtype=np.int64))
            continue
        take = min(hp.neg_samples, pool)
        ranks = np.sort(rng.choice(pool, size=take, replace=False))
        lists.append(complement_values(pos, ranks, m))
        z[u] = 1.0 / (n * pos.size * take)
    owners = np.repeat(
        np.arange(n, dtype=np.int64), [a.size for a in lists]
    )
    flat = np.concatenate(lists) if owners.size else np.empty(0, dtype=np.int64)
    order = np.argsort(flat, kind="stable")
    flat, owners = flat[order], owners[order]
    starts = np.searchsorted(flat, np.arange(m + 1))
    rev = tuple(owners[starts[i] : starts[i + 1]].copy() for i in range(m))
    return tuple(lists), z, rev


def build_state(interactions, B, D, X, Y, F, hp, seed=None):
    """Assemble a SolverState around existing matrices, building caches.

    B and D must be (count, n_bits) arrays of -1/+1 values; X and Y may be
    DelegateMatrix or entity-major arrays.  With hp.neg_samples set, the
    per-user negative lists are drawn here (seeded by `seed`, default
    hp.seed), so the surrogate objective is fixed for the whole run.
    """
    n, m = interactions.n_users, interactions.n_items
    r = hp.n_bits
    B = np.ascontiguousarray(B, dtype=np.float64)
    D = np.ascontiguousarray(D, dtype=np.float64)
    if B.shape != (n, r) or D.shape != (m, r):
        raise DimensionError("code matrices do not match interactions and n_bits")
    if (B.size and not np.all(np.abs(B) == 1)) or (D.size and not np.all(np.abs(D) == 1)):
        raise DimensionError("codes must be -1/+1 valued")
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (m, r):
        raise DimensionError(f"encoder outputs must have shape {(m, r)}")
    if not isinstance(X, DelegateMatrix):
        X = DelegateMatrix(np.asarray(X, dtype=np.float64).T)
    if not isinstance(Y, DelegateMatrix):
        Y = DelegateMatrix(np.asarray(Y, dtype=np.float64).T)
    _as_entity_major(X, n, r, "X")
    _as_entity_major(Y, m, r, "Y")
    state = SolverState(
        interactions=interactions,
        B=B,
        D=D,
        X=X,
        Y=Y,
        F=F,
        t_d=D.sum(axis=0),
        pos_sums=_positive_code_sums(interactions, D),
    )
    if hp.neg_samples is not None:
        rng = np.random.default_rng(hp.seed if seed is None else seed)
        state.neg_items, state.neg_z, state.rev_neg = _sample_negatives(
            interactions, hp, rng
        )
    return state


def initialize(interactions, content, dae_params, hp, seed=None):
    """Seeded starting point: codes from delegate signs and encoder outputs.

    Draws X then Y with standard normal entries (unprojected; they only
    meet their constraints after the first delegate update), sets
    B = sgn(X) and D = sgn(encode(content)), and fills F from the encoder.
    """
    vectors = _content_vectors(content)
    if vectors.shape[0] != interactions.n_items:
        raise DimensionError("content rows do not match the item count")
    if dae_params.code_bits != hp.n_bits:
        raise DimensionError(
            f"encoder emits {dae_params.code_bits} bits, hp.n_bits is {hp.n_bits}"
        )
    n, m, r = interactions.n_users, interactions.n_items, hp.n_bits
    rng = np.random.default_rng(hp.seed if seed is None else seed)
    X = DelegateMatrix(rng.standard_normal((r, n)))
    Y = DelegateMatrix(rng.standard_normal((r, m)))
    F = encode(dae_params, vectors)
    return build_state(
        interactions, sgn(X.values.T), sgn(F), X, Y, F, hp,
        seed=rng.integers(1 << 63),
    )


# ---------------------------------------------------------------------------
# bit scores (public, vectorised over bits; the sweeps use scalar loops)


def user_bit_scores(state, hp, u):
    """Update scores for every bit of user u's code at the current state.

    Entry k is the coefficient of bit k in the user's objective: positive
    means the bit wants to be -1, negative means +1, zero means keep.
    """
    inter = state.interactions
    B, D = state.B, state.D
    n, r = B.shape
    m = D.shape[0]
    b = B[u]
    x_row = _as_entity_major(state.X, n, r, "X")[u]
    pos = inter.user_items[u]
    p = pos.size
    Dp = D[pos]
    s_pos = Dp @ b
    SP = s_pos.sum()
    SPd = Dp.T @ s_pos
    Pk = Dp.sum(axis=0)
    two_r = 2.0 * r
    if state.neg_items is None:
        z = inter.z[u]
        nn = m - p
        s_all = D @ b
        Mb = D.T @ s_all
        tb = s_all.sum()
        t_d = D.sum(axis=0)
        swp_d = SPd - b * p
        swp = SP - b * Pk
        w_neg = (tb - b * t_d) - swp
        nk = t_d - Pk
        swd_neg = (Mb - b * m) - swp_d
    else:
        z = state.neg_z[u]
        negs = state.neg_items[u]
        nn = negs.size
        Dn = D[negs]
        s_neg = Dn @ b
        nk = Dn.sum(axis=0)
        swp_d = SPd - b * p
        swp = SP - b * Pk
        w_neg = s_neg.sum() - b * nk
        swd_neg = Dn.T @ s_neg - b * nn
    pair = nn * swp_d - swp * nk - w_neg * Pk + p * swd_neg + two_r * (p * nk - nn * Pk)
    return z * pair - hp.alpha * x_row


def item_bit_scores(state, hp, i):
    """Update scores for every bit of item i's code at the current state.

    Sign convention matches user_bit_scores.  Aggregates are rebuilt from
    scratch here, so this is the slow reference path; the sweep maintains
    them incrementally.
    """
    inter = state.interactions
    B, D, F = state.B, state.D, state.F
    n, r = B.shape
    m = D.shape[0]
    d = D[i]
    y_row = _as_entity_major(state.Y, m, r, "Y")[i]
    two_r = 2.0 * r
    base = -hp.lam * F[i] - hp.beta * y_row
    pos_sums = _positive_code_sums(inter, D)
    SPu = np.einsum("ur,ur->u", B, pos_sums)
    ui = inter.item_users[i]
    if state.neg_items is None:
        z = inter.z
        if ui.size:
            ui = ui[z[ui] > 0]
        p_all = np.array([a.size for a in inter.user_items], dtype=np.float64)
        zp = z * p_all
        zPBd = B.T @ (zp * (B @ d))
        ZPB1 = B.T @ zp
        Zp = zp.sum()
        ZS = B.T @ (z * SPu)
        bt = B @ D.sum(axis=0)
        zu = z[ui]
        Bu = B[ui]
        pu = p_all[ui]
        nnu = m - pu
        su = Bu @ d
        v = su[:, None] - Bu * d
        plus = (zu[:, None] * Bu * (nnu[:, None] * (v - two_r) - (bt[ui] - SPu[ui])[:, None])).sum(axis=0)
        neg_all = two_r * ZPB1 - ZS + zPBd - d * Zp
        neg_pos = (zu[:, None] * Bu * (pu[:, None] * (two_r + v) - SPu[ui][:, None])).sum(axis=0)
        return plus + neg_all - neg_pos + base
    z = state.neg_z
    if ui.size:
        ui = ui[z[ui] > 0]
    ri = state.rev_neg[i]
    zu = z[ui]
    Bu = B[ui]
    nnu = np.array([state.neg_items[u].size for u in ui], dtype=np.float64)
    snb = np.array([float((D[state.neg_items[u]] @ B[u]).sum()) for u in ui])
    if not ui.size:
        snb = np.zeros(0)
    su = Bu @ d
    v = su[:, None] - Bu * d
    plus = (zu[:, None] * Bu * (nnu[:, None] * (v - two_r) - snb[:, None])).sum(axis=0)
    zr = z[ri]
    Br = B[ri]
    pr = np.array([inter.user_items[u].size for u in ri], dtype=np.float64)
    sr = Br @ d
    vr = sr[:, None] - Br * d
    neg = (zr[:, None] * Br * (pr[:, None] * (two_r + vr) - SPu[ri][:, None])).sum(axis=0)
    return plus + neg + base


# ---------------------------------------------------------------------------
# fresh objective evaluations (check mode and tests)


def _user_objective(D, b, pos, negs, z, x_row, alpha):
    """The terms of the joint objective that depend on one user's code.

    Evaluated directly from the definition (negatives enumerated), so it is
    independent of the incremental caches the sweeps maintain.
    """
    out = -2.0 * alpha * float(x_row @ b)
    if z == 0.0:
        return out
    two_r = 2.0 * b.size
    s = D @ b
    sp = s[pos]
    if negs is None:
        mask = np.ones(D.shape[0], dtype=bool)
        mask[pos] = False
        sn = s[mask]
    else:
        sn = s[negs]
    gaps = (two_r - sp)[:, None] + sn[None, :]
    return out + z * float((gaps * gaps).sum())


def _item_objective(inter, B, D, i, f_i, y_i, hp, neg_items=None, neg_z=None):
    """The terms of the joint objective that depend on one item's code.

    Direct enumeration over users; D must already hold the candidate row.
    """
    r = B.shape[1]
    m = D.shape[0]
    two_r = 2.0 * r
    d = D[i]
    total = hp.lam * float(((d - f_i) ** 2).sum()) - 2.0 * hp.beta * float(y_i @ d)
    for u in range(inter.n_users):
        z = inter.z[u] if neg_z is None else neg_z[u]
        if z == 0.0:
            continue
        pos = inter.user_items[u]
        b = B[u]
        h = float(b @ d)
        at = np.searchsorted(pos, i)
        in_pos = at < pos.size and pos[at] == i
        if neg_items is None:
            if in_pos:
                s = D @ b
                mask = np.ones(m, dtype=bool)
                mask[pos] = False
                total += z * float((((two_r - h) + s[mask]) ** 2).sum())
            else:
                sp = D[pos] @ b
                total += z * float(((two_r - sp + h) ** 2).sum())
        else:
            negs = neg_items[u]
            if in_pos:
                total += z * float((((two_r - h) + D[negs] @ b) ** 2).sum())
            else:
                at = np.searchsorted(negs, i)
                if at < negs.size and negs[at] == i:
                    sp = D[pos] @ b
                    total += z * float(((two_r - sp + h) ** 2).sum())
    return total


# ---------------------------------------------------------------------------
# user phase


def _sweep_user_full(b, x_row, D, pos, z, t_d, gram_d, hp, audit):
    r = b.size
    m = D.shape[0]
    p = pos.size
    nn = m - p
    two_r = 2.0 * r
    Dp = D[pos]
    Pk = Dp.sum(axis=0)
    P2 = Dp.T @ Dp
    s_pos = Dp @ b
    SP = s_pos.sum()
    SPd = Dp.T @ s_pos
    Mb = gram_d @ b
    tb = float(t_d @ b)
    total = 0
    for _ in range(hp.dcd_max_passes):
        flips = 0
        for k in range(r):
            bk = b[k]
            t1 = nn * (SPd[k] - bk * p)
            swp = SP - bk * Pk[k]
            nk = t_d[k] - Pk[k]
            t2 = swp * nk
            t3 = ((tb - bk * t_d[k]) - swp) * Pk[k]
            t4 = p * ((Mb[k] - bk * m) - (SPd[k] - bk * p))
            t5 = two_r * p * nk
            t6 = two_r * nn * Pk[k]
            score = z * (t1 - t2 - t3 + t4 + t5 - t6) - hp.alpha * x_row[k]
            mags = z * (abs(t1) + abs(t2) + abs(t3) + abs(t4) + abs(t5) + abs(t6))
            mags += abs(hp.alpha * x_row[k])
            if abs(score) <= ZERO_REL * mags:
                continue
            new = -1.0 if score > 0 else 1.0
            if new == bk:
                continue
            b[k] = new
            step = 2.0 * new
            SP += step * Pk[k]
            SPd += step * P2[:, k]
            Mb += step * gram_d[:, k]
            tb += step * t_d[k]
            flips += 1
            if audit is not None:
                audit()
        total += flips
        if flips == 0:
            break
    return total


def _sweep_user_sampled(b, x_row, D, pos, negs, z, hp, audit):
    r = b.size
    p = pos.size
    nn = negs.size
    two_r = 2.0 * r
    Dp = D[pos]
    Dn = D[negs]
    Pk = Dp.sum(axis=0)
    Nk = Dn.sum(axis=0)
    P2 = Dp.T @ Dp
    N2 = Dn.T @ Dn
    s_pos = Dp @ b
    s_neg = Dn @ b
    SP = s_pos.sum()
    SN = s_neg.sum()
    SPd = Dp.T @ s_pos
    SNd = Dn.T @ s_neg
    total = 0
    for _ in range(hp.dcd_max_passes):
        flips = 0
        for k in range(r):
            bk = b[k]
            t1 = nn * (SPd[k] - bk * p)
            t2 = (SP - bk * Pk[k]) * Nk[k]
            t3 = (SN - bk * Nk[k]) * Pk[k]
            t4 = p * (SNd[k] - bk * nn)
            t5 = two_r * p * Nk[k]
            t6 = two_r * nn * Pk[k]
            score = z * (t1 - t2 - t3 + t4 + t5 - t6) - hp.alpha * x_row[k]
            mags = z * (abs(t1) + abs(t2) + abs(t3) + abs(t4) + abs(t5) + abs(t6))
            mags += abs(hp.alpha * x_row[k])
            if abs(score) <= ZERO_REL * mags:
                continue
            new = -1.0 if score > 0 else 1.0
            if new == bk:
                continue
            b[k] = new
            step = 2.0 * new
            SP += step * Pk[k]
            SPd += step * P2[:, k]
            SN += step * Nk[k]
            SNd += step * N2[:, k]
            flips += 1
            if audit is not None:
                audit()
        total += flips
        if flips == 0:
            break
    return total


def update_user_codes(state, hp, threads=1, check=False):
    """One discrete-descent phase over every user's code bits.

    Item codes, delegates and encoder outputs are read-only here, so users
    are independent: with threads > 1 they are processed concurrently with
    identical results.  Bits are visited in ascending order, repeatedly,
    until a pass flips nothing or hp.dcd_max_passes is reached.  Returns
    the number of accepted flips.  check=True re-evaluates the user's
    objective from scratch after every flip and raises
    SolverInvariantError if it ever rose (slow; forces a single thread).
    """
    inter = state.interactions
    B, D = state.B, state.D
    n, r = B.shape
    Xe = _as_entity_major(state.X, n, r, "X")
    sampled = state.neg_items is not None
    if not sampled:
        t_d = D.sum(axis=0)
        gram_d = D.T @ D

    def one(u):
        pos = inter.user_items[u]
        negs = state.neg_items[u] if sampled else None
        z = state.neg_z[u] if sampled else inter.z[u]
        if z == 0.0 and hp.alpha == 0.0:
            return 0
        audit = None
        if check:
            ref = [_user_objective(D, B[u], pos, negs, z, Xe[u], hp.alpha)]

            def audit():
                cur = _user_objective(D, B[u], pos, negs, z, Xe[u], hp.alpha)
                if cur > ref[0] + _DESCENT_RTOL * max(1.0, abs(ref[0])):
                    raise SolverInvariantError(
                        f"user {u}: flip raised objective {ref[0]:.12g} -> {cur:.12g}"
                    )
                ref[0] = cur

        if sampled:
            return _sweep_user_sampled(B[u], Xe[u], D, pos, negs, z, hp, audit)
        return _sweep_user_full(B[u], Xe[u], D, pos, z, t_d, gram_d, hp, audit)

    if threads > 1 and n > 1 and not check:
        bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
            chunks = pool.map(
                lambda span: sum(one(u) for u in range(span[0], span[1])),
                zip(bounds[:-1], bounds[1:]),
            )
            return sum(chunks)
    return sum(one(u) for u in range(n))


# ---------------------------------------------------------------------------
# item phase


def _sweep_items_full(state, hp, audit_for):
    inter = state.interactions
    B, D, F = state.B, state.D, state.F
    n, r = B.shape
    m = D.shape[0]
    two_r = 2.0 * r
    Ye = _as_entity_major(state.Y, m, r, "Y")
    z = inter.z
    p_all = np.array([a.size for a in inter.user_items], dtype=np.float64)
    zp = z * p_all
    ZPB = (B * zp[:, None]).T @ B
    ZPB1 = B.T @ zp
    Zp = zp.sum()
    t_d = state.t_d
    pos_sums = state.pos_sums
    bt = B @ t_d
    SPu = np.einsum("ur,ur->u", B, pos_sums)
    ZS = B.T @ (z * SPu)
    total = 0
    for i in range(m):
        ui_all = inter.item_users[i]
        Ba = B[ui_all]
        # z = 0 users drop out of the score terms, but their cache rows
        # (pos_sums, SPu) still track this item's code and must be updated.
        ui = ui_all[z[ui_all] > 0] if ui_all.size else ui_all
        zu = z[ui]
        Bu = B[ui]
        pu = p_all[ui]
        nnu = m - pu
        d = D[i]
        su = Bu @ d
        zPBd = ZPB @ d
        lam_f = hp.lam * F[i]
        beta_y = hp.beta * Ye[i]
        audit = audit_for(i) if audit_for is not None else None
        for _ in range(hp.dcd_max_passes):
            flips = 0
            for k in range(r):
                dk = d[k]
                Bk = Bu[:, k]
                v = su - Bk * dk
                sp_ui = SPu[ui]
                a1 = zu * Bk * (nnu * (v - two_r) - bt[ui] + sp_ui)
                a2 = zu * Bk * (pu * (two_r + v) - sp_ui)
                g1 = two_r * ZPB1[k]
                g2 = ZS[k]
                g3 = zPBd[k]
                g4 = dk * Zp
                score = a1.sum() + (g1 - g2 + g3 - g4) - a2.sum() - lam_f[k] - beta_y[k]
                mags = (
                    np.abs(a1).sum()
                    + np.abs(a2).sum()
                    + abs(g1)
                    + abs(g2)
                    + abs(g3)
                    + abs(g4)
                    + abs(lam_f[k])
                    + abs(beta_y[k])
                )
                if abs(score) <= ZERO_REL * mags:
                    continue
                new = -1.0 if score > 0 else 1.0
                if new == dk:
                    continue
                d[k] = new
                step = 2.0 * new
                su += step * Bk
                zPBd += step * ZPB[:, k]
                t_d[k] += step
                bt += step * B[:, k]
                pos_sums[ui_all, k] += step
                SPu[ui_all] += step * Ba[:, k]
                ZS += step * (Bu.T @ (zu * Bk))
                flips += 1
                if audit is not None:
                    audit()
            total += flips
            if flips == 0:
                break
    return total


def _sweep_items_sampled(state, hp, audit_for):
    inter = state.interactions
    B, D, F = state.B, state.D, state.F
    n, r = B.shape
    m = D.shape[0]
    two_r = 2.0 * r
    Ye = _as_entity_major(state.Y, m, r, "Y")
    z = state.neg_z
    p_all = np.array([a.size for a in inter.user_items], dtype=np.float64)
    nn_all = np.array([a.size for a in state.neg_items], dtype=np.float64)
    t_d = state.t_d
    pos_sums = state.pos_sums
    SPu = np.einsum("ur,ur->u", B, pos_sums)
    SNb = np.array(
        [float((D[negs] @ B[u]).sum()) for u, negs in enumerate(state.neg_items)]
    )
    total = 0
    for i in range(m):
        ui_all = inter.item_users[i]
        Ba = B[ui_all]
        ui = ui_all[z[ui_all] > 0] if ui_all.size else ui_all
        ri = state.rev_neg[i]
        zu = z[ui]
        Bu = B[ui]
        nnu = nn_all[ui]
        zr = z[ri]
        Br = B[ri]
        pr = p_all[ri]
        d = D[i]
        su = Bu @ d
        sr = Br @ d
        lam_f = hp.lam * F[i]
        beta_y = hp.beta * Ye[i]
        audit = audit_for(i) if audit_for is not None else None
        for _ in range(hp.dcd_max_passes):
            flips = 0
            for k in range(r):
                dk = d[k]
                Bk = Bu[:, k]
                Brk = Br[:, k]
                v = su - Bk * dk
                vr = sr - Brk * dk
                a1 = zu * Bk * (nnu * (v - two_r) - SNb[ui])
                a2 = zr * Brk * (pr * (two_r + vr) - SPu[ri])
                score = a1.sum() + a2.sum() - lam_f[k] - beta_y[k]
                mags = np.abs(a1).sum() + np.abs(a2).sum() + abs(lam_f[k]) + abs(beta_y[k])
                if abs(score) <= ZERO_REL * mags:
                    continue
                new = -1.0 if score > 0 else 1.0
                if new == dk:
                    continue
                d[k] = new
                step = 2.0 * new
                su += step * Bk
                sr += step * Brk
                t_d[k] += step
                pos_sums[ui_all, k] += step
                SPu[ui_all] += step * Ba[:, k]
                SNb[ri] += step * Brk
                flips += 1
                if audit is not None:
                    audit()
            total += flips
            if flips == 0:
                break
    return total


def update_item_codes(state, hp, check=False):
    """One discrete-descent phase over every item's code bits.

    Runs sequentially in ascending item order: each accepted flip updates
    the shared aggregates in place so later items see the new code.
    Returns the number of accepted flips.  check=True re-evaluates the
    item's objective after every flip and recomputes the persistent caches
    at phase end, raising SolverInvariantError on any inconsistency.
    """
    inter = state.interactions
    m, r = state.D.shape
    Ye = _as_entity_major(state.Y, m, r, "Y")
    audit_for = None
    if check:
        def audit_for(i):
            ref = [_item_objective(inter, state.B, state.D, i, state.F[i], Ye[i],
                                   hp, state.neg_items, state.neg_z)]

            def audit():
                cur = _item_objective(inter, state.B, state.D, i, state.F[i], Ye[i],
                                      hp, state.neg_items, state.neg_z)
                if cur > ref[0] + _DESCENT_RTOL * max(1.0, abs(ref[0])):
                    raise SolverInvariantError(
                        f"item {i}: flip raised objective {ref[0]:.12g} -> {cur:.12g}"
                    )
                ref[0] = cur

            return audit

    if state.neg_items is None:
        flips = _sweep_items_full(state, hp, audit_for)
    else:
        flips = _sweep_items_sampled(state, hp, audit_for)
    if check:
        if not np.array_equal(state.t_d, state.D.sum(axis=0)) or not np.array_equal(
            state.pos_sums, _positive_code_sums(inter, state.D)
        ):
            raise SolverInvariantError("stale aggregates after the item phase")
    return flips


# ---------------------------------------------------------------------------
# delegate projection


def _complete_basis(have, extra, rng):
    """`extra` orthonormal columns orthogonal to the columns of `have`."""
    dim = have.shape[0]
    cols = []
    for _ in range(extra):
        while True:
            v = rng.standard_normal(dim)
            for _ in range(2):
                if have.shape[1]:
                    v = v - have @ (have.T @ v)
            norm = np.linalg.norm(v)
            if norm > 1e-8 * np.sqrt(dim):
                break
        v /= norm
        have = np.hstack([have, v[:, None]])
        cols.append(v)
    return np.array(cols).T if cols else np.zeros((dim, 0))


def project_delegate(codes, seed=0):
    """Best balanced-orthogonal delegate for a code matrix.

    Accepts a CodeMatrix or a (count, n_bits) sign array.  Returns the
    DelegateMatrix maximising tr(M^T X) over matrices with zero row sums
    and X X^T = count * I, via the SVD of the row-centred code matrix.
    Directions lost to rank deficiency (duplicate or perfectly balanced
    codes) are filled with seeded random orthonormal vectors, so the result
    is always feasible and deterministic for a given seed.
    """
    signs = codes.to_signs() if isinstance(codes, CodeMatrix) else np.asarray(codes, dtype=np.float64)
    if signs.ndim != 2:
        raise DimensionError("codes must be 2-d")
    count, r = signs.shape
    if count <= r:
        raise InfeasibleDimensionError(
            f"delegate constraints need more than {r} entities, got {count}"
        )
    M = signs.T
    Mc = M - M.mean(axis=1, keepdims=True)
    U, s, Vt = np.linalg.svd(Mc, full_matrices=False)
    rank = int((s > 1e-10 * s[0]).sum()) if s.size and s[0] > 0 else 0
    U = U[:, :rank]
    V = Vt[:rank].T
    rng = np.random.default_rng(seed)
    U_fill = _complete_basis(U, r - rank, rng)
    ones = np.full((count, 1), 1.0 / np.sqrt(count))
    V_fill = _complete_basis(np.hstack([V, ones]), r - rank, rng)
    X = np.sqrt(count) * (np.hstack([U, U_fill]) @ np.hstack([V, V_fill]).T)
    out = DelegateMatrix(X)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# outer loop


def _surrogate_pair_loss(state):
    inter = state.interactions
    B, D = state.B, state.D
    two_r = 2.0 * B.shape[1]
    total = 0.0
    for u in range(inter.n_users):
        z = state.neg_z[u]
        if z == 0.0:
            continue
        b = B[u]
        sp = D[inter.user_items[u]] @ b
        sn = D[state.neg_items[u]] @ b
        a = two_r - sp
        total += z * (
            sn.size * float(a @ a)
            + 2.0 * float(a.sum()) * float(sn.sum())
            + sp.size * float(sn @ sn)
        )
    return total


def trace_loss(state, hp):
    """Objective value recorded in the loss trace.

    The exact joint objective in full-complement mode; with negative
    sampling, the same expression with the pair term restricted to the
    sampled negatives (that is what the sweeps actually descend on).
    """
    if state.neg_items is None:
        return total_loss(
            state.interactions, state.B, state.D, state.X, state.Y, state.F, hp
        )
    n, r = state.B.shape
    m = state.D.shape[0]
    Xe = _as_entity_major(state.X, n, r, "X")
    Ye = _as_entity_major(state.Y, m, r, "Y")
    loss = _surrogate_pair_loss(state)
    loss += hp.lam * float(((state.D - state.F) ** 2).sum())
    loss -= 2.0 * hp.alpha * float((state.B * Xe).sum())
    loss -= 2.0 * hp.beta * float((state.D * Ye).sum())
    return loss


def fit(interactions, content, dae_params, hp, dae_cfg=None, threads=1):
    """Run the full alternating optimisation from a pretrained encoder.

    Each outer iteration updates user codes, then item codes, re-projects
    both delegates, finetunes the encoder toward the item codes (skipped
    when dae_cfg is None or has zero epochs) and refreshes F.  The loss is
    recorded after every iteration; the loop stops at hp.outer_iters or
    once the relative loss change stays below 1e-5 for three consecutive
    iterations.  dae_params is not mutated; the tuned copy is returned.
    """
    vectors = _content_vectors(content)
    state = initialize(interactions, content, dae_params, hp)
    params = dae_params.copy()
    trace = [trace_loss(state, hp)]
    converged = False
    streak = 0
    for it in range(1, hp.outer_iters + 1):
        update_user_codes(state, hp, threads=threads)
        update_item_codes(state, hp)
        state.X = project_delegate(state.B, seed=hp.seed + 2 * it)
        state.Y = project_delegate(state.D, seed=hp.seed + 2 * it + 1)
        if dae_cfg is not None and dae_cfg.epochs > 0:
            finetune(params, vectors, state.D, replace(dae_cfg, seed=dae_cfg.seed + it))
            state.F = encode(params, vectors)
        cur = trace_loss(state, hp)
        if not np.isfinite(cur):
            err = DivergenceError(f"non-finite loss at outer iteration {it}")
            err.loss_trace = np.array(trace)
            raise err
        rel = abs(cur - trace[-1]) / max(abs(trace[-1]), 1e-12)
        trace.append(cur)
        streak = streak + 1 if rel < _CONV_RTOL else 0
        if streak >= _CONV_STREAK:
            converged = True
            break
    state.loss_trace = trace
    return FitResult(
        user_codes=CodeMatrix.from_signs(state.B),
        item_codes=CodeMatrix.from_signs(state.D),
        dae=params,
        hp=hp,
        loss_trace=np.array(trace),
        user_delegate=state.X,
        item_delegate=state.Y,
        encoder_outputs=state.F,
        n_iters=len(trace) - 1,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# model artifact


@dataclass
class ModelArtifact:
    """Deserialised model file: codes, tuned encoder and audit trail."""

    user_codes: CodeMatrix
    item_codes: CodeMatrix
    dae: DaeParams
    hp: HyperParams
    loss_trace: np.ndarray
    id_maps_ref: str | None = None
    id_maps_sha256: str | None = None


def model_bytes(result, id_maps_ref=None, id_maps_sha256=None):
    """Serialise a fit result to the versioned binary artifact format.

    Layout: 8-byte magic, u32 version, u64 metadata length, canonical JSON
    metadata, packed user code words, packed item code words, the embedded
    encoder checkpoint, then the loss trace as float64.  Everything is
    little-endian and the JSON is key-sorted, so identical runs produce
    byte-identical files.
    """
    B, D = result.user_codes, result.item_codes
    ckpt = checkpoint_bytes(result.dae)
    trace = np.ascontiguousarray(result.loss_trace, dtype="<f8")
    meta = {
        "format": "hashrec-model",
        "n_bits": B.n_bits,
        "n_users": B.count,
        "n_items": D.count,
        "hp": asdict(result.hp),
        "ckpt_bytes": len(ckpt),
        "loss_len": int(trace.size),
        "id_maps_ref": id_maps_ref,
        "id_maps_sha256": id_maps_sha256,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return b"".join(
        [
            _MODEL_MAGIC,
            struct.pack("<IQ", _MODEL_VERSION, len(blob)),
            blob,
            np.ascontiguousarray(B.words, dtype="<u8").tobytes(),
            np.ascontiguousarray(D.words, dtype="<u8").tobytes(),
            ckpt,
            trace.tobytes(),
        ]
    )


def save_model(path, result, id_maps_ref=None, id_maps_sha256=None):
    with open(path, "wb") as fh:
        fh.write(model_bytes(result, id_maps_ref, id_maps_sha256))


def load_model(path):
    """Read a model artifact back; raises ArtifactError on anything off."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = len(_MODEL_MAGIC) + 12
    if len(raw) < head or raw[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise ArtifactError("not a model artifact")
    version, meta_len = struct.unpack_from("<IQ", raw, len(_MODEL_MAGIC))
    if version != _MODEL_VERSION:
        raise ArtifactError(f"unsupported model version {version}")
    try:
        meta = json.loads(raw[head : head + meta_len])
    except ValueError as exc:
        raise ArtifactError("corrupt model metadata") from exc
    if meta.get("format") != "hashrec-model":
        raise ArtifactError("corrupt model metadata")
    r = meta["n_bits"]
    n, m = meta["n_users"], meta["n_items"]
    n_words = (r + 63) // 64
    at = head + meta_len
    try:
        b_bytes = n * n_words * 8
        d_bytes = m * n_words * 8
        B = np.frombuffer(raw, dtype="<u8", count=n * n_words, offset=at).reshape(n, n_words)
        at += b_bytes
        D = np.frombuffer(raw, dtype="<u8", count=m * n_words, offset=at).reshape(m, n_words)
        at += d_bytes
        dae = params_from_bytes(raw[at : at + meta["ckpt_bytes"]])
        at += meta["ckpt_bytes"]
        trace = np.frombuffer(raw, dtype="<f8", count=meta["loss_len"], offset=at).copy()
        at += meta["loss_len"] * 8
    except ValueError as exc:
        raise ArtifactError("model artifact is truncated") from exc
    if at != len(raw):
        raise ArtifactError(f"{len(raw) - at} unexpected trailing bytes")
    return ModelArtifact(
        user_codes=CodeMatrix(r, n, B.copy()),
        item_codes=CodeMatrix(r, m, D.copy()),
        dae=dae,
        hp=HyperParams(**meta["hp"]),
        loss_trace=trace,
        id_maps_ref=meta.get("id_maps_ref"),
        id_maps_sha256=meta.get("id_maps_sha256"),
    )
