import numpy as np
import pytest

from hashrec.core import InteractionSet


def random_signs(rng, count, n_bits):
    return np.where(rng.random((count, n_bits)) < 0.5, -1.0, 1.0)


def random_interactions(rng, n_users, n_items, density=0.4):
    """Random implicit feedback; every density draw independent."""
    dense = rng.random((n_users, n_items)) < density
    per_user = [np.flatnonzero(dense[u]) for u in range(n_users)]
    return InteractionSet(n_users, n_items, per_user)


def enumerate_triples(inter):
    """Yield (u, i, j, z_u) for every positive i and negative j of each user."""
    for u in range(inter.n_users):
        z = inter.z[u]
        if z == 0.0:
            continue
        pos = inter.user_items[u]
        pos_set = set(pos.tolist())
        negs = [j for j in range(inter.n_items) if j not in pos_set]
        for i in pos:
            for j in negs:
                yield u, int(i), j, z


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
