"""Planted-block synthetic corpus generator.

Desk-scale ground truth for end-to-end checks: users and items are dealt
round-robin into latent blocks, positives appear with one rate inside a
block and a smaller noise rate across blocks, and each item's document is
drawn mostly from a block-specific pseudo-word vocabulary so that content
predicts the block.  A seeded subset of items is thinned to at most
`cold_keep` positives, which parks them under the cold threshold of the
downstream split.  The block labels, planted centroids and vocabularies
are returned (and serialisable) so tests can score recovery against the
truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import STOPWORDS, RawCorpus
from .errors import DimensionError

__all__ = ["GroundTruth", "SynthSpec", "generate", "load_ground_truth", "save_ground_truth"]

_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))
_WORD_LEN = 7


@dataclass(frozen=True)
class SynthSpec:
    """Sizes and rates of the planted block model."""

    n_users: int = 200
    n_items: int = 300
    blocks: int = 4
    r_true: int = 16
    density: float = 0.3  # within-block positive rate
    noise: float = 0.05  # cross-block positive rate
    cold_frac: float = 0.1  # fraction of items thinned below the cold bar
    cold_keep: int = 4  # positives a thinned item keeps
    doc_len: int = 60  # tokens per item document
    vocab_per_block: int = 40
    shared_vocab: int = 30
    block_token_rate: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 2:
            raise DimensionError("need at least two blocks")
        if self.n_users < self.blocks or self.n_items < self.blocks:
            raise DimensionError("every block needs at least one user and one item")
        if self.r_true < 1:
            raise DimensionError("r_true must be positive")
        for name in ("density", "noise", "cold_frac", "block_token_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DimensionError(f"{name} must lie in [0, 1]")
        if self.cold_keep < 1:
            raise DimensionError("cold items must keep at least one positive")
        if min(self.doc_len, self.vocab_per_block, self.shared_vocab) < 1:
            raise DimensionError("document and vocabulary sizes must be positive")


@dataclass
class GroundTruth:
    """What the generator planted, keyed by the raw string ids."""

    user_blocks: dict[str, int]
    item_blocks: dict[str, int]
    cold_items: list[str]
    centroids: np.ndarray  # (blocks, r_true) -1/+1
    block_vocabs: list[list[str]]
    shared_words: list[str]
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "user_blocks": self.user_blocks,
            "item_blocks": self.item_blocks,
            "cold_items": list(self.cold_items),
            "centroids": np.asarray(self.centroids, dtype=np.int64).tolist(),
            "block_vocabs": [list(v) for v in self.block_vocabs],
            "shared_words": list(self.shared_words),
            "params": dict(self.params),
        }


def save_ground_truth(path, truth):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return GroundTruth(
        user_blocks={k: int(v) for k, v in obj["user_blocks"].items()},
        item_blocks={k: int(v) for k, v in obj["item_blocks"].items()},
        cold_items=[str(x) for x in obj["cold_items"]],
        centroids=np.asarray(obj["centroids"], dtype=np.int64),
        block_vocabs=[[str(w) for w in v] for v in obj["block_vocabs"]],
        shared_words=[str(w) for w in obj["shared_words"]],
        params=dict(obj.get("params", {})),
    )


def _pseudo_words(rng, count, taken):
    """Fresh lowercase 7-letter words that survive the tokenizer."""
    out = []
    while len(out) < count:
        word = "".join(rng.choice(_LETTERS, size=_WORD_LEN))
        if word in taken or word in STOPWORDS:
            continue
        taken.add(word)
        out.append(word)
    return out


def generate(spec):
    """Draw one synthetic corpus.

    Returns:
        (RawCorpus, GroundTruth).  Interactions are ordered by user then
        item; all randomness comes from default_rng(spec.seed), so equal
        specs give byte-identical corpora.
    """
    rng = np.random.default_rng(spec.seed)
    n, m, blocks = spec.n_users, spec.n_items, spec.blocks
    uw, iw = len(str(n - 1)), len(str(m - 1))
    users = [f"u{u:0{uw}d}" for u in range(n)]
    items = [f"i{j:0{iw}d}" for j in range(m)]
    user_block = np.arange(n) % blocks
    item_block = np.arange(m) % blocks

    centroids = rng.integers(0, 2, size=(blocks, spec.r_true)) * 2 - 1

    same = user_block[:, None] == item_block[None, :]
    rates = np.where(same, spec.density, spec.noise)
    dense = rng.random((n, m)) < rates

    n_cold = int(round(spec.cold_frac * m))
    flagged = np.sort(rng.choice(m, size=n_cold, replace=False)) if n_cold else []
    for j in flagged:
        owners = np.flatnonzero(dense[:, j])
        if owners.size > spec.cold_keep:
            keep = rng.choice(owners, size=spec.cold_keep, replace=False)
            dense[:, j] = False
            dense[keep, j] = True

    taken = set()
    block_vocabs = [_pseudo_words(rng, spec.vocab_per_block, taken) for _ in range(blocks)]
    shared = _pseudo_words(rng, spec.shared_vocab, taken)

    documents = {}
    for j in range(m):
        own = block_vocabs[item_block[j]]
        use_own = rng.random(spec.doc_len) < spec.block_token_rate
        own_picks = rng.integers(0, spec.vocab_per_block, size=spec.doc_len)
        shared_picks = rng.integers(0, spec.shared_vocab, size=spec.doc_len)
        tokens = [
            own[own_picks[t]] if use_own[t] else shared[shared_picks[t]]
            for t in range(spec.doc_len)
        ]
        documents[items[j]] = " ".join(tokens)

    interactions = [
        (users[u], items[j], 1.0)
        for u in range(n)
        for j in np.flatnonzero(dense[u])
    ]

    truth = GroundTruth(
        user_blocks={users[u]: int(user_block[u]) for u in range(n)},
        item_blocks={items[j]: int(item_block[j]) for j in range(m)},
        cold_items=[items[j] for j in flagged],
        centroids=centroids,
        block_vocabs=block_vocabs,
        shared_words=shared,
        params=asdict(spec),
    )
    return RawCorpus(interactions, documents), truth
