"""Raw-data ingestion, TF-IDF text vectors, and train/test splitting.

Interactions arrive as (user_key, item_key, rating) rows and are binarised
to implicit positives.  Item text becomes row-normalised TF-IDF vectors
over a capped vocabulary.  Splitting first diverts every feedback on a
cold item (fewer than `cold_threshold` positives, content required) into
the cold test set, then draws an exact-size seeded sample of the remainder
as train, leaving the rest as the sparse test set.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .core import ContentMatrix, InteractionSet
from .errors import DimensionError, SplitError, VocabularyError

log = logging.getLogger("hashrec.data")

# compact English stopword list; checked against the tokeniser rules
# (every entry lowercase, alphabetic, length >= 2 entries or dropped anyway)
STOPWORDS = frozenset(
    """
    about above after again against all am an and any are aren as at be
    because been before being below between both but by can cannot could
    couldn did didn do does doesn doing don down during each few for from
    further had hadn has hasn have haven having he her here hers herself
    him himself his how if in into is isn it its itself just ll ma me
    might mightn more most mustn my myself no nor not now of off on once
    only or other our ours ourselves out over own re same shan she should
    shouldn so some such than that the their theirs them themselves then
    there these they this those through to too under until up ve very was
    wasn we were weren what when where which while who whom why will with
    won would wouldn you your yours yourself yourselves
    """.split()
)

_TOKEN_SPLIT = re.compile(r"[^a-z]+")
_VOWELS = set("aeiou")


def _stem(token):
    """Simplified suffix stripper: plural forms, then -ing / -ed.

    Rules: "sses" -> "ss", "ies" -> "i", trailing "s" dropped unless the
    token ends in "ss"; then one of "-ing"/"-ed" is removed when the stem
    would still contain a vowel.  A strip that leaves fewer than two
    characters is undone.
    """
    out = token
    if out.endswith("sses"):
        out = out[:-2]
    elif out.endswith("ies"):
        out = out[:-2]
    elif out.endswith("s") and not out.endswith("ss"):
        out = out[:-1]
    for suffix in ("ing", "ed"):
        if out.endswith(suffix):
            stem = out[: -len(suffix)]
            if any(c in _VOWELS for c in stem):
                out = stem
            break
    return out if len(out) >= 2 else token


def tokenize(text, stem=False):
    """Lowercase, split on non-alphabetic runs, drop stopwords and shorts.

    Digits and punctuation act as separators, so no surviving token ever
    contains them.  Tokens shorter than two characters and stopwords are
    removed; `stem` applies the simplified suffix stripper afterwards.
    """
    tokens = [
        t
        for t in _TOKEN_SPLIT.split(text.lower())
        if len(t) >= 2 and t not in STOPWORDS
    ]
    if stem:
        tokens = [_stem(t) for t in tokens]
    return tokens


@dataclass
class Vocabulary:
    """Capped term list ordered by descending max tf-idf score."""

    terms: list[str]
    idf: np.ndarray  # aligned with terms
    scores: np.ndarray  # ranking scores, aligned, non-increasing
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.idf = np.asarray(self.idf, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.terms) != self.idf.size or len(self.terms) != self.scores.size:
            raise DimensionError("vocabulary arrays misaligned")
        self.index = {t: i for i, t in enumerate(self.terms)}

    def __len__(self):
        return len(self.terms)


def build_vocab(docs, cap):
    """Select the top-`cap` terms of tokenised documents by max tf-idf.

    Args:
        docs: sequence of token lists (one per document; empties allowed).
        cap: maximum vocabulary size, >= 1.

    Returns:
        Vocabulary ordered by score descending, ties lexicographic
        ascending.  idf(t) = ln(n_docs / df(t)) with df counting documents
        containing t; a term's score is its best tf * idf over documents.

    Raises:
        VocabularyError: if every document is empty.
    """
    if cap < 1:
        raise DimensionError("vocabulary cap must be at least 1")
    n_docs = len(docs)
    df = {}
    best_tf = {}
    for tokens in docs:
        counts = {}
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
        for t, c in counts.items():
            df[t] = df.get(t, 0) + 1
            if c > best_tf.get(t, 0):
                best_tf[t] = c
    if not df:
        raise VocabularyError("no usable tokens in any document")
    scored = sorted(
        ((best_tf[t] * math.log(n_docs / df[t]), t) for t in df),
        key=lambda pair: (-pair[0], pair[1]),
    )[: int(cap)]
    terms = [t for _, t in scored]
    idf = np.array([math.log(n_docs / df[t]) for t in terms])
    scores = np.array([s for s, _ in scored])
    return Vocabulary(terms, idf, scores)


def vectorize(docs, vocab):
    """TF-IDF rows for tokenised documents, L2-normalised where nonzero.

    Documents with no vocabulary term keep an all-zero row and are flagged
    in the returned ContentMatrix.
    """
    vectors = np.zeros((len(docs), len(vocab)), dtype=np.float64)
    for row, tokens in enumerate(docs):
        for t in tokens:
            col = vocab.index.get(t)
            if col is not None:
                vectors[row, col] += vocab.idf[col]
    norms = np.linalg.norm(vectors, axis=1)
    zero = norms == 0.0
    vectors[~zero] /= norms[~zero, None]
    return ContentMatrix(list(vocab.terms), vectors, zero)


# ---------------------------------------------------------------------------
# raw corpus I/O


@dataclass
class RawCorpus:
    """Interactions plus item documents, still keyed by raw strings."""

    interactions: list[tuple[str, str, float]]
    documents: dict[str, str]


def read_interactions_csv(path):
    """Read `user,item,rating` rows (header required) from a UTF-8 CSV."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != [
            "user",
            "item",
            "rating",
        ]:
            raise DimensionError(
                f"{path}: expected header 'user,item,rating', got {header}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DimensionError(f"{path}:{line_no}: expected 3 columns")
            rows.append((row[0], row[1], float(row[2])))
    return rows


def write_interactions_csv(path, interactions):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "item", "rating"])
        for user, item, rating in interactions:
            writer.writerow([user, item, f"{rating:g}"])


def read_documents_jsonl(path):
    """Read one {"item": ..., "text": ...} object per line."""
    docs = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "item" not in obj or "text" not in obj:
                raise DimensionError(
                    f"{path}:{line_no}: document needs 'item' and 'text' fields"
                )
            docs[str(obj["item"])] = str(obj["text"])
    return docs


def write_documents_jsonl(path, documents):
    with open(path, "w", encoding="utf-8") as fh:
        for item, text in documents.items():
            fh.write(json.dumps({"item": item, "text": text}, sort_keys=True))
            fh.write("\n")


def load_corpus(interactions_path, documents_path):
    return RawCorpus(
        read_interactions_csv(interactions_path),
        read_documents_jsonl(documents_path),
    )


def binarize(raw):
    """Collapse rated interactions to distinct (user_key, item_key) pairs.

    Any observed rating counts as a positive; duplicates keep their first
    occurrence so output order follows the input.
    """
    seen = set()
    out = []
    for user, item, _rating in raw.interactions:
        key = (user, item)
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


@dataclass
class IndexedFeedback:
    """Binarised feedback with dense integer ids assigned to the keys."""

    n_users: int
    n_items: int
    pairs: np.ndarray  # (N, 2) int64 (user id, item id)
    user_ids: dict[str, int]
    item_ids: dict[str, int]


def index_feedback(feedback_pairs):
    """Assign dense ids to keys, sorted lexicographically for determinism."""
    if not feedback_pairs:
        raise SplitError("no interactions to index")
    users = sorted({u for u, _ in feedback_pairs})
    items = sorted({i for _, i in feedback_pairs})
    user_ids = {u: k for k, u in enumerate(users)}
    item_ids = {i: k for k, i in enumerate(items)}
    pairs = np.array(
        [(user_ids[u], item_ids[i]) for u, i in feedback_pairs], dtype=np.int64
    )
    return IndexedFeedback(len(users), len(items), pairs, user_ids, item_ids)


def build_content(raw, item_ids, cap, stem=False):
    """Tokenise corpus documents for known items and vectorise them.

    Documents for unknown items are ignored (logged).  Known items without
    a document get zero rows, flagged in the result.
    """
    n_items = len(item_ids)
    docs = [[] for _ in range(n_items)]
    unknown = 0
    for key, text in raw.documents.items():
        idx = item_ids.get(key)
        if idx is None:
            unknown += 1
            continue
        docs[idx] = tokenize(text, stem=stem)
    if unknown:
        log.info("ignored %d documents for items without interactions", unknown)
    vocab = build_vocab(docs, cap)
    content = vectorize(docs, vocab)
    missing = int(content.zero_rows.sum())
    if missing:
        log.info("%d of %d items have empty content vectors", missing, n_items)
    return content, vocab


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """How to carve feedback into train / sparse-test / cold-test."""

    sparsity_level: float
    cold_threshold: int = 5
    repetitions: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sparsity_level <= 1.0:
            raise SplitError("sparsity_level must be in (0, 1]")
        if self.cold_threshold < 1:
            raise SplitError("cold_threshold must be at least 1")
        if self.repetitions < 1:
            raise SplitError("repetitions must be at least 1")


@dataclass
class DatasetSplit:
    """One repetition of the train / test carving, with id maps attached."""

    train: InteractionSet
    test_sparse: np.ndarray  # (T, 2) held-out positives of warm items
    test_cold: np.ndarray  # (C, 2) positives of cold items
    cold_items: np.ndarray  # sorted cold item ids
    user_ids: dict[str, int]
    item_ids: dict[str, int]
    spec: SplitSpec
    rep_index: int
    dropped_sparse: int = 0
    dropped_cold: int = 0

    @property
    def n_users(self):
        return self.train.n_users

    @property
    def n_items(self):
        return self.train.n_items


def split_dataset(feedback, content, spec, rep_index):
    """Carve indexed feedback into train and the two test sets.

    Cold items (< spec.cold_threshold positives over the full feedback,
    nonzero content required) send all their pairs to test_cold.  Exactly
    floor(sparsity_level * remaining) pairs, drawn uniformly with seed
    spec.seed + rep_index, become train; the rest are test_sparse.  Test
    pairs whose user has no train positive are dropped and counted.

    Raises:
        SplitError: if rep_index is out of range or train would be empty.
    """
    if not 0 <= rep_index < spec.repetitions:
        raise SplitError(
            f"rep_index {rep_index} out of range for {spec.repetitions} repetitions"
        )
    if content.n_items != feedback.n_items:
        raise DimensionError("content matrix does not cover all items")
    pairs = feedback.pairs
    counts = np.bincount(pairs[:, 1], minlength=feedback.n_items)
    cold_mask = (counts < spec.cold_threshold) & (counts > 0) & ~content.zero_rows
    cold_items = np.flatnonzero(cold_mask)

    is_cold_pair = cold_mask[pairs[:, 1]]
    cold_pairs = pairs[is_cold_pair]
    warm_pairs = pairs[~is_cold_pair]
    if warm_pairs.shape[0] == 0:
        raise SplitError("no warm feedback left after cold-item removal")

    rng = np.random.default_rng(spec.seed + rep_index)
    n_train = int(spec.sparsity_level * warm_pairs.shape[0])
    if n_train == 0:
        raise SplitError(
            f"sparsity_level {spec.sparsity_level} yields an empty train set"
        )
    perm = rng.permutation(warm_pairs.shape[0])
    train_pairs = warm_pairs[np.sort(perm[:n_train])]
    sparse_pairs = warm_pairs[np.sort(perm[n_train:])]

    train = InteractionSet.from_pairs(feedback.n_users, feedback.n_items, train_pairs)
    has_train = train.pos_counts() > 0

    kept_sparse = sparse_pairs[has_train[sparse_pairs[:, 0]]] if sparse_pairs.size else sparse_pairs
    kept_cold = cold_pairs[has_train[cold_pairs[:, 0]]] if cold_pairs.size else cold_pairs
    dropped_sparse = sparse_pairs.shape[0] - kept_sparse.shape[0]
    dropped_cold = cold_pairs.shape[0] - kept_cold.shape[0]
    if dropped_sparse or dropped_cold:
        log.info(
            "dropped %d sparse and %d cold test pairs (users unseen in train)",
            dropped_sparse,
            dropped_cold,
        )
    return DatasetSplit(
        train=train,
        test_sparse=kept_sparse.reshape(-1, 2),
        test_cold=kept_cold.reshape(-1, 2),
        cold_items=cold_items,
        user_ids=dict(feedback.user_ids),
        item_ids=dict(feedback.item_ids),
        spec=spec,
        rep_index=rep_index,
        dropped_sparse=int(dropped_sparse),
        dropped_cold=int(dropped_cold),
    )


def save_content(content, path):
    """Write a ContentMatrix to an .npz archive (deterministic bytes)."""
    np.savez(
        path,
        vocab=np.asarray(content.vocab, dtype=np.str_),
        vectors=content.vectors,
        zero_rows=content.zero_rows,
    )


def load_content(path):
    with np.load(path, allow_pickle=False) as archive:
        return ContentMatrix(
            [str(t) for t in archive["vocab"]],
            archive["vectors"],
            archive["zero_rows"],
        )


def save_split(split, path):
    """Write a split manifest as canonical JSON (sufficient for re-runs)."""
    payload = {
        "format": "hashrec-split",
        "version": 1,
        "spec": {
            "sparsity_level": split.spec.sparsity_level,
            "cold_threshold": split.spec.cold_threshold,
            "repetitions": split.spec.repetitions,
            "seed": split.spec.seed,
        },
        "rep_index": split.rep_index,
        "n_users": split.n_users,
        "n_items": split.n_items,
        "user_ids": split.user_ids,
        "item_ids": split.item_ids,
        "train": split.train.pairs().tolist(),
        "test_sparse": split.test_sparse.tolist(),
        "test_cold": split.test_cold.tolist(),
        "cold_items": split.cold_items.tolist(),
        "dropped_sparse": split.dropped_sparse,
        "dropped_cold": split.dropped_cold,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_split(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "hashrec-split":
        raise SplitError(f"{path} is not a split manifest")
    spec = SplitSpec(**payload["spec"])
    train = InteractionSet.from_pairs(
        payload["n_users"], payload["n_items"], np.asarray(payload["train"])
    )
    return DatasetSplit(
        train=train,
        test_sparse=np.asarray(payload["test_sparse"], dtype=np.int64).reshape(-1, 2),
        test_cold=np.asarray(payload["test_cold"], dtype=np.int64).reshape(-1, 2),
        cold_items=np.asarray(payload["cold_items"], dtype=np.int64),
        user_ids=dict(payload["user_ids"]),
        item_ids=dict(payload["item_ids"]),
        spec=spec,
        rep_index=payload["rep_index"],
        dropped_sparse=payload["dropped_sparse"],
        dropped_cold=payload["dropped_cold"],
    )
