"""Interaction and item-relation data: ingestion, splits, history partitions and samplers.

Users and items arrive as string ids in header-less TSV files and are mapped to
dense indices in first-seen order. Relations between items are undirected and
carry a two-level label ``<type, value>``. Index 0 of both the type and the value
vocabulary is reserved for the latent relation that groups history items with no
explicit relation to the target item; it never appears in the triplet list.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

LATENT_TYPE = "<t0>"
LATENT_VALUE = "<v0>"
MIN_USER_ITEMS = 3
NEG_SAMPLE_CAP = 100


class CorpusError(ValueError):
    """Malformed or unusable input data."""


class Vocab:
    """Bijective label <-> dense index map, indices assigned in first-seen order."""

    def __init__(self, labels=()):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self.index.get(label)
        if idx is None:
            idx = len(self.labels)
            self.index[label] = idx
            self.labels.append(label)
        return idx

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return label in self.index

    @property
    def size(self) -> int:
        return len(self.labels)

    def lookup(self, label: str) -> int:
        return self.index[label]

    def label(self, idx: int) -> str:
        return self.labels[idx]

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, label in enumerate(self.labels):
                fh.write(f"{i}\t{label}\n")


@dataclass
class InteractionSet:
    """Per-user leave-two-out split of the (deduplicated, binarized) interactions.

    ``train[u]`` keeps chronological order when timestamps exist, file order otherwise.
    """

    train: list[np.ndarray]
    valid: np.ndarray
    test: np.ndarray
    train_ts: list[np.ndarray] | None = None
    valid_ts: np.ndarray | None = None
    test_ts: np.ndarray | None = None

    @property
    def n_users(self) -> int:
        return len(self.train)

    def train_items(self, u: int) -> np.ndarray:
        return self.train[u]

    def valid_item(self, u: int) -> int:
        return int(self.valid[u])

    def test_item(self, u: int) -> int:
        return int(self.test[u])

    @property
    def n_train(self) -> int:
        return int(sum(len(t) for t in self.train))

    @property
    def n_interactions(self) -> int:
        return self.n_train + 2 * self.n_users


@dataclass
class RelationIndex:
    """Symmetric item-item relation store.

    ``by_item_type[i][t][j]`` is the sorted tuple of value indices shared by i and j
    under type t. ``triplets`` rows are ``(i, t, v, j)`` with ``i < j``, stored once.
    """

    types: Vocab
    values: Vocab
    n_items: int
    triplets: np.ndarray
    by_item_type: list[dict[int, dict[int, tuple[int, ...]]]] = field(repr=False, default=None)
    pair_relations: list[dict[int, tuple[tuple[int, int], ...]]] = field(repr=False, default=None)

    def __post_init__(self):
        if self.by_item_type is None:
            self._build_lookups()

    def _build_lookups(self) -> None:
        by_type: list[dict] = [dict() for _ in range(self.n_items)]
        for i, t, v, j in self.triplets.tolist():
            for a, b in ((i, j), (j, i)):
                by_type[a].setdefault(t, {}).setdefault(b, set()).add(v)
        self.by_item_type = [
            {t: {j: tuple(sorted(vs)) for j, vs in sorted(m.items())} for t, m in sorted(d.items())}
            for d in by_type
        ]
        pairs: list[dict] = []
        for d in self.by_item_type:
            per_j: dict[int, list] = {}
            for t, m in d.items():
                for j, vs in m.items():
                    per_j.setdefault(j, []).extend((t, v) for v in vs)
            pairs.append({j: tuple(sorted(tv)) for j, tv in sorted(per_j.items())})
        self.pair_relations = pairs
        # CSR over directed pairs: key i * n_items + j -> rows of (t, v), sorted by (t, v)
        keys, ts, vs, counts = [], [], [], []
        for i, d in enumerate(pairs):
            for j, tv in d.items():
                keys.append(i * self.n_items + j)
                counts.append(len(tv))
                for t, v in tv:
                    ts.append(t)
                    vs.append(v)
        self.pair_keys = np.array(keys, dtype=np.int64)
        self.pair_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.pair_type = np.array(ts, dtype=np.int64)
        self.pair_value = np.array(vs, dtype=np.int64)
        # directed (i, t, v, j) keys for O(log n) negative checks
        if len(self.triplets):
            i, t, v, j = self.triplets.T.astype(np.int64)
            keys = np.concatenate([self._key(i, t, v, j), self._key(j, t, v, i)])
            self._keys = np.unique(keys)
        else:
            self._keys = np.empty(0, dtype=np.int64)

    def _key(self, i, t, v, j):
        n_t, n_v, n_i = len(self.types), len(self.values), self.n_items
        return ((np.asarray(i, np.int64) * n_t + t) * n_v + v) * n_i + j

    def holds(self, i, t, v, j) -> np.ndarray:
        """Vectorized indicator I_<t,v>(i, j)."""
        keys = self._key(i, t, v, j)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        if not len(self._keys):
            return np.zeros(np.shape(keys), dtype=bool)
        return self._keys[pos] == keys

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def n_values(self) -> int:
        return len(self.values)

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)

    @classmethod
    def empty(cls, n_items: int) -> "RelationIndex":
        return cls(Vocab([LATENT_TYPE]), Vocab([LATENT_VALUE]), n_items, np.empty((0, 4), dtype=np.int64))


@dataclass
class HistoryPartition:
    """History items of a user grouped by their relation type to a target item.

    ``buckets[t]`` lists ``(j, v)`` entries; bucket 0 holds ``(j, 0)`` for every
    history item without an explicit relation to the target.
    """

    buckets: dict[int, list[tuple[int, int]]]

    def items(self) -> set[int]:
        return {j for entries in self.buckets.values() for j, _ in entries}


class Corpus:
    """Immutable bundle of vocabularies, interaction splits and the relation index."""

    def __init__(self, users: Vocab, items: Vocab, interactions: InteractionSet,
                 relations: RelationIndex | None = None, stats: dict | None = None):
        self.users = users
        self.items = items
        self.interactions = interactions
        self.relations = relations if relations is not None else RelationIndex.empty(len(items))
        if self.relations.n_items != len(items):
            raise CorpusError("relation index and item vocabulary disagree on item count")
        self.stats = dict(stats or {})
        train = interactions.train
        self.train_sets = [frozenset(map(int, t)) for t in train]
        self.train_users = np.repeat(np.arange(len(train), dtype=np.int64), [len(t) for t in train])
        self.train_items = (np.concatenate(train).astype(np.int64) if train
                            else np.empty(0, dtype=np.int64))
        self._train_keys = np.sort(self.train_users * len(items) + self.train_items)
        # sorted history per user: the summation order inside buckets follows it
        self.history = [np.sort(t.astype(np.int64)) for t in train]
        self.history_ptr = np.concatenate([[0], np.cumsum([len(h) for h in self.history])]).astype(np.int64)
        self.history_flat = (np.concatenate(self.history) if self.history
                             else np.empty(0, dtype=np.int64))

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def is_train(self, users, items) -> np.ndarray:
        keys = np.asarray(users, np.int64) * self.n_items + np.asarray(items, np.int64)
        pos = np.minimum(np.searchsorted(self._train_keys, keys), len(self._train_keys) - 1)
        return self._train_keys[pos] == keys

    def summary(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.interactions.n_interactions,
            "types": self.relations.n_types,
            "values": self.relations.n_values - 1,
            "triplets": self.relations.n_triplets,
        }

    def with_relations(self, relations: RelationIndex) -> "Corpus":
        return Corpus(self.users, self.items, self.interactions, relations, self.stats)


# --------------------------------------------------------------------------- ingestion

def _read_tsv(path, expected: tuple[int, ...], what: str):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in expected or any(not p for p in parts):
                raise CorpusError(f"{path}:{lineno}: malformed {what} line "
                                  f"(expected {' or '.join(map(str, expected))} tab-separated fields)")
            yield lineno, parts


def ingest_interactions(path, has_timestamps: bool | None = None, seed: int = 0):
    """Read ``user\\titem[\\ttimestamp]`` lines into an InteractionSet and two vocabularies.

    Duplicate (user, item) pairs collapse to one, keeping the earliest timestamp.
    Users left with fewer than three distinct items are dropped. With timestamps the
    two latest interactions become validation and test; without, two are held out
    at random using ``seed``.
    """
    expected = (3,) if has_timestamps else ((2,) if has_timestamps is False else (2, 3))
    per_user: dict[str, dict[str, tuple[int, int]]] = {}
    seen_ts = None
    order = 0
    for lineno, parts in _read_tsv(path, expected, "interaction"):
        with_ts = len(parts) == 3
        if seen_ts is None:
            seen_ts = with_ts
        elif seen_ts != with_ts:
            raise CorpusError(f"{path}:{lineno}: inconsistent column count")
        ts = 0
        if with_ts:
            try:
                ts = int(parts[2])
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: timestamp is not an integer: {parts[2]!r}") from None
        items = per_user.setdefault(parts[0], {})
        prev = items.get(parts[1])
        if prev is None or ts < prev[0]:
            items[parts[1]] = (ts, prev[1] if prev else order)
        order += 1
    if not per_user:
        raise CorpusError(f"{path}: no interactions")
    timestamps = bool(seen_ts)

    dropped = [u for u, its in per_user.items() if len(its) < MIN_USER_ITEMS]
    if dropped:
        logger.warning("dropped %d users with fewer than %d distinct items", len(dropped), MIN_USER_ITEMS)
    users, items = Vocab(), Vocab()
    kept: list[list[tuple[int, int, int]]] = []
    for u_label, its in per_user.items():
        if len(its) < MIN_USER_ITEMS:
            continue
        users.add(u_label)
        # first-seen item order follows the file (order field), not dict insertion after dedup
        rows = sorted(((order_, ts, label) for label, (ts, order_) in its.items()))
        kept.append([(ts, order_, label) for order_, ts, label in rows])
    if not kept:
        raise CorpusError(f"{path}: no interactions")

    # item indices in first-seen order across the kept lines
    first_seen = sorted((order_, label) for rows in kept for _, order_, label in rows)
    for _, label in first_seen:
        items.add(label)

    rng = np.random.default_rng(seed)
    train, valid, test, train_ts, valid_ts, test_ts = [], [], [], [], [], []
    for rows in kept:
        idx = np.array([items.lookup(label) for _, _, label in rows], dtype=np.int64)
        ts = np.array([t for t, _, _ in rows], dtype=np.int64)
        if timestamps:
            perm = np.array(sorted(range(len(rows)), key=lambda k: (rows[k][0], rows[k][1])))
        else:
            held = rng.choice(len(rows), size=2, replace=False)
            rest = np.setdiff1d(np.arange(len(rows)), held)
            perm = np.concatenate([rest, held])
        idx, ts = idx[perm], ts[perm]
        train.append(idx[:-2])
        valid.append(idx[-2])
        test.append(idx[-1])
        train_ts.append(ts[:-2])
        valid_ts.append(ts[-2])
        test_ts.append(ts[-1])
    inter = InteractionSet(train, np.array(valid, dtype=np.int64), np.array(test, dtype=np.int64))
    if timestamps:
        inter.train_ts = train_ts
        inter.valid_ts = np.array(valid_ts, dtype=np.int64)
        inter.test_ts = np.array(test_ts, dtype=np.int64)
    stats = {"dropped_users": len(dropped), "has_timestamps": timestamps}
    return inter, users, items, stats


def ingest_relations(path, item_vocab: Vocab) -> RelationIndex:
    """Read ``itemA\\titemB\\ttype\\tvalue`` lines into a symmetric RelationIndex.

    Lines naming unknown items or relating an item to itself are skipped with a
    warning count; exact duplicates (in either orientation) are stored once.
    """
    types, values = Vocab([LATENT_TYPE]), Vocab([LATENT_VALUE])
    seen: set[tuple[int, int, int, int]] = set()
    rows: list[tuple[int, int, int, int]] = []
    unknown = self_rel = 0
    for lineno, (a, b, t_label, v_label) in _read_tsv(path, (4,), "relation"):
        if t_label == LATENT_TYPE or v_label == LATENT_VALUE:
            raise CorpusError(f"{path}:{lineno}: reserved latent label used as data")
        if a not in item_vocab or b not in item_vocab:
            unknown += 1
            continue
        i, j = item_vocab.lookup(a), item_vocab.lookup(b)
        if i == j:
            self_rel += 1
            continue
        t, v = types.add(t_label), values.add(v_label)
        key = (min(i, j), t, v, max(i, j))
        if key not in seen:
            seen.add(key)
            rows.append(key)
    if unknown:
        logger.warning("skipped %d relation lines with unknown items", unknown)
    if self_rel:
        logger.warning("rejected %d self-relation lines", self_rel)
    triplets = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return RelationIndex(types, values, len(item_vocab), triplets)


def load_corpus(interactions_path, relations_path=None, has_timestamps=None, seed: int = 0) -> Corpus:
    inter, users, items, stats = ingest_interactions(interactions_path, has_timestamps, seed)
    if relations_path is None:
        logger.warning("no relation file given: only the latent relation is available")
        rel = RelationIndex.empty(len(items))
    else:
        rel = ingest_relations(relations_path, items)
    return Corpus(users, items, inter, rel, stats)


# --------------------------------------------------------------------------- partitions

def history_entries(corpus: Corpus, u: int, i: int) -> list[tuple[int, int, int]]:
    """Flat ``(t, j, v)`` entries of the partition, ordered by (j, t, v)."""
    related = corpus.relations.pair_relations[i]
    out = []
    for j in corpus.history[u].tolist():
        if j == i:
            continue
        rels = related.get(j)
        if rels:
            out.extend((t, j, v) for t, v in rels)
        else:
            out.append((0, j, 0))
    return out


def partition_history(u: int, i: int, corpus: Corpus) -> HistoryPartition:
    buckets: dict[int, list[tuple[int, int]]] = {}
    for t, j, v in history_entries(corpus, u, i):
        buckets.setdefault(t, []).append((j, v))
    for entries in buckets.values():
        entries.sort()
    return HistoryPartition(dict(sorted(buckets.items())))


# --------------------------------------------------------------------------- samplers

def sample_rec_batch(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """``(u, i, k)`` rows: (u, i) uniform over training interactions, k a non-interacted item."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_items = corpus.n_items
    full = np.array([len(s) >= n_items for s in corpus.train_sets])
    eligible = np.flatnonzero(~full[corpus.train_users])
    if not len(eligible):
        raise CorpusError("no user has a non-interacted item to sample as negative")
    pick = eligible[rng.integers(0, len(eligible), size=batch_size)]
    users, items = corpus.train_users[pick], corpus.train_items[pick]
    neg = rng.integers(0, n_items, size=batch_size)
    bad = corpus.is_train(users, neg)
    while bad.any():
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = corpus.is_train(users, neg)
    return np.stack([users, items, neg], axis=1)


def sample_rel_batch(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """``(i, t, v, j, j_neg)`` rows with (i, t, v, j) uniform over triplets in a random orientation.

    ``j_neg`` is uniform over items not related to i by exactly ``<t, v>`` (and not i),
    rejection-sampled with a per-positive cap; a capped positive is replaced.
    """
    rel = corpus.relations
    n = rel.n_triplets
    if n == 0:
        raise CorpusError("relation index has no triplets")
    out = np.empty((batch_size, 5), dtype=np.int64)
    exhausted: set[int] = set()

    def draw_positive(size):
        idx = rng.integers(0, n, size=size)
        trip = rel.triplets[idx].copy()
        flip = rng.random(size) < 0.5
        trip[flip, 0], trip[flip, 3] = trip[flip, 3], trip[flip, 0].copy()
        return idx, trip

    idx, trip = draw_positive(batch_size)
    tries = np.zeros(batch_size, dtype=np.int64)
    neg = np.full(batch_size, -1, dtype=np.int64)
    todo = np.arange(batch_size)
    while len(todo):
        cand = rng.integers(0, rel.n_items, size=len(todo))
        i, t, v = trip[todo, 0], trip[todo, 1], trip[todo, 2]
        ok = (cand != i) & ~rel.holds(i, t, v, cand)
        neg[todo[ok]] = cand[ok]
        tries[todo] += 1
        todo = todo[~ok]
        capped = todo[tries[todo] >= NEG_SAMPLE_CAP]
        if len(capped):
            exhausted.update(idx[capped].tolist())
            if len(exhausted) >= n:
                raise CorpusError("relation too dense: no negative found for any triplet")
            idx[capped], trip[capped] = draw_positive(len(capped))
            tries[capped] = 0
    out[:, :4] = trip
    out[:, 4] = neg
    return out


# --------------------------------------------------------------------------- bundle

BUNDLE_FILE = "corpus.npz"


def save_bundle(corpus: Corpus, out_dir) -> Path:
    """Write the corpus as a deterministic npz bundle plus vocab sidecars and a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter = corpus.interactions
    arrays = {
        "user_labels": np.array(corpus.users.labels, dtype=str),
        "item_labels": np.array(corpus.items.labels, dtype=str),
        "type_labels": np.array(corpus.relations.types.labels, dtype=str),
        "value_labels": np.array(corpus.relations.values.labels, dtype=str),
        "train_len": np.array([len(t) for t in inter.train], dtype=np.int64),
        "train_items": corpus.train_items,
        "valid": inter.valid,
        "test": inter.test,
        "triplets": corpus.relations.triplets.astype(np.int64),
    }
    if inter.train_ts is not None:
        arrays["train_ts"] = np.concatenate(inter.train_ts).astype(np.int64)
        arrays["valid_ts"] = inter.valid_ts
        arrays["test_ts"] = inter.test_ts
    path = out / BUNDLE_FILE
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    corpus.users.write_tsv(out / "users.vocab.tsv")
    corpus.items.write_tsv(out / "items.vocab.tsv")
    corpus.relations.types.write_tsv(out / "types.vocab.tsv")
    corpus.relations.values.write_tsv(out / "values.vocab.tsv")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({**corpus.summary(), **corpus.stats}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_bundle(path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / BUNDLE_FILE
    if not path.exists():
        raise CorpusError(f"corpus bundle not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arr = {k: z[k] for k in z.files}
    users, items = Vocab(arr["user_labels"].tolist()), Vocab(arr["item_labels"].tolist())
    bounds = np.cumsum(arr["train_len"])[:-1]
    train = np.split(arr["train_items"], bounds)
    inter = InteractionSet(train, arr["valid"], arr["test"])
    if "train_ts" in arr:
        inter.train_ts = np.split(arr["train_ts"], bounds)
        inter.valid_ts, inter.test_ts = arr["valid_ts"], arr["test_ts"]
    rel = RelationIndex(Vocab(arr["type_labels"].tolist()), Vocab(arr["value_labels"].tolist()),
                        len(items), arr["triplets"].reshape(-1, 4))
    stats = {}
    summary = path.parent / "summary.json"
    if summary.exists():
        with open(summary, encoding="utf-8") as fh:
            stats = {k: v for k, v in json.load(fh).items() if k in ("dropped_users", "has_timestamps")}
    return Corpus(users, items, inter, rel, stats)


def corpus_from_arrays(n_users: int, n_items: int, train: list, valid, test,
                       triplets=(), type_labels=None, value_labels=None) -> Corpus:
    """Build a corpus directly from dense indices (fixtures and the synthetic generator)."""
    triplets = np.array(triplets, dtype=np.int64).reshape(-1, 4)
    if len(triplets):
        swap = triplets[:, 0] > triplets[:, 3]
        triplets[swap, 0], triplets[swap, 3] = triplets[swap, 3], triplets[swap, 0].copy()
        if (triplets[:, 0] == triplets[:, 3]).any():
            raise CorpusError("self-relation in triplets")
        _, first = np.unique(triplets, axis=0, return_index=True)
        triplets = triplets[np.sort(first)]
    n_t = int(triplets[:, 1].max()) + 1 if len(triplets) else 1
    n_v = int(triplets[:, 2].max()) + 1 if len(triplets) else 1
    types = Vocab(type_labels or [LATENT_TYPE] + [f"type{t}" for t in range(1, n_t)])
    values = Vocab(value_labels or [LATENT_VALUE] + [f"value{v}" for v in range(1, n_v)])
    rel = RelationIndex(types, values, n_items, triplets)
    inter = InteractionSet([np.asarray(t, dtype=np.int64) for t in train],
                           np.asarray(valid, dtype=np.int64), np.asarray(test, dtype=np.int64))
    return Corpus(Vocab(f"u{u}" for u in range(n_users)), Vocab(f"i{i}" for i in range(n_items)),
                  inter, rel)


def rcf_threads() -> int:
    try:
        return max(1, int(os.environ.get("RCF_THREADS", "1")))
    except ValueError:
        return 1
