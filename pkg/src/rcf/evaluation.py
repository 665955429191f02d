"""Leave-one-out top-k evaluation (HR, MRR, NDCG) with pessimistic tie handling."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rcf.corpus import Corpus, CorpusError, rcf_threads
from rcf.model import RcfConfig, score_pairs

KS = (5, 10, 20)
SAMPLED_NEGATIVES = 999
ALL_ITEMS_LIMIT = 10_000


def default_mode(corpus: Corpus) -> str:
    return "all" if corpus.n_items <= ALL_ITEMS_LIMIT else "sampled"


def build_candidates(corpus: Corpus, u: int, held: int, mode: str = "all", n: int = SAMPLED_NEGATIVES,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Candidate items for ranking ``held`` for user ``u``; ``held`` is always first.

    ``all``: every item outside the user's training set. ``sampled``: ``n`` items the
    user never interacted with, drawn uniformly without replacement.
    """
    train = corpus.train_sets[u]
    if mode == "all":
        others = np.array([c for c in range(corpus.n_items) if c not in train and c != held],
                          dtype=np.int64)
        return np.concatenate([[held], others]).astype(np.int64)
    if mode != "sampled":
        raise ValueError(f"unknown candidate mode {mode!r}")
    seen = set(train)
    seen.add(int(corpus.interactions.valid[u]))
    seen.add(int(corpus.interactions.test[u]))
    seen.add(held)
    pool = np.array([c for c in range(corpus.n_items) if c not in seen], dtype=np.int64)
    if n > len(pool):
        raise CorpusError(f"user {u}: only {len(pool)} non-interacted items, cannot sample {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.concatenate([[held], rng.choice(pool, size=n, replace=False)]).astype(np.int64)


def rank_from_scores(held_score: float, other_scores) -> int:
    """``1 + #(others > held) + #(others == held)``: ties count against the held item."""
    other_scores = np.asarray(other_scores)
    return 1 + int(np.count_nonzero(other_scores >= held_score))


def rank_heldout(u: int, held: int, candidates, store, corpus: Corpus, config: RcfConfig) -> int:
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = score_pairs(store, corpus, np.full(len(candidates), u), candidates, config)
    held_mask = candidates == held
    return rank_from_scores(scores[held_mask][0], scores[~held_mask])


def metrics_at_k(rank: int, k: int) -> tuple[float, float, float]:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    if rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / rank, 1.0 / math.log2(rank + 1)


def summarize(ranks, ks=KS) -> dict[str, float]:
    """Mean HR/MRR/NDCG at each k; accumulated in user order."""
    out = {}
    n = max(len(ranks), 1)
    for k in ks:
        hr = mrr = ndcg = 0.0
        for r in ranks:
            h, m, g = metrics_at_k(int(r), k)
            hr += h
            mrr += m
            ndcg += g
        out[f"HR@{k}"] = hr / n
        out[f"MRR@{k}"] = mrr / n
        out[f"NDCG@{k}"] = ndcg / n
    return out


@dataclass
class RankingReport:
    split: str
    mode: str
    seed: int
    users: list[int]
    held: list[int]
    ranks: list[int]
    n_candidates: list[int]
    summary: dict[str, float]
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def to_json(self, user_labels=None, item_labels=None) -> dict:
        per_user = []
        for u, i, r, n in zip(self.users, self.held, self.ranks, self.n_candidates):
            per_user.append({
                "user": user_labels[u] if user_labels else u,
                "item": item_labels[i] if item_labels else i,
                "rank": r,
                "candidates": n,
            })
        return {
            "config": self.config,
            "seed": self.seed,
            "mode": self.mode,
            "split": self.split,
            "checkpoint": self.checkpoint,
            "perUser": per_user,
            "summary": self.summary,
        }

    def dumps(self, **kw) -> str:
        return json.dumps(self.to_json(**kw), indent=1, sort_keys=True) + "\n"


def evaluate(corpus: Corpus, store, config: RcfConfig, split: str = "test", mode: str | None = None,
             seed: int = 0, n_negatives: int = SAMPLED_NEGATIVES, users=None, ks=KS,
             run_config: dict | None = None, checkpoint: str | None = None) -> RankingReport:
    """Rank each user's held-out item (validation or test) among its candidates."""
    if split not in ("valid", "test"):
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    mode = mode or default_mode(corpus)
    held_all = corpus.interactions.valid if split == "valid" else corpus.interactions.test
    users = list(range(corpus.n_users)) if users is None else [int(u) for u in users]
    rng = np.random.default_rng(seed)
    cands = [build_candidates(corpus, u, int(held_all[u]), mode, n_negatives, rng) for u in users]

    def rank_block(block):
        pu = np.concatenate([np.full(len(cands[k]), users[k], dtype=np.int64) for k in block])
        pi = np.concatenate([cands[k] for k in block])
        scores = score_pairs(store, corpus, pu, pi, config)
        out, pos = [], 0
        for k in block:
            s = scores[pos:pos + len(cands[k])]
            out.append(rank_from_scores(s[0], s[1:]))
            pos += len(cands[k])
        return out

    per_block = max(1, 8192 // max(1, int(np.mean([len(c) for c in cands])) if cands else 1))
    blocks = [list(range(a, min(a + per_block, len(users)))) for a in range(0, len(users), per_block)]
    threads = rcf_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(rank_block, blocks))
    else:
        results = [rank_block(b) for b in blocks]
    ranks = [r for block in results for r in block]
    return RankingReport(split, mode, seed, users, [int(held_all[u]) for u in users], ranks,
                         [len(c) for c in cands], summarize(ranks, ks), dict(run_config or {}), checkpoint)
