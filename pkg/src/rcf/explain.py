"""Attention read-outs for recommendations: per-user type weights, top entries, sentences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rcf.corpus import Corpus
from rcf.model import RcfConfig, predict, score_pairs, type_attention

TEMPLATE = "{item} is recommended to you because it shares the {type} {value} with {history}, which you interacted with before."
LATENT_TEMPLATE = "{item} is recommended to you because people who interacted with {history} also liked it."


class ExplainError(ValueError):
    pass


@dataclass
class ExplanationRecord:
    user: str
    item: str
    score: float
    alpha: dict[str, float]
    entries: list[dict] = field(default_factory=list)  # sorted by beta, descending
    sentence: str = ""

    def to_json(self) -> dict:
        return {"user": self.user, "item": self.item, "score": self.score, "alpha": self.alpha,
                "entries": self.entries, "sentence": self.sentence}


def render_sentence(item: str, entry: dict | None) -> str:
    if entry is None:
        return f"{item} is recommended to you."
    if entry["type"] is None or entry["value"] is None or entry["latent"]:
        return LATENT_TEMPLATE.format(item=item, history=entry["historyItem"])
    return TEMPLATE.format(item=item, type=entry["type"], value=entry["value"], history=entry["historyItem"])


def top_items(u: int, store, corpus: Corpus, config: RcfConfig, k: int) -> list[tuple[int, float]]:
    """Highest-scoring items outside the user's training history (ties by index)."""
    cand = np.flatnonzero(~np.isin(np.arange(corpus.n_items), corpus.interactions.train_items(u)))
    scores = score_pairs(store, corpus, np.full(len(cand), u), cand, config)
    order = np.lexsort((cand, -scores.astype(np.float64)))[:k]
    return [(int(cand[o]), float(scores[o])) for o in order]


def explain_pair(u: int, i: int, store, corpus: Corpus, config: RcfConfig, top_m: int = 5) -> ExplanationRecord:
    rel = corpus.relations
    pred = predict(u, i, store, corpus, config)
    type_labels = rel.types.labels
    if pred.first_level is not None:
        alpha = {type_labels[t]: float(a) for t, a in enumerate(pred.first_level)}
        weight = pred.first_level
    else:
        alpha = {}
        weight = None
    entries = []
    for slot, j, v, beta in pred.second_level:
        t = slot if config.has_type_level else None
        entries.append({
            "historyItem": corpus.items.label(j),
            "type": type_labels[t] if t is not None else None,
            "value": rel.values.label(v) if config.mode != "typeOnly" else None,
            "beta": beta,
            "latent": (t == 0) if t is not None else v == 0,
            "_w": beta * (float(weight[slot]) if weight is not None else 1.0),
        })
    entries.sort(key=lambda e: -e["beta"])
    # the sentence cites the entry contributing most to the user embedding
    lead = max(entries, key=lambda e: e["_w"], default=None)
    for e in entries:
        e.pop("_w")
    item = corpus.items.label(i)
    return ExplanationRecord(corpus.users.label(u), item, pred.score, alpha, entries[:top_m],
                             render_sentence(item, lead))


def explain_user(user_label: str, store, corpus: Corpus, config: RcfConfig, top_k: int = 10,
                 top_m: int = 5) -> list[ExplanationRecord]:
    if user_label not in corpus.users:
        raise ExplainError(f"unknown user {user_label!r}")
    u = corpus.users.lookup(user_label)
    return [explain_pair(u, i, store, corpus, config, top_m)
            for i, _ in top_items(u, store, corpus, config, top_k)]


def aggregate_alpha(store, corpus: Corpus, config: RcfConfig) -> dict[str, float]:
    """Corpus-wide mean of ``alpha(u, t)`` per relation type."""
    alpha = type_attention(store, np.arange(corpus.n_users), config)
    if alpha is None:
        raise ExplainError(f"mode {config.mode} has no per-type attention")
    mean = alpha.mean(axis=0)
    return {corpus.relations.types.label(t): float(m) for t, m in enumerate(mean)}
