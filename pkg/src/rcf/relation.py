"""Item-item relation task: relation embeddings ``x_t + z_v`` scored DistMult-style."""
from __future__ import annotations

import numpy as np

from rcf import autodiff as ad


def relation_embedding(t, v, store) -> np.ndarray:
    return store["X"][t] + store["Z"][v]


def distmult_score(q_i, r, q_j) -> np.ndarray:
    """``sum_k q_i[k] r[k] q_j[k]`` along the last axis.

    ``q_i * q_j`` is formed first so swapping the items gives bitwise-equal results.
    """
    return np.sum((np.asarray(q_i) * np.asarray(q_j)) * np.asarray(r), axis=-1)


def _score_node(qa: ad.Node, r: ad.Node, qb: ad.Node) -> ad.Node:
    return ad.sum_(ad.mul(ad.mul(qa, qb), r), axis=1)


def rel_loss(store, batch: np.ndarray) -> ad.Node:
    """Mean of ``-ln sigma(f(i, r, j) - f(i, r, j_neg))`` over ``(i, t, v, j, j_neg)`` rows."""
    batch = np.asarray(batch, dtype=np.int64)
    Q, X, Z = (ad.param(store, n) for n in ("Q", "X", "Z"))
    r = ad.add(ad.take_rows(X, batch[:, 1]), ad.take_rows(Z, batch[:, 2]))
    qi = ad.take_rows(Q, batch[:, 0])
    pos = _score_node(qi, r, ad.take_rows(Q, batch[:, 3]))
    neg = _score_node(qi, r, ad.take_rows(Q, batch[:, 4]))
    return ad.scale(ad.mean(ad.log_sigmoid(ad.sub(pos, neg))), -1.0)


def mean_relation_norm(store, triplets: np.ndarray) -> float:
    """Average ``||x_t + z_v||`` over the distinct relations present in ``triplets``."""
    if not len(triplets):
        return 0.0
    pairs = np.unique(np.asarray(triplets)[:, 1:3], axis=0)
    r = relation_embedding(pairs[:, 0], pairs[:, 1], store).astype(np.float64)
    return float(np.linalg.norm(r, axis=1).mean())
