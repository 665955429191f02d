"""Two-level attention recommender: target-aware user embedding and MLP scoring head.

For a user u and target item i, the user's training history is partitioned by the
relation type linking each history item to i. A first-level softmax weighs the
relation types per user; a smoothed softmax inside each type bucket weighs the
individual ``(history item, value)`` entries. The weighted profiles are added to
the user's own embedding and combined with the target embedding by an MLP.

All batch computations run through :mod:`rcf.autodiff`, so the same forward
pass serves training (with gradients) and inference.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from rcf import autodiff as ad
from rcf.corpus import Corpus, history_entries

MODES = ("full", "single", "typeOnly", "valueOnly")
OVERRIDES = ("none", "avg1", "avg2", "avgBoth")


class ConfigError(ValueError):
    pass


@dataclass
class RcfConfig:
    d: int = 64
    f: int = 32
    rho: float = 0.5
    dropout: float = 0.2
    mlp_hidden: int = 64
    mode: str = "full"
    attn_override: str = "none"

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.attn_override not in OVERRIDES:
            raise ConfigError(f"unknown attention override {self.attn_override!r}")
        if not self.has_type_level and self.attn_override in ("avg1", "avgBoth"):
            raise ConfigError(f"mode {self.mode} has no first-level attention to override")

    @property
    def has_type_level(self) -> bool:
        return self.mode in ("full", "typeOnly")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Layout:
    """Flattened bucket entries for a batch of (user, target) rows.

    Entries are grouped by second-level network (``net``) so each network sees a
    contiguous block; ``seg = row * n_slots + slot`` identifies the bucket.
    """

    users: np.ndarray
    items: np.ndarray
    n_slots: int
    row: np.ndarray
    slot: np.ndarray
    item: np.ndarray
    value: np.ndarray
    net: np.ndarray
    net_bounds: list = field(default_factory=list)

    @property
    def seg(self) -> np.ndarray:
        return self.row * self.n_slots + self.slot

    @property
    def n_rows(self) -> int:
        return len(self.users)


def reference_entries(corpus: Corpus, u: int, i: int, mode: str):
    """(slot, net, j, v) entries for one (u, i) pair, built from the partition directly."""
    raw = history_entries(corpus, u, i)
    if mode == "full":
        return [(t, t, j, v) for t, j, v in raw]
    if mode == "typeOnly":
        out, seen = [], set()
        for t, j, _ in raw:
            if (t, j) not in seen:
                seen.add((t, j))
                out.append((t, t, j, 0))
        return out
    if mode == "single":
        hist = corpus.history[u]
        return [(0, 0, j, 0) for j in hist[hist != i].tolist()]
    out, seen = [], set()
    for _, j, v in raw:
        if (j, v) not in seen:
            seen.add((j, v))
            out.append((0, 0, j, v))
    return out


def _expand(counts: np.ndarray):
    """For run lengths ``counts``: (owner index, offset within run) per element."""
    owner = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    return owner, np.arange(len(owner)) - starts[owner]


def build_layout(corpus: Corpus, users, items, config: RcfConfig) -> Layout:
    """Vectorized equivalent of :func:`reference_entries` over a batch of pairs.

    Modes: ``full`` keeps every (j, t, v); ``typeOnly`` keeps one entry per (t, j)
    with no value; ``single`` puts every history item once in the latent bucket;
    ``valueOnly`` keeps one entry per distinct (j, v) in a single flat bucket.
    """
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    rel = corpus.relations
    n_slots = rel.n_types if config.has_type_level else 1

    # (row, history item) pairs, target excluded
    hist_len = np.diff(corpus.history_ptr)[users]
    row, off = _expand(hist_len)
    j = corpus.history_flat[corpus.history_ptr[users][row] + off]
    keep = j != items[row]
    row, j = row[keep], j[keep]

    if config.mode == "single":
        slot = np.zeros_like(row)
        lay = Layout(users, items, n_slots, row, slot, j, slot.copy(), slot.copy())
        lay.net_bounds = [(0, 0, len(row))] if len(row) else []
        return lay

    keys = items[row] * corpus.n_items + j
    if len(rel.pair_keys):
        pos = np.minimum(np.searchsorted(rel.pair_keys, keys), len(rel.pair_keys) - 1)
        found = rel.pair_keys[pos] == keys
        n_rel = np.where(found, rel.pair_ptr[pos + 1] - rel.pair_ptr[pos], 0)
    else:
        pos = np.zeros(len(keys), dtype=np.int64)
        found = np.zeros(len(keys), dtype=bool)
        n_rel = np.zeros(len(keys), dtype=np.int64)
    pair, k = _expand(np.maximum(n_rel, 1))
    explicit = found[pair]
    # latent entries read the trailing sentinel (type 0, value 0)
    src = np.where(explicit, rel.pair_ptr[pos[pair]] + k, len(rel.pair_type))
    t = np.append(rel.pair_type, 0)[src]
    v = np.append(rel.pair_value, 0)[src]
    e_row, e_j = row[pair], j[pair]

    if config.mode == "typeOnly":
        first = np.r_[True, (pair[1:] != pair[:-1]) | (t[1:] != t[:-1])]
        e_row, e_j, t = e_row[first], e_j[first], t[first]
        v = np.zeros_like(t)
    elif config.mode == "valueOnly":
        _, first = np.unique(pair * rel.n_values + v, return_index=True)
        first = np.sort(first)
        e_row, e_j, v = e_row[first], e_j[first], v[first]
        t = np.zeros_like(v)

    slot = t if config.has_type_level else np.zeros_like(t)
    net = slot
    order = np.argsort(net, kind="stable")
    lay = Layout(users, items, n_slots, e_row[order], slot[order], e_j[order], v[order], net[order])
    if len(lay.net):
        change = np.flatnonzero(np.diff(lay.net)) + 1
        starts = np.concatenate([[0], change])
        stops = np.concatenate([change, [len(lay.net)]])
        lay.net_bounds = [(int(lay.net[a]), int(a), int(b)) for a, b in zip(starts, stops)]
    return lay


@dataclass
class Forward:
    scores: ad.Node
    alpha: np.ndarray | None
    beta: np.ndarray
    layout: Layout


def _dropout(x: ad.Node, rate: float, rng) -> ad.Node:
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype)
    return ad.mul(x, ad.const(keep / x.value.dtype.type(1 - rate)))


def forward(store, layout: Layout, config: RcfConfig, training: bool = False, rng=None) -> Forward:
    """Scores for every row of ``layout`` plus the attention weights used."""
    dt = store.dtype
    B, S = layout.n_rows, layout.n_slots
    P, Q, X, Z = (ad.param(store, n) for n in ("P", "Q", "X", "Z"))
    pu = ad.take_rows(P, layout.users)
    qi = ad.take_rows(Q, layout.items)
    d = pu.shape[1]

    alpha = None
    if config.has_type_level:
        if config.attn_override in ("avg1", "avgBoth"):
            alpha = ad.const(np.full((B, S), 1.0 / S, dtype=dt))
        else:
            W1, b1, h1 = (ad.param(store, n) for n in ("W1", "b1", "h1"))
            inter = ad.mul(ad.reshape(pu, (B, 1, d)), ad.reshape(X, (1, S, d)))
            hid = ad.relu(ad.add(ad.matmul(ad.reshape(inter, (B * S, d)), ad.transpose(W1)), b1))
            alpha = ad.softmax(ad.reshape(ad.matmul(hid, h1), (B, S)), axis=1)

    seg = layout.seg
    n_seg = B * S
    if len(seg):
        qj = ad.take_rows(Q, layout.item)
        if config.attn_override in ("avg2", "avgBoth"):
            counts = np.bincount(seg, minlength=n_seg)
            beta = ad.const((1.0 / counts[seg]).astype(dt))
        else:
            beta = ad.smoothed_softmax(_second_level_scores(store, layout, config, qi, Q, Z),
                                       seg, n_seg, config.rho)
        weighted = ad.mul(ad.reshape(beta, (-1, 1)), qj)
        profiles = ad.segment_sum(weighted, seg, n_seg)
        if alpha is not None:
            mix = ad.sum_(ad.mul(ad.reshape(alpha, (B, S, 1)), ad.reshape(profiles, (B, S, d))), axis=1)
        else:
            mix = profiles
        m = ad.add(pu, mix)
        beta_val = beta.value
    else:
        m = pu
        beta_val = np.empty(0, dtype=dt)

    x = ad.mul(m, qi)
    if training and config.dropout > 0:
        x = _dropout(x, config.dropout, rng)
    Wm, bm, wout, bout = (ad.param(store, n) for n in ("Wm", "bm", "wout", "bout"))
    h = ad.relu(ad.add(ad.matmul(x, ad.transpose(Wm)), bm))
    if training and config.dropout > 0:
        h = _dropout(h, config.dropout, rng)
    y = ad.add(ad.matmul(h, wout), bout)
    return Forward(y, None if alpha is None else alpha.value, beta_val, layout)


def _second_level_scores(store, layout: Layout, config: RcfConfig, qi, Q, Z) -> ad.Node:
    """``h2t . relu(W2t [q_i; q_j; z_v] + b2t)`` per entry, one block per network t.

    The concatenated product is evaluated blockwise (``W2t`` split into its three
    column blocks), which is algebraically identical and avoids materialising
    the E x 3d input.
    """
    W2, b2, h2 = (ad.param(store, n) for n in ("W2", "b2", "h2"))
    d = qi.shape[1]
    use_value = config.mode in ("full", "valueOnly", "single")
    blocks = []
    for t, a, b in layout.net_bounds:
        W = ad.getitem(W2, t)
        pre = ad.add(ad.take_rows(ad.matmul(qi, ad.transpose(ad.getitem(W, (slice(None), slice(0, d))))),
                                  layout.row[a:b]),
                     ad.take_rows(ad.matmul(Q, ad.transpose(ad.getitem(W, (slice(None), slice(d, 2 * d))))),
                                  layout.item[a:b]))
        if use_value:
            zpart = ad.matmul(Z, ad.transpose(ad.getitem(W, (slice(None), slice(2 * d, 3 * d)))))
            pre = ad.add(pre, ad.take_rows(zpart, layout.value[a:b]))
        hid = ad.relu(ad.add(pre, ad.getitem(b2, t)))
        blocks.append(ad.matmul(hid, ad.getitem(h2, t)))
    return blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)


def score_pairs(store, corpus: Corpus, users, items, config: RcfConfig, chunk: int = 4096) -> np.ndarray:
    """Evaluation-mode scores for aligned (user, item) arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    out = np.empty(len(users), dtype=store.dtype)
    for a in range(0, len(users), chunk):
        lay = build_layout(corpus, users[a:a + chunk], items[a:a + chunk], config)
        out[a:a + chunk] = forward(store, lay, config).scores.value
    return out


def rec_loss(store, corpus: Corpus, batch: np.ndarray, config: RcfConfig, training: bool = True,
             rng=None) -> ad.Node:
    """Mean BPR loss ``-ln sigma(y_ui - y_uk)`` over ``(u, i, k)`` rows."""
    batch = np.asarray(batch, dtype=np.int64)
    n = len(batch)
    users = np.concatenate([batch[:, 0], batch[:, 0]])
    items = np.concatenate([batch[:, 1], batch[:, 2]])
    fw = forward(store, build_layout(corpus, users, items, config), config, training, rng)
    diff = ad.sub(ad.getitem(fw.scores, slice(0, n)), ad.getitem(fw.scores, slice(n, 2 * n)))
    return ad.scale(ad.mean(ad.log_sigmoid(diff)), -1.0)


# --------------------------------------------------------------------------- single-pair API

@dataclass
class Prediction:
    score: float
    first_level: np.ndarray | None
    second_level: list = field(default_factory=list)  # (type, history item, value, beta)


def predict(u: int, i: int, store, corpus: Corpus, config: RcfConfig, training: bool = False,
            rng=None) -> Prediction:
    lay = build_layout(corpus, [u], [i], config)
    fw = forward(store, lay, config, training, rng)
    entries = [(int(s), int(j), int(v), float(b))
               for s, j, v, b in zip(lay.slot, lay.item, lay.value, fw.beta)]
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    alpha = None if fw.alpha is None else fw.alpha[0]
    return Prediction(float(fw.scores.value[0]), alpha, entries)


def user_embedding(u: int, i: int, store, corpus: Corpus, config: RcfConfig) -> np.ndarray:
    """Target-aware user embedding ``m_{u,i}`` (evaluation mode)."""
    lay = build_layout(corpus, [u], [i], config)
    d = store["P"].shape[1]
    pu = store["P"][u].astype(np.float64)
    if not len(lay.item):
        return pu
    fw = forward(store, lay, config)
    profiles = np.zeros((lay.n_slots, d))
    np.add.at(profiles, lay.slot, fw.beta[:, None] * store["Q"][lay.item])
    if fw.alpha is None:
        return pu + profiles[0]
    return pu + fw.alpha[0] @ profiles


def first_level_score(p_u, x_t, W1, b1, h1) -> float:
    return float(h1 @ np.maximum(W1 @ (p_u * x_t) + b1, 0))


def first_level_weights(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def second_level_score(q_i, q_j, z_v, W2t, b2t, h2t) -> float:
    return float(h2t @ np.maximum(W2t @ np.concatenate([q_i, q_j, z_v]) + b2t, 0))


def second_level_weights(scores, rho: float) -> np.ndarray:
    b = np.asarray(scores, dtype=np.float64)
    if not len(b):
        return b
    mx = b.max()
    lse = mx + np.log(np.exp(b - mx).sum())
    return np.exp(b - rho * lse)


def type_profile(q_entries, beta) -> np.ndarray:
    q_entries = np.asarray(q_entries, dtype=np.float64)
    if not len(q_entries):
        return np.zeros(q_entries.shape[1] if q_entries.ndim == 2 else 0)
    return np.asarray(beta) @ q_entries


def type_attention(store, users, config: RcfConfig) -> np.ndarray | None:
    """First-level weights ``alpha(u, .)`` for each user; they do not depend on the target item."""
    if not config.has_type_level:
        return None
    users = np.asarray(users, dtype=np.int64)
    n_types = store["X"].shape[0]
    if config.attn_override in ("avg1", "avgBoth"):
        return np.full((len(users), n_types), 1.0 / n_types)
    pu = store["P"][users].astype(np.float64)
    inter = pu[:, None, :] * store["X"].astype(np.float64)[None]
    hid = np.maximum(inter @ store["W1"].T.astype(np.float64) + store["b1"], 0)
    s = hid @ store["h1"].astype(np.float64)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
