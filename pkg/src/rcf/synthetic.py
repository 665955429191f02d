"""Synthetic corpora with a planted relation preference per user group.

Every item draws one value per relation type; two items sharing a value under a
type are related by ``<type, value>``. Users are split into one group per type.
A user prefers one value of their group's type and draws most interactions
from the items carrying it, the rest uniformly from the catalogue.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

TYPE_NAMES = ("genre", "director", "actor", "composer", "studio")


@dataclass
class SyntheticConfig:
    n_users: int = 200
    n_items: int = 300
    n_types: int = 3
    values_per_type: tuple = (10, 15, 20)
    min_interactions: int = 6
    max_interactions: int = 10
    planted_prob: float = 0.9
    seed: int = 0


@dataclass
class SyntheticData:
    interactions: list = field(default_factory=list)  # (user, item, timestamp) labels
    relations: list = field(default_factory=list)  # (itemA, itemB, type, value) labels
    ground_truth: dict = field(default_factory=dict)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"interactions": out / "interactions.tsv", "relations": out / "relations.tsv",
                 "ground_truth": out / "ground_truth.json"}
        with open(paths["interactions"], "w", encoding="utf-8", newline="\n") as fh:
            for u, i, ts in self.interactions:
                fh.write(f"{u}\t{i}\t{ts}\n")
        with open(paths["relations"], "w", encoding="utf-8", newline="\n") as fh:
            for a, b, t, v in self.relations:
                fh.write(f"{a}\t{b}\t{t}\t{v}\n")
        with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
            json.dump(self.ground_truth, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return paths


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticData:
    if len(cfg.values_per_type) != cfg.n_types:
        raise ValueError("values_per_type needs one entry per type")
    rng = np.random.default_rng(cfg.seed)
    type_names = [TYPE_NAMES[t] if t < len(TYPE_NAMES) else f"type{t}" for t in range(cfg.n_types)]
    item_label = [f"item{i:04d}" for i in range(cfg.n_items)]
    attrs = np.stack([rng.integers(0, n, size=cfg.n_items) for n in cfg.values_per_type], axis=1)

    def value_label(t, v):
        return f"{type_names[t]}:{v}"

    relations = []
    for t in range(cfg.n_types):
        for v in range(cfg.values_per_type[t]):
            members = np.flatnonzero(attrs[:, t] == v)
            for a, b in combinations(members.tolist(), 2):
                relations.append((item_label[a], item_label[b], type_names[t], value_label(t, v)))

    interactions = []
    users = {}
    ts = 0
    for u in range(cfg.n_users):
        t = u % cfg.n_types
        v = int(rng.integers(0, cfg.values_per_type[t]))
        pool = np.flatnonzero(attrs[:, t] == v)
        n = int(rng.integers(cfg.min_interactions, cfg.max_interactions + 1))
        chosen: list[int] = []
        taken = set()
        while len(chosen) < n:
            if rng.random() < cfg.planted_prob and len(taken.intersection(pool.tolist())) < len(pool):
                cand = int(rng.choice(pool))
            else:
                cand = int(rng.integers(0, cfg.n_items))
            if cand not in taken:
                taken.add(cand)
                chosen.append(cand)
        label = f"user{u:04d}"
        for i in chosen:
            interactions.append((label, item_label[i], ts))
            ts += 1
        users[label] = {"group": t, "type": type_names[t], "value": value_label(t, v)}
    gt = {"config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
          "types": type_names, "users": users}
    return SyntheticData(interactions, relations, gt)
