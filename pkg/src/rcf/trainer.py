"""Joint training loop: one recommendation and one relation mini-batch per step.

Each step minimises ``L_rec + gamma * L_rel`` with Adagrad and then projects the
updated embedding rows back into the unit ball.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rcf import autodiff as ad
from rcf.corpus import Corpus, sample_rec_batch, sample_rel_batch
from rcf.evaluation import evaluate
from rcf.model import RcfConfig, rec_loss
from rcf.params import (ParamStore, adagrad_step, init_params, max_row_norm, project_unit_ball,
                        save_checkpoint, touched_rows)
from rcf.relation import rel_loss

logger = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 512
    gamma: float = 0.01
    epochs: int = 50
    eval_every: int = 1
    patience: int = 10
    seed: int = 0
    deterministic: bool = True
    eps: float = 1e-8
    eval_mode: str | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def records(self):
        for rec in self.steps:
            yield {"kind": "step", **rec}
        for rec in self.epochs:
            yield {"kind": "epoch", **rec}

    def write_ndjson(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    store: ParamStore
    log: TrainLog
    best_epoch: int
    best_valid: dict


def epoch_size(corpus: Corpus, batch_size: int) -> int:
    return max(1, math.ceil(corpus.interactions.n_train / batch_size))


def make_params(corpus: Corpus, config: RcfConfig, seed: int, dtype=np.float32) -> ParamStore:
    return init_params(corpus.n_users, corpus.n_items, corpus.relations.n_types,
                       corpus.relations.n_values, config.d, config.f, config.mlp_hidden, seed, dtype)


def _rngs(seed: int):
    rec, rel, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(rec), np.random.default_rng(rel), np.random.default_rng(drop)


def train_step(store: ParamStore, corpus: Corpus, config: RcfConfig, tc: TrainConfig,
               rec_rng, rel_rng, drop_rng, step: int = 0) -> dict:
    """One optimisation step; returns the logged losses."""
    rec_batch = sample_rec_batch(corpus, tc.batch_size, rec_rng)
    rel_batch = (sample_rel_batch(corpus, tc.batch_size, rel_rng)
                 if corpus.relations.n_triplets else None)
    l_rec = rec_loss(store, corpus, rec_batch, config, training=True, rng=drop_rng)
    total = l_rec
    l_rel_val = 0.0
    if rel_batch is not None:
        l_rel = rel_loss(store, rel_batch)
        l_rel_val = float(l_rel.value)
        if tc.gamma > 0:
            total = ad.add(l_rec, ad.scale(l_rel, tc.gamma))
    loss = float(total.value)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step} (L_rec={float(l_rec.value)}, L_rel={l_rel_val})")
    ad.backward(total)
    norms = store.grad_norms()
    rows = touched_rows(store)
    adagrad_step(store, tc.lr, tc.eps)
    shrunk = project_unit_ball(store, rows)
    if ad.debug_enabled():
        store.check_finite()
    return {
        "step": step,
        "L_rec": float(l_rec.value),
        "L_rel": l_rel_val,
        "L": loss,
        "grad_norm": math.sqrt(sum(v * v for v in norms.values())),
        "grad_norms": {k: float(v) for k, v in norms.items()},
        "projected": shrunk,
    }


def train(corpus: Corpus, store: ParamStore, config: RcfConfig, tc: TrainConfig,
          checkpoint_dir=None, run_config: dict | None = None, on_epoch=None,
          log_steps: bool = True) -> TrainResult:
    """Train until the epoch budget or ``patience`` epochs without validation NDCG@10 gain.

    The returned store holds the parameters of the best validation epoch.
    """
    rec_rng, rel_rng, drop_rng = _rngs(tc.seed)
    log = TrainLog()
    n_steps = epoch_size(corpus, tc.batch_size)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def validate(epoch):
        rep = evaluate(corpus, store, config, "valid", tc.eval_mode, seed=tc.seed)
        return rep.summary

    best = validate(0)
    best_epoch, best_store, stale = 0, store.copy(), 0
    log.epochs.append({"epoch": 0, "valid": best, "projected": 0, "wall": 0.0,
                       "max_row_norm": max_row_norm(store)})
    if on_epoch:
        on_epoch(log.epochs[-1])
    start = time.perf_counter()
    step = 0
    for epoch in range(1, tc.epochs + 1):
        projected = 0
        losses = []
        for _ in range(n_steps):
            rec = train_step(store, corpus, config, tc, rec_rng, rel_rng, drop_rng, step)
            projected += rec["projected"]
            losses.append(rec["L"])
            if log_steps:
                log.steps.append(rec)
            step += 1
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "projected": projected,
                  "max_row_norm": max_row_norm(store)}
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            summary = validate(epoch)
            record["valid"] = summary
            if summary["NDCG@10"] > best["NDCG@10"]:
                best, best_epoch, best_store, stale = summary, epoch, store.copy(), 0
                if ckpt_dir:
                    save_checkpoint(store, ckpt_dir / "best.rcf", run_config, tc.seed, epoch)
            else:
                stale += tc.eval_every
            if ckpt_dir:
                save_checkpoint(store, ckpt_dir / f"epoch{epoch:04d}.rcf", run_config, tc.seed, epoch)
        if not tc.deterministic:
            record["wall"] = time.perf_counter() - start
        log.epochs.append(record)
        if on_epoch:
            on_epoch(record)
        if stale >= tc.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    return TrainResult(best_store, log, best_epoch, best)


def as_dict(tc: TrainConfig) -> dict:
    return asdict(tc)
