"""Command-line entry point: prepare, train, eval, ablate, sweep-gamma, explain, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from rcf import gradcheck
from rcf.autodiff import NumericalError
from rcf.config import ConfigFileError, RunConfig, load_config_file, resolve
from rcf.corpus import CorpusError, load_bundle, load_corpus, save_bundle
from rcf.evaluation import RankingReport, evaluate
from rcf.explain import ExplainError, aggregate_alpha, explain_user
from rcf.model import ConfigError
from rcf.params import CheckpointError, load_checkpoint, save_checkpoint
from rcf.synthetic import SyntheticConfig, generate
from rcf.trainer import TrainingError, make_params, train

logger = logging.getLogger("rcf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = [
    ("full", "none"), ("single", "none"), ("typeOnly", "none"), ("valueOnly", "none"),
    ("full", "avg1"), ("full", "avg2"), ("full", "avgBoth"),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------- config plumbing

FLAG_KEYS = {
    "corpus": str, "embedding_dim": int, "attention_factor": int, "mlp_hidden": int, "rho": float,
    "dropout": float, "mode": str, "attn_override": str, "gamma": float, "lr": float,
    "batch_size": int, "epochs": int, "eval_every": int, "patience": int, "seed": int,
    "eval_mode": str, "n_negatives": int,
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    for key, typ in FLAG_KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)


def _run_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k, None) for k in (*FLAG_KEYS, "deterministic")}
    cfg = resolve(file_values, flags)
    check_conflicts(cfg)
    return cfg


def check_conflicts(cfg: RunConfig) -> None:
    """Reject combinations that cannot run, before any training starts."""
    try:
        cfg.model_config()
        cfg.train_config()
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"config conflict: {exc}") from None
    if cfg.eval_mode not in (None, "all", "sampled"):
        raise UsageError(f"config conflict: eval_mode must be all, sampled or auto, got {cfg.eval_mode!r}")
    for key in ("embedding_dim", "attention_factor", "mlp_hidden", "epochs", "eval_every", "patience",
                "n_negatives"):
        if getattr(cfg, key) < 1:
            raise UsageError(f"config conflict: {key} must be >= 1")


def _corpus(cfg: RunConfig):
    if not cfg.corpus:
        raise UsageError("no corpus given (--corpus or 'corpus =' in the config file)")
    return load_bundle(cfg.corpus)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(summary: dict, keys=("HR@10", "MRR@10", "NDCG@10")) -> str:
    return "  ".join(f"{k} {summary[k]:.4f}" for k in keys)


# --------------------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        syn = SyntheticConfig(n_users=args.users, n_items=args.items, n_types=args.types,
                              values_per_type=tuple(args.values_per_type),
                              min_interactions=args.min_interactions, max_interactions=args.max_interactions,
                              planted_prob=args.planted_prob, seed=args.seed)
        if len(syn.values_per_type) != syn.n_types:
            raise UsageError("--values-per-type needs one count per type")
        paths = generate(syn).write(out / "raw")
        interactions, relations = paths["interactions"], paths["relations"]
        shutil.copyfile(paths["ground_truth"], out / "ground_truth.json")
    else:
        if not args.interactions:
            raise UsageError("prepare needs --interactions or --synthetic")
        interactions, relations = Path(args.interactions), args.relations and Path(args.relations)
        if not interactions.exists():
            raise CorpusError(f"interactions file not found: {interactions}")
        if relations and not relations.exists():
            logger.warning("relations file %s not found; corpus holds only the latent relation", relations)
            relations = None
    timestamps = {"auto": None, "yes": True, "no": False}[args.timestamps]
    corpus = load_corpus(interactions, relations, has_timestamps=timestamps, seed=args.seed)
    save_bundle(corpus, out)
    print(json.dumps(corpus.summary(), sort_keys=True))
    return EXIT_OK


def _train_one(cfg: RunConfig, corpus, out_dir=None, verbose=False):
    model_cfg, tc = cfg.model_config(), cfg.train_config()
    store = make_params(corpus, model_cfg, cfg.seed)

    def on_epoch(rec):
        if verbose and "valid" in rec:
            print(f"epoch {rec['epoch']:3d}  valid {_fmt(rec['valid'])}", flush=True)

    result = train(corpus, store, model_cfg, tc, checkpoint_dir=out_dir, run_config=cfg.to_dict(),
                   on_epoch=on_epoch, log_steps=out_dir is not None)
    return result


def cmd_train(args) -> int:
    cfg = _run_config(args)
    corpus = _corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dumps(), encoding="utf-8")
    result = _train_one(cfg, corpus, out, verbose=True)
    save_checkpoint(result.store, out / "model.rcf", cfg.to_dict(), cfg.seed, result.best_epoch)
    result.log.write_ndjson(out / "train_log.ndjson")
    print(f"best epoch {result.best_epoch}  valid {_fmt(result.best_valid)}")
    print(f"checkpoint {out / 'model.rcf'}")
    return EXIT_OK


def _load_model(checkpoint, corpus_override=None):
    """Checkpoint, its embedded RunConfig, and the matching corpus."""
    path = Path(checkpoint)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    _, trailer = load_checkpoint(path)
    cfg = resolve(trailer.get("config") or {}, {"corpus": corpus_override})
    corpus = _corpus(cfg)
    expected = make_params(corpus, cfg.model_config(), 0).shapes()
    store, _ = load_checkpoint(path, expected)
    return store, cfg, corpus


def cmd_eval(args) -> int:
    store, cfg, corpus = _load_model(args.checkpoint, args.corpus)
    mode = args.eval_mode or cfg.eval_mode
    report = evaluate(corpus, store, cfg.model_config(), args.split, mode, seed=args.seed,
                      n_negatives=args.n_negatives or cfg.n_negatives, run_config=cfg.to_dict(),
                      checkpoint=Path(args.checkpoint).name)
    text = report.dumps(user_labels=corpus.users.labels, item_labels=corpus.items.labels)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"{args.split} ({report.mode}) {_fmt(report.summary, tuple(report.summary))}")
    return EXIT_OK


def _train_and_test(cfg: RunConfig) -> RankingReport:
    corpus = _corpus(cfg)
    result = _train_one(cfg, corpus)
    return evaluate(corpus, result.store, cfg.model_config(), "test", cfg.eval_mode, seed=cfg.seed,
                    n_negatives=cfg.n_negatives, run_config=cfg.to_dict())


def _run_all(configs: list[RunConfig], jobs: int) -> list[RankingReport]:
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_and_test, configs))
    return [_train_and_test(c) for c in configs]


def ablation_rows(reports: list[RankingReport], labels: list[str]) -> list[dict]:
    """Metrics at 10 plus signed percentage change relative to the first (full) row."""
    base = reports[0].summary
    rows = []
    for label, rep in zip(labels, reports):
        row = {"config": label}
        for key in ("HR@10", "MRR@10", "NDCG@10"):
            row[key] = rep.summary[key]
            row[f"dec_{key}"] = (100.0 * (rep.summary[key] - base[key]) / base[key]) if base[key] else 0.0
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    _corpus(cfg)
    configs, labels = [], []
    for mode, override in ABLATIONS:
        configs.append(cfg.replace(mode=mode, attn_override=override))
        labels.append(mode if override == "none" else f"{mode}+{override}")
    for c in configs:
        check_conflicts(c)
    rows = ablation_rows(_run_all(configs, args.jobs), labels)
    print(f"{'config':<16s} {'HR@10':>8s} {'MRR@10':>8s} {'NDCG@10':>8s} {'Dec HR':>8s} {'Dec MRR':>8s} {'Dec NDCG':>9s}")
    for r in rows:
        print(f"{r['config']:<16s} {r['HR@10']:8.4f} {r['MRR@10']:8.4f} {r['NDCG@10']:8.4f} "
              f"{r['dec_HR@10']:+7.1f}% {r['dec_MRR@10']:+7.1f}% {r['dec_NDCG@10']:+8.1f}%")
    if args.out:
        _write_json(args.out, {"config": cfg.to_dict(), "seed": cfg.seed, "rows": rows})
    return EXIT_OK


def cmd_sweep_gamma(args) -> int:
    cfg = _run_config(args)
    _corpus(cfg)
    try:
        gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gammas must be a comma-separated list of numbers, got {args.gammas!r}") from None
    if not gammas or min(gammas) < 0:
        raise UsageError("--gammas needs at least one value, all >= 0")
    reports = _run_all([cfg.replace(gamma=g) for g in gammas], args.jobs)
    series = [{"gamma": g, "MRR@10": r.summary["MRR@10"], "NDCG@10": r.summary["NDCG@10"]}
              for g, r in zip(gammas, reports)]
    print("gamma\tMRR@10\tNDCG@10")
    for s in series:
        print(f"{s['gamma']:g}\t{s['MRR@10']:.4f}\t{s['NDCG@10']:.4f}")
    if args.out:
        _write_json(args.out, {"config": cfg.to_dict(), "seed": cfg.seed, "series": series})
    return EXIT_OK


def cmd_explain(args) -> int:
    store, cfg, corpus = _load_model(args.checkpoint, args.corpus)
    model_cfg = cfg.model_config()
    if args.aggregate:
        payload = {"config": cfg.to_dict(), "seed": cfg.seed,
                   "meanAlpha": aggregate_alpha(store, corpus, model_cfg)}
        for t, a in payload["meanAlpha"].items():
            print(f"{t}\t{a:.4f}")
    else:
        if not args.user:
            raise UsageError("explain needs --user or --aggregate")
        records = explain_user(args.user, store, corpus, model_cfg, args.top_k, args.top_m)
        payload = {"config": cfg.to_dict(), "seed": cfg.seed, "user": args.user,
                   "recommendations": [r.to_json() for r in records]}
        for r in records:
            print(r.sentence)
    if args.out:
        _write_json(args.out, payload)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sizes = dict(d=args.d, f=args.f, n_types=args.types, n_values=args.values, n_items=args.items,
                 n_users=args.users)
    if args.corrupt and args.corrupt not in gradcheck.OPS:
        raise UsageError(f"--corrupt must name a primitive: {', '.join(gradcheck.OPS)}")
    report = gradcheck.run(args.seed, corrupt=args.corrupt, **sizes)
    for line in report.lines():
        print(line)
    if not report.passed:
        print("gradcheck FAILED: " + ", ".join(report.failures))
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rcf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="ingest TSV files (or generate a synthetic corpus) into a bundle")
    p.add_argument("--interactions")
    p.add_argument("--relations")
    p.add_argument("--out", required=True)
    p.add_argument("--timestamps", choices=("auto", "yes", "no"), default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--types", type=int, default=3)
    p.add_argument("--values-per-type", type=int, nargs="+", default=[10, 15, 20])
    p.add_argument("--min-interactions", type=int, default=6)
    p.add_argument("--max-interactions", type=int, default=10)
    p.add_argument("--planted-prob", type=float, default=0.9)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write checkpoints plus the training log")
    _add_run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank held-out items with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--eval-mode", choices=("all", "sampled"))
    p.add_argument("--n-negatives", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "train the seven ablation configurations"),
                                 ("sweep-gamma", cmd_sweep_gamma, "train once per relation-loss weight")):
        p = sub.add_parser(name, help=helptext)
        _add_run_flags(p)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int, default=1, help="configurations trained in parallel")
        if name == "sweep-gamma":
            p.add_argument("--gammas", default="0,0.001,0.01,0.1")
        p.set_defaults(func=func)

    p = sub.add_parser("explain", help="attention weights and sentences for a user's top items")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--user")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--top-m", type=int, default=5)
    p.add_argument("--aggregate", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients (float64)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--f", type=int, default=4)
    p.add_argument("--types", type=int, default=3)
    p.add_argument("--values", type=int, default=5)
    p.add_argument("--items", type=int, default=10)
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--corrupt", help="scale one primitive's backward by 1.01 (self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        return args.func(args)
    except UsageError as exc:
        print(f"rcf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigFileError as exc:
        print(f"rcf: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, ExplainError, FileNotFoundError) as exc:
        print(f"rcf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError, FloatingPointError) as exc:
        print(f"rcf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
