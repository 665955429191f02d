"""Finite-difference verification of every primitive and of the composed losses (float64)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rcf import autodiff as ad
from rcf.corpus import Corpus, corpus_from_arrays, sample_rec_batch, sample_rel_batch
from rcf.model import RcfConfig, rec_loss
from rcf.params import ParamStore, init_params
from rcf.relation import rel_loss

TOLERANCE = 1e-4
FD_EPS = 1e-4
KINK_MARGIN = 3e-3
OPS = ("add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "relu", "sigmoid", "exp", "log",
       "log_sigmoid", "sum", "concat", "take_rows", "getitem", "softmax", "segment_sum",
       "smoothed_softmax")


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [f"{'PASS' if v < self.tolerance else 'FAIL'}  {k:<24s} max rel err {v:.3e}"
                for k, v in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / (||a|| + ||n||)``, 0 when both vanish."""
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if den < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / den)


def check_store(loss_fn, store: ParamStore, eps: float = FD_EPS, names=None) -> float:
    """Max per-tensor relative error of backward vs central differences of ``loss_fn()``."""
    store.zero_grad()
    ad.backward(loss_fn())
    analytic = {k: g.copy() for k, g in store.grads.items()}
    store.zero_grad()
    worst = 0.0
    for name in names or store.names():
        theta = store.tensors[name]
        numeric = np.zeros_like(theta)
        flat, nflat = theta.reshape(-1), numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(loss_fn().value)
            flat[k] = orig - eps
            down = float(loss_fn().value)
            flat[k] = orig
            nflat[k] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


# --------------------------------------------------------------------------- primitives

def _primitive_cases(rng):
    """(name, input tensors, builder) triples covering every differentiable op."""
    def r(*shape):
        return rng.normal(size=shape)

    seg = np.array([0, 2, 2, 1, 0, 2])
    return [
        ("add", {"a": r(3, 4), "b": r(4)}, lambda a, b: ad.add(a, b)),
        ("sub", {"a": r(3, 4), "b": r(3, 1)}, lambda a, b: ad.sub(a, b)),
        ("mul", {"a": r(3, 4), "b": r(1, 4)}, lambda a, b: ad.mul(a, b)),
        ("scale", {"a": r(5)}, lambda a: ad.scale(a, -2.5)),
        ("matmul", {"a": r(3, 4), "b": r(4, 2)}, lambda a, b: ad.matmul(a, b)),
        ("matvec", {"a": r(3, 4), "b": r(4)}, lambda a, b: ad.matmul(a, b)),
        ("transpose", {"a": r(3, 4)}, lambda a: ad.transpose(a)),
        ("reshape", {"a": r(3, 4)}, lambda a: ad.reshape(a, (2, 6))),
        ("relu", {"a": r(4, 5)}, lambda a: ad.relu(a)),
        ("sigmoid", {"a": r(6)}, lambda a: ad.sigmoid(a)),
        ("exp", {"a": r(6)}, lambda a: ad.exp(a)),
        ("log", {"a": np.abs(r(6)) + 0.5}, lambda a: ad.log(a)),
        ("log_sigmoid", {"a": 3 * r(6)}, lambda a: ad.log_sigmoid(a)),
        ("sum", {"a": r(3, 4)}, lambda a: ad.sum_(a, axis=1)),
        ("mean", {"a": r(3, 4)}, lambda a: ad.mean(a)),
        ("concat", {"a": r(2, 3), "b": r(2, 2)}, lambda a, b: ad.concat([a, b], axis=1)),
        ("take_rows", {"a": r(4, 3)}, lambda a: ad.take_rows(a, [2, 0, 2, 3])),
        ("getitem", {"a": r(3, 4, 2)}, lambda a: ad.getitem(a, (1, slice(1, 3)))),
        ("softmax", {"a": r(3, 4)}, lambda a: ad.softmax(a, axis=1)),
        ("segment_sum", {"a": r(6, 3)}, lambda a: ad.segment_sum(a, seg, 3)),
        ("smoothed_softmax", {"a": r(6)}, lambda a: ad.smoothed_softmax(a, seg, 3, 0.5)),
    ]


def check_primitives(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, inputs, build in _primitive_cases(rng):
        store = ParamStore(inputs, np.float64)
        probe = build(*(ad.param(store, k) for k in inputs))
        w = rng.normal(size=probe.shape)

        def loss_fn(build=build, store=store, inputs=inputs, w=w):
            y = build(*(ad.param(store, k) for k in inputs))
            return ad.sum_(ad.mul(y, ad.const(w)))

        out[name] = check_store(loss_fn, store)
    return out


# --------------------------------------------------------------------------- full losses

def random_fixture(seed: int = 0, d: int = 8, f: int = 4, n_types: int = 3, n_values: int = 5,
                   n_items: int = 10, n_users: int = 4, mlp_hidden: int = 8, n_triplets: int = 14):
    """Small random corpus and float64 parameters with non-trivial activations."""
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for _ in range(n_users):
        items = rng.choice(n_items, size=6, replace=False)
        train.append(items[:4])
        valid.append(items[4])
        test.append(items[5])
    trip = set()
    while len(trip) < n_triplets:
        i, j = rng.choice(n_items, size=2, replace=False)
        trip.add((int(min(i, j)), int(rng.integers(1, n_types + 1)), int(rng.integers(1, n_values + 1)),
                  int(max(i, j))))
    corpus = corpus_from_arrays(n_users, n_items, train, valid, test, sorted(trip),
                                type_labels=["<t0>"] + [f"t{k}" for k in range(1, n_types + 1)],
                                value_labels=["<v0>"] + [f"v{k}" for k in range(1, n_values + 1)])
    store = init_params(n_users, n_items, n_types + 1, n_values + 1, d, f, mlp_hidden, seed,
                        np.float64, std=0.5)
    for name in ("b1", "b2", "bm", "bout"):
        store[name] = rng.normal(0, 0.3, size=store[name].shape)
    return corpus, store


def _loss_fns(corpus: Corpus, store: ParamStore, config: RcfConfig, gamma: float, seed: int):
    rng = np.random.default_rng(seed)
    rec_batch = sample_rec_batch(corpus, 6, rng)
    rel_batch = sample_rel_batch(corpus, 6, rng)

    def l_rec():
        # identical dropout masks on every evaluation
        return rec_loss(store, corpus, rec_batch, config, training=True, rng=np.random.default_rng(seed))

    def l_rel():
        return rel_loss(store, rel_batch)

    def l_total():
        return ad.add(l_rec(), ad.scale(l_rel(), gamma))

    return {"L_rec": l_rec, "L_rel": l_rel, "L": l_total}


def check_losses(seed: int = 0, gamma: float = 0.01, config: RcfConfig | None = None,
                 max_resample: int = 200, **sizes) -> dict[str, float]:
    config = config or RcfConfig(d=sizes.get("d", 8), f=sizes.get("f", 4),
                                 mlp_hidden=sizes.get("mlp_hidden", 8), dropout=0.2)
    sizes.setdefault("d", config.d)
    sizes.setdefault("f", config.f)
    sizes.setdefault("mlp_hidden", config.mlp_hidden)
    for attempt in range(max_resample):
        fixture_seed = seed * 1000 + attempt
        corpus, store = random_fixture(fixture_seed, **sizes)
        fns = _loss_fns(corpus, store, config, gamma, fixture_seed)
        with ad.track_kinks() as kinks:
            fns["L"]()
        if min(kinks, default=1.0) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a fixture away from ReLU kinks")
    return {name: check_store(fn, store) for name, fn in fns.items()}


def run(seed: int = 0, corrupt: str | None = None, **sizes) -> GradcheckReport:
    """Primitive and loss checks; ``corrupt`` scales one primitive's backward (self-test)."""
    if corrupt:
        if corrupt not in OPS:
            raise ValueError(f"unknown primitive {corrupt!r}; expected one of {', '.join(OPS)}")
        ad.GRAD_CORRUPTION[corrupt] = 1.01
    try:
        errors = {f"op:{k}": v for k, v in check_primitives(seed).items()}
        errors.update(check_losses(seed, **sizes))
    finally:
        ad.GRAD_CORRUPTION.pop(corrupt, None)
    return GradcheckReport(errors)
