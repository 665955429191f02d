"""Dense parameter storage with gradient buffers, Adagrad and unit-ball projection."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

EMBEDDINGS = ("P", "Q", "X", "Z")
MAGIC = b"RCF1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named tensors plus same-shaped gradient buffers and Adagrad accumulators."""

    def __init__(self, tensors: dict[str, np.ndarray], dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors = {k: np.array(v, dtype=self.dtype, order="C") for k, v in tensors.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        self.accum = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.tensors[name].shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {self.tensors[name].shape}")
        self.tensors[name] = np.array(value, order="C")

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.dtype)
        out.accum = {k: v.copy() for k, v in self.accum.items()}
        return out

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, dtype)

    def check_finite(self) -> None:
        for name, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values in parameter {name}")

    def grad_norms(self) -> dict[str, float]:
        return {k: float(np.sqrt(np.sum(np.square(g, dtype=np.float64)))) for k, g in self.grads.items()}


def init_params(n_users: int, n_items: int, n_types: int, n_values: int, d: int = 64, f: int = 32,
                mlp_hidden: int = 64, seed: int = 0, dtype=np.float32, std: float | None = None) -> ParamStore:
    """Gaussian init with standard deviation ``0.1 / sqrt(d)``; biases start at zero."""
    rng = np.random.default_rng(seed)
    std = 0.1 / np.sqrt(d) if std is None else std

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    tensors = {
        "P": normal(n_users, d),
        "Q": normal(n_items, d),
        "X": normal(n_types, d),
        "Z": normal(n_values, d),
        "W1": normal(f, d),
        "b1": np.zeros(f),
        "h1": normal(f),
        "W2": normal(n_types, f, 3 * d),
        "b2": np.zeros((n_types, f)),
        "h2": normal(n_types, f),
        "Wm": normal(mlp_hidden, d),
        "bm": np.zeros(mlp_hidden),
        "wout": normal(mlp_hidden),
        "bout": np.zeros(()),
    }
    return ParamStore(tensors, dtype)


def adagrad_step(store: ParamStore, lr: float = 0.05, eps: float = 1e-8) -> None:
    """``acc += g**2; theta -= lr * g / sqrt(acc + eps)``, then zero the gradients."""
    for name, theta in store.tensors.items():
        g = store.grads[name]
        acc = store.accum[name]
        acc += g * g
        theta -= lr * g / np.sqrt(acc + eps)
        g.fill(0)


def touched_rows(store: ParamStore) -> dict[str, np.ndarray]:
    """Rows of each embedding table with a non-zero gradient (call before the step)."""
    return {name: np.flatnonzero(np.any(store.grads[name] != 0, axis=1)) for name in EMBEDDINGS}


def project_unit_ball(store: ParamStore, rows: dict[str, np.ndarray] | None = None) -> int:
    """Rescale embedding rows to ``row / max(1, ||row||)``; returns how many rows shrank.

    Only P, Q, X and Z are constrained. ``rows`` restricts the check to given rows.
    """
    shrunk = 0
    for name in EMBEDDINGS:
        table = store.tensors[name]
        idx = slice(None) if rows is None else rows[name]
        sub = table[idx]
        norms = np.sqrt(np.sum(np.square(sub, dtype=np.float64), axis=1))
        over = norms > 1.0
        if over.any():
            scaled = (sub[over] / norms[over, None]).astype(table.dtype)
            # rounding can leave a norm a hair above 1; pull it under so a second pass is a no-op
            while True:
                n2 = np.sqrt(np.sum(np.square(scaled, dtype=np.float64), axis=1))
                high = n2 > 1.0
                if not high.any():
                    break
                scaled[high] = (scaled[high] * (1.0 - np.finfo(table.dtype).eps)).astype(table.dtype)
            sub[over] = scaled
            table[idx] = sub
            shrunk += int(over.sum())
    return shrunk


def max_row_norm(store: ParamStore) -> float:
    return max(float(np.sqrt(np.sum(np.square(store[n], dtype=np.float64), axis=1)).max(initial=0.0))
               for n in EMBEDDINGS)


# --------------------------------------------------------------------------- checkpoints

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(store: ParamStore, path, config: dict | None = None, seed: int = 0,
                    epoch: int = 0, extra: dict | None = None) -> None:
    """Binary little-endian tensors (float32) followed by a JSON trailer."""
    store.check_finite()
    config = dict(config or {})
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(store.tensors))
    for name in sorted(store.tensors):
        arr = np.asarray(store.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    shapes = store.shapes()
    trailer = {
        "d": int(shapes["P"][1]),
        "f": int(shapes["W1"][0]),
        "vocab": {"users": shapes["P"][0], "items": shapes["Q"][0],
                  "types": shapes["X"][0], "values": shapes["Z"][0]},
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "epoch": epoch,
        **(extra or {}),
    }
    buf += json.dumps(trailer, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, expected_shapes: dict | None = None, dtype=np.float32):
    """Read a checkpoint; returns ``(store, trailer)``.

    ``expected_shapes`` (e.g. from a freshly initialised store) turns any
    disagreement into an error naming the tensor.
    """
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("unexpected end of checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not an RCF checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    try:
        trailer = json.loads(data[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("unexpected end of checkpoint") from None
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(f"shape mismatch for tensor {name}: checkpoint "
                                      f"{tuple(tensors[name].shape)} vs expected {tuple(shape)}")
    return ParamStore(tensors, dtype), trailer
