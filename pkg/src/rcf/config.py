"""Run configuration: flat ``key = value`` files merged with command-line flags.

Precedence is flags > file > defaults, and the serialized form always lists every key.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from rcf.model import RcfConfig
from rcf.trainer import TrainConfig


class ConfigFileError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    if text is None:
        return None
    text = str(text).strip()
    return None if text.lower() in ("", "none", "auto") else text


@dataclass
class RunConfig:
    corpus: str = ""
    embedding_dim: int = 64
    attention_factor: int = 32
    mlp_hidden: int = 64
    rho: float = 0.5
    dropout: float = 0.2
    mode: str = "full"
    attn_override: str = "none"
    gamma: float = 0.01
    lr: float = 0.05
    batch_size: int = 512
    epochs: int = 50
    eval_every: int = 1
    patience: int = 10
    seed: int = 0
    deterministic: bool = True
    eval_mode: str | None = None
    n_negatives: int = 999

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def coerce(cls, key: str, value):
        default = getattr(cls(), key) if key != "eval_mode" else None
        if key == "eval_mode":
            return _opt_str(value)
        if isinstance(default, bool):
            return _bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)

    def model_config(self) -> RcfConfig:
        return RcfConfig(d=self.embedding_dim, f=self.attention_factor, rho=self.rho,
                         dropout=self.dropout, mlp_hidden=self.mlp_hidden, mode=self.mode,
                         attn_override=self.attn_override)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, gamma=self.gamma,
                           epochs=self.epochs, eval_every=self.eval_every, patience=self.patience,
                           seed=self.seed, deterministic=self.deterministic, eval_mode=self.eval_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                v = "auto"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig(**data)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    known = set(RunConfig.keys())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = RunConfig.coerce(key, value)
        except ValueError as exc:
            raise ConfigFileError(f"{source}:{lineno}: {key}: {exc}") from None
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def resolve(file_values: dict | None = None, flags: dict | None = None) -> RunConfig:
    """Defaults, then file values, then flags that were given explicitly (not None)."""
    data = RunConfig().to_dict()
    data.update(file_values or {})
    data.update({k: v for k, v in (flags or {}).items() if v is not None})
    return RunConfig(**data)
