"""Model and training configuration dataclasses plus the flat config-file parser.

Config files are plain text, one `key = value` per line, '#' comments. Keys
map 1:1 onto the dataclass fields below; every default is overridable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32                 # hidden width
    d_in: int = 9               # node features: 6 service metrics + 3 span stats
    d_c: int = 7                # trace-common vector length
    rho: float = 0.5            # one-shot pre-mixing strength
    mixing: str = "linear"      # linear | dense
    encoder_blocks: int = 1
    L: int = 12                 # history windows
    H: int = 6                  # forecast horizon
    B: int = 2                  # stacked temporal blocks
    K: int = 3                  # dominant periods per block
    decoder: str = "timesnet"   # timesnet | linear


@dataclass(frozen=True)
class TrainConfig:
    q: float = 0.95
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 8
    train_frac: float = 0.70
    val_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie strictly inside (0, 1)")
        if not 0.0 < self.train_frac + self.val_frac < 1.0:
            raise ValueError("train_frac + val_frac must leave room for a test split")


_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Flat `key = value` lines into a raw string dict."""
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"config line {line_no}: empty key or value")
        out[key] = value
    return out


def _coerce(name: str, value: str, kind: str):
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def configs_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs, train_kwargs = {}, {}
    for key, value in raw.items():
        if key in _MODEL_KEYS:
            model_kwargs[key] = _coerce(key, value, _MODEL_KEYS[key])
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _coerce(key, value, _TRAIN_KEYS[key])
        else:
            known = sorted(set(_MODEL_KEYS) | set(_TRAIN_KEYS))
            raise ValueError(f"unknown config key '{key}' (known: {', '.join(known)})")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_configs(path) -> tuple[ModelConfig, TrainConfig]:
    return configs_from_dict(parse_config_text(Path(path).read_text(encoding="utf-8")))


def override(cfg, **changes):
    """Functional update that tolerates None values (meaning: keep default)."""
    filtered = {k: v for k, v in changes.items() if v is not None}
    return replace(cfg, **filtered) if filtered else cfg
