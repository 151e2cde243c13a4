"""Flat ``key = value`` run configuration files.

Keys (all optional)::

    L N T F N_min N_max dim     encoding; T may be written 2^19
    lr decay iters batch seed   optimiser: lr_final = lr * decay
    samples                     samples per ray (3D modes)
    scale                       scene scale of NeRF-synthetic data
    views size                  oracle3d: training views and their pixel size

``#`` starts a comment. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DataError
from .grid import EncodingConfig
from .trainer import TrainConfig

_INT_KEYS = {"L", "N", "T", "F", "N_min", "N_max", "dim", "iters", "batch", "seed", "samples", "views", "size"}
_FLOAT_KEYS = {"lr", "decay", "scale"}


@dataclass
class RunConfig:
    encoding: EncodingConfig
    train: TrainConfig
    scale: float = 1.0
    views: int = 16
    size: int = 64
    raw: dict = field(default_factory=dict)


def _parse_int(key, text):
    text = text.strip()
    try:
        if "^" in text:
            base, exp = text.split("^", 1)
            return int(base) ** int(exp)
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not value:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key in _INT_KEYS:
            raw[key] = _parse_int(key, value)
        elif key in _FLOAT_KEYS:
            try:
                raw[key] = float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    enc_keys = ("L", "N", "T", "F", "N_min", "N_max", "dim")
    enc = EncodingConfig(**{k: raw[k] for k in enc_keys if k in raw})
    train_kwargs = {}
    if "lr" in raw:
        train_kwargs["lr_init"] = raw["lr"]
    lr = train_kwargs.get("lr_init", TrainConfig.lr_init)
    if "decay" in raw:
        train_kwargs["lr_final"] = lr * raw["decay"]
    elif "lr" in raw:
        train_kwargs["lr_final"] = lr * (TrainConfig.lr_final / TrainConfig.lr_init)
    for src, dst in (("iters", "total_steps"), ("batch", "batch_size"), ("seed", "seed"), ("samples", "samples_per_ray")):
        if src in raw:
            train_kwargs[dst] = raw[src]
    cfg = TrainConfig(**train_kwargs)
    return RunConfig(enc, cfg, raw.get("scale", 1.0), raw.get("views", 16), raw.get("size", 64), raw)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    return parse_config(text, overrides)
