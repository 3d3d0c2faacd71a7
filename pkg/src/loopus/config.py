"""Run configuration: ``key = value`` files with dotted keys and env overrides.

Example file::

    # toy run
    model.d_model = 64
    loop.B = 8
    optimizer.lr = 3e-4
    data.task = modular_add

Environment variables ``LOOPUS_<KEY>`` override file values, where ``<KEY>``
is the dotted key upper-cased with dots turned into underscores
(``LOOPUS_LOOP_B=8``, ``LOOPUS_OPTIMIZER_TOTAL_STEPS=500``).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SyntheticTaskSpec
from .errors import ConfigError
from .halting import HaltPolicy
from .loop import LoopConfig
from .model import BlockSplit

ENV_PREFIX = "LOOPUS_"


@dataclass
class ModelSection:
    """Model hyper-parameters; the vocabulary size comes from the data."""

    context_len: int = 128
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 6
    enc_end: int = 1
    dec_start: int = 5
    rope: bool = True
    rope_base: float = 10000.0
    mlp_ratio: int = 4
    gate: str = "decay"


@dataclass
class OptimizerSection:
    lr: float = 3e-4
    warmup: int = 100
    total_steps: int = 5000
    weight_decay: float = 0.01
    batch_size: int = 32
    clip_norm: float = 1.0


@dataclass
class PretrainSection:
    """Single-pass pretraining of the base transformer before looping."""

    steps: int = 3000
    lr: float = 3e-3
    warmup: int = 100


@dataclass
class DataSection:
    corpus: str = ""
    task: str = "modular_add"
    min_len: int = 3
    max_len: int = 8
    modulus: int = 10
    n_samples: int = 20000
    seq_len: int = 128
    val_ratio: float = 1e-4


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loop: LoopConfig = field(default_factory=LoopConfig)
    halt: HaltPolicy = field(default_factory=HaltPolicy)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    data: DataSection = field(default_factory=DataSection)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        BlockSplit(self.model.enc_end, self.model.dec_start).validate(self.model.n_layers)
        if self.data.corpus and not Path(self.data.corpus).is_file():
            raise ConfigError(f"corpus file not found: {self.data.corpus}")
        if not self.data.corpus:
            self.synthetic_spec()
        # rebuild the validated sections so their own checks run
        self.loop = LoopConfig(**asdict(self.loop))
        self.halt = HaltPolicy(**asdict(self.halt))
        if self.optimizer.total_steps < 0 or self.pretrain.steps < 0:
            raise ConfigError("step counts must be non-negative")
        return self

    def synthetic_spec(self) -> SyntheticTaskSpec:
        d = self.data
        return SyntheticTaskSpec(d.task, d.min_len, d.max_len, d.modulus, d.n_samples)

    def to_flat(self) -> dict:
        return flatten(asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str):
    """``true``/``false``, ints, floats, ``none``; anything else stays a string."""
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_config_text(text: str, source: str = "<text>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(val)
    return out


def _known_keys() -> dict[str, str]:
    """Env-style name -> dotted key for every settable field."""
    keys = RunConfig().to_flat().keys()
    return {k.replace(".", "_").upper(): k for k in keys}


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    known = _known_keys()
    out = {}
    for name, val in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = known.get(name[len(ENV_PREFIX) :].upper())
        if key is None:
            raise ConfigError(f"unknown config override {name}")
        out[key] = parse_value(val)
    return out


def _coerce(kind, value, key: str):
    if value is None:
        return None
    try:
        if kind in (int, "int") and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (bool, "bool"):
            if isinstance(value, bool):
                return value
            raise ValueError
        if kind in (str, "str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {kind}") from None
    return value


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    for key, value in values.items():
        parts = key.split(".")
        obj = cfg
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        ftypes = {f.name: f.type for f in fields(obj)} if hasattr(obj, "__dataclass_fields__") else {}
        if leaf not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        kind = ftypes[leaf]
        kind = kind.split("|")[0].strip() if isinstance(kind, str) else kind
        setattr(obj, leaf, _coerce(kind, value, key))
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults <- file <- environment <- explicit overrides, then validate."""
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        apply_overrides(cfg, parse_config_text(p.read_text(), str(p)))
    apply_overrides(cfg, env_overrides(environ))
    if overrides:
        apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_flat().items():
        if v is None:
            v = "none"
        elif isinstance(v, str):
            v = f'"{v}"'  # keeps "" and "none"-like strings distinct from None
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
