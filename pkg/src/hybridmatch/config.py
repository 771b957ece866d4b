"""Experiment configuration: TOML (or JSON) files into validated dataclasses.

Schema (every section optional, every key except ``scheme`` defaulted)::

    scheme = "hybrid_branch"      # baseline | hybrid_branch | hybrid_epoch | hybrid_layer
    epochs = 30
    seed = 0                      # top-level seed, see ``split_seed``
    out = "runs/hybrid_branch"

    [matching]                    # HybridConfig fields other than scheme
    n = 30
    T = 150
    K = 6
    lam = 1.0
    rho = "2/3"                   # number or "p/q" string
    ...

    [model]      d, heads, ffn
    [data]       train_count, val_count, num_classes, m_min, m_max, distractors, noise, train_seed, val_seed
    [optimizer]  name, lr, momentum, weight_decay, batch_size, grad_clip
    [eval]       nms_iou, score_cut

Unknown sections or keys raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .matching import HybridConfig
from .toymodel.training import ModelParams, OptimizerParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

# toy-scale defaults: the full-scale ratios (T = 5n, M = N = n + T) at a tenth of the size
TOY_MATCHING = dict(n=30, T=150, K=6, lam=1.0, rho=2 / 3, K_epoch=10, K_layer=10, L=2, L1=1, L2=1, M=180, N=180)


@dataclass
class DataParams:
    train_count: int = 200
    val_count: int = 50
    num_classes: int = 5
    m_min: int = 1
    m_max: int = 8
    distractors: int = 8
    noise: float = 0.05
    train_seed: Optional[int] = None
    val_seed: Optional[int] = None


@dataclass
class EvalParams:
    nms_iou: float = 0.5
    score_cut: float = 0.3


@dataclass
class ExperimentConfig:
    hybrid: HybridConfig = field(default_factory=lambda: HybridConfig(**TOY_MATCHING))
    model: ModelParams = field(default_factory=ModelParams)
    data: DataParams = field(default_factory=DataParams)
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    eval: EvalParams = field(default_factory=EvalParams)
    epochs: int = 30
    seed: int = 0
    out: str = "runs/experiment"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.hybrid.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        d = self.data
        if d.train_count < 1 or d.val_count < 1:
            raise ConfigError("train_count and val_count must be >= 1")
        if not 0 <= d.m_min <= d.m_max <= 16:
            raise ConfigError("need 0 <= m_min <= m_max <= 16")
        if d.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.model.d < 5 + d.num_classes:
            raise ConfigError(f"model.d={self.model.d} must be >= 5 + num_classes")
        if self.model.d % self.model.heads:
            raise ConfigError("model.d must be divisible by model.heads")
        op = self.optimizer
        if op.name not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {op.name!r}")
        if op.lr <= 0 or op.batch_size < 1:
            raise ConfigError("optimizer needs lr > 0 and batch_size >= 1")
        if op.grad_clip is not None and op.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if not 0 < self.eval.nms_iou <= 1:
            raise ConfigError("nms_iou must lie in (0, 1]")

    def seeds(self) -> dict:
        return split_seed(self.seed, self.data)


def split_seed(seed: int, data: DataParams = DataParams()) -> dict:
    """Expand the top-level seed into independent stream seeds.

    ``SeedSequence(seed).generate_state(3, uint64)`` gives, in order, the
    training-set seed, the validation-set seed and the training seed (which
    ``train`` splits again into initialization and shuffling). Explicit
    ``data.train_seed`` / ``data.val_seed`` override the first two.
    """
    tr, va, run = (int(s) for s in np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64))
    return {
        "train_data": tr if data.train_seed is None else data.train_seed,
        "val_data": va if data.val_seed is None else data.val_seed,
        "train": run,
    }


def _coerce(where: str, value, default):
    """Check ``value`` against the type of ``default``; ints widen to floats."""
    if isinstance(value, bool) or (isinstance(default, bool)):
        if type(value) is not type(default):
            raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
        return value
    if default is None:
        if value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if type(value) is not type(default):
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _section(name: str, raw, cls, defaults: dict, special=()):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)} - {"scheme"}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    out = dict(defaults)
    for k, v in raw.items():
        if k in special:
            out[k] = v
        else:
            out[k] = _coerce(f"{name}.{k}", v, defaults[k])
    return out


def _defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


TOP_KEYS = ("scheme", "epochs", "seed", "out", "matching", "model", "data", "optimizer", "eval")


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from a parsed mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table/object at top level")
    unknown = sorted(set(raw) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "scheme" not in raw:
        raise ConfigError("missing required key 'scheme'")
    if not isinstance(raw["scheme"], str):
        raise ConfigError("scheme must be a string")

    matching = _section("matching", raw.get("matching", {}), HybridConfig,
                        dict(TOY_MATCHING, sharing="all"), special=("rho",))
    rho = matching["rho"]
    if isinstance(rho, bool) or not isinstance(rho, (int, float, str)):
        raise ConfigError(f"matching.rho: expected a number or 'p/q' string, got {rho!r}")
    hybrid = HybridConfig(scheme=raw["scheme"], **matching)

    top = {}
    for key, default in (("epochs", 30), ("seed", 0), ("out", "runs/experiment")):
        if key in raw:
            top[key] = _coerce(key, raw[key], default)
    return ExperimentConfig(
        hybrid=hybrid,
        model=ModelParams(**_section("model", raw.get("model", {}), ModelParams, _defaults(ModelParams))),
        data=DataParams(**_section("data", raw.get("data", {}), DataParams, _defaults(DataParams))),
        optimizer=OptimizerParams(**_section("optimizer", raw.get("optimizer", {}), OptimizerParams,
                                             _defaults(OptimizerParams))),
        eval=EvalParams(**_section("eval", raw.get("eval", {}), EvalParams, _defaults(EvalParams))),
        **top,
    )


def load_config(path) -> ExperimentConfig:
    """Read a ``.toml`` or ``.json`` file. Any read, parse or schema problem is a :class:`ConfigError`."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(data.decode("utf-8"))
        else:
            raw = tomllib.loads(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(raw)
