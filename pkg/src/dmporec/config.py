"""Declarative run configuration.

One YAML or JSON file with the sections ``data``, ``model``, ``train``,
``eval`` and ``bpr``. Every key is optional; unknown keys are rejected.
Single values can be overridden by dotted path, e.g. ``train.lr0=1e-4`` or
``data.synthetic.n_users=2000``.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .bpr import BprConfig
from .errors import ConfigError
from .synthetic import SyntheticConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?"""
               r"""|[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$"""),
    list("-+0123456789."))


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)
SOURCES = ("synthetic", "ratings", "movielens-1m", "amazon")


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    meta_path: str | None = None
    domain: str = "movie"
    target_domain: str = "game"
    target_path: str | None = None
    target_meta_path: str | None = None
    seed: int = 0
    sizes: tuple[int, int, int] = (100, 100, 1000)
    min_pos: int = 5
    min_neg: int = 5
    max_history: int = 40
    max_prompt_items: int = 5
    template: str | None = None
    vocab_cap: int = 8192
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        self.sizes = tuple(int(x) for x in self.sizes)
        if self.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}, got {self.source!r}")
        if len(self.sizes) != 3 or min(self.sizes) < 1:
            raise ConfigError(f"data.sizes needs three positive counts, got {self.sizes}")
        if self.max_prompt_items < 1:
            raise ConfigError("data.max_prompt_items must be >= 1")


@dataclass
class ModelSection:
    """Model hyper-parameters; the vocabulary size comes from the built vocabulary.

    ``pretrain_steps > 0`` (synthetic data only) first trains the base model
    on unlabeled catalog text; ``init_checkpoint`` loads a base model instead.
    """

    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 512
    ff_dim: int | None = None
    adapter_rank: int | None = None
    adapter_targets: tuple[str, ...] = ("q", "k", "v")
    freeze_base: bool = True
    init_std: float = 0.02
    dtype: str = "float64"
    seed: int = 0
    init_checkpoint: str | None = None
    pretrain_steps: int = 0
    pretrain_docs: int = 2000
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        self.adapter_targets = tuple(self.adapter_targets)
        if self.pretrain_steps < 0:
            raise ConfigError("model.pretrain_steps must be >= 0")
        if self.pretrain_steps and self.init_checkpoint:
            raise ConfigError("model.pretrain_steps and model.init_checkpoint are exclusive")


@dataclass
class EvalConfig:
    mode: str = "token-mean"
    max_samples: int | None = None
    with_records: bool = True

    def __post_init__(self):
        from .evalkit import MODES

        if self.mode not in MODES:
            raise ConfigError(f"eval.mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bpr: BprConfig = field(default_factory=BprConfig)

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"config version {self.version} not supported (expected {SCHEMA_VERSION})")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"train.k": 3})``."""
        d = self.to_dict()
        for path, value in overrides.items():
            _set_path(d, path, value)
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        kwargs[name] = _build(sub, value, path) if sub is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelSection,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "bpr"): BprConfig,
    (DataConfig, "synthetic"): SyntheticConfig,
}


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML/JSON file (or defaults when ``path`` is None) and apply
    ``key.path=value`` overrides. Values are parsed as YAML scalars."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = _yaml(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        _set_path(data, key.strip(), _yaml(raw) if raw.strip() else None)
    return from_dict(data)


def _set_path(d: dict, path: str, value) -> None:
    parts = path.split(".")
    if not all(parts):
        raise ConfigError(f"bad config path {path!r}")
    node = d
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"config path {path!r} runs through a non-section value")
        node = nxt
    node[parts[-1]] = value
