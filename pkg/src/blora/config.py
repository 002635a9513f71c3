"""Run configuration: every knob of a run in one flat ``key=value`` file.

Keys are ``section.field`` for the component configs (``model``, ``suite``,
``pretrain``, ``train``, ``sparsity``) plus the top-level ``seed``, ``seeds``
and ``out``.  Blank lines and ``#`` comments are ignored.  Example::

    seeds = 0,1,2
    train.beta = 0.5
    model.d_model = 32
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .sparsity import SparsityConfig
from .tasks import SuiteConfig
from .training import PretrainConfig, TrainingConfig

SECTIONS = {
    "model": ModelConfig,
    "suite": SuiteConfig,
    "pretrain": PretrainConfig,
    "train": TrainingConfig,
    "sparsity": SparsityConfig,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs"

    def training_for(self, seed: int, **overrides) -> TrainingConfig:
        return replace(self.train, seed=seed, **overrides)

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {}
        for name in SECTIONS:
            for f in fields(getattr(self, name)):
                flat[f"{name}.{f.name}"] = getattr(getattr(self, name), f.name)
        flat.update(seed=self.seed, seeds=self.seeds, out=self.out)
        return flat

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def to_json_dict(self) -> dict[str, object]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.to_flat().items()}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() == "none" and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse(raw, inner, key)
    if origin is tuple:
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        elem = args[0]
        return tuple(_parse(p, elem, key) for p in parts)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def from_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top_hints = typing.get_type_hints(RunConfig)
    sections = {name: {} for name in SECTIONS}
    top = {}
    for key, raw in pairs.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section {sec!r} in key {key!r}")
            hints = typing.get_type_hints(SECTIONS[sec])
            if name not in hints or name not in {f.name for f in fields(SECTIONS[sec])}:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _parse(raw, hints[name], key)
        else:
            if key not in ("seed", "seeds", "out"):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _parse(raw, top_hints[key], key)
    try:
        updates = {sec: replace(getattr(base, sec), **vals) for sec, vals in sections.items() if vals}
        return replace(base, **updates, **top)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
        pairs = parse_text(text, str(p))
    pairs.update(overrides or {})
    return from_pairs(pairs)
