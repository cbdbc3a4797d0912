"""YAML experiment configuration.

The file mirrors ``pipeline.ExperimentConfig``: one top-level section per
field (``universe``, ``heavy``, ``light``, ``train``, ``light_train``,
``meta``, ``init``, ``nas``, ``serve``) plus the scalars
``n_initial_scenarios``, ``strategies``, ``seeds`` and ``save_artifacts``.
Omitted keys keep their defaults.  Unknown keys, wrong types and values that
fail validation raise ``ConfigError`` whose message starts with the dotted
path of the offending key, e.g. ``nas.epochs: expected int, got 'ten'``.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

import yaml

from .budgetnas import NasConfig
from .metaengine import InitConfig
from .nets import ArchConfig, TrainConfig
from .pipeline import ExperimentConfig, MetaConfig, ServeConfig
from .synthgen import UniverseConfig

SECTIONS = {
    "universe": UniverseConfig,
    "heavy": ArchConfig,
    "light": ArchConfig,
    "train": TrainConfig,
    "light_train": TrainConfig,
    "meta": MetaConfig,
    "init": InitConfig,
    "nas": NasConfig,
    "serve": ServeConfig,
}
# fields that are set programmatically, never from a file
_HIDDEN = {ArchConfig: {"genotype"}, InitConfig: {"nas"}}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(path, f"expected {' or '.join(getattr(a, '__name__', str(a)) for a in args)}, got {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        item = args[0] if args else typing.Any
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is typing.Any or hint is object:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected int, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {hint}")


def _build(cls, raw, path: str, base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    allowed = [f.name for f in dataclasses.fields(cls) if f.name not in _HIDDEN.get(cls, set())]
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], f"unknown key; allowed keys are {allowed}")
    kw = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in raw.items()}
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _check(obj, path: str) -> None:
    validate = getattr(obj, "validate", None)
    if validate is None:
        return
    try:
        validate()
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("", f"top level must be a mapping, got {type(raw).__name__}")
    default = ExperimentConfig()
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top_fields)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key; allowed keys are {sorted(top_fields)}")
    kw = {}
    for name, cls in SECTIONS.items():
        if name in raw:
            kw[name] = _build(cls, raw[name], name, base=getattr(default, name))
            _check(kw[name], name)
    hints = typing.get_type_hints(ExperimentConfig)
    for name in top_fields - set(SECTIONS):
        if name in raw:
            kw[name] = _coerce(raw[name], hints[name], name)
    cfg = dataclasses.replace(default, **kw)
    try:
        cfg.validate()
    except ValueError as exc:
        where, _, msg = str(exc).partition(": ")
        raise ConfigError(where, msg) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError("", f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path} is not valid YAML: {exc}") from exc
    return from_dict(raw)


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            hidden = _HIDDEN.get(type(v), set())
            v = {k.name: _plain(getattr(v, k.name)) for k in dataclasses.fields(v) if k.name not in hidden}
        out[f.name] = _plain(v)
    return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
