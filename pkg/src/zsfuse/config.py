"""Run configuration: YAML file with ``scene``, ``train``, ``alignment`` and ``paths`` sections.

Every field has a default.  Unknown sections or keys are rejected.  Command-line
overrides use dotted names, e.g. ``--train.epochs 5`` or ``--scene.unseen "[6, 7]"``;
override values are parsed as YAML scalars or flow sequences.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .alignment import AlignmentConfig
from .synthscene import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    out: str = "runs"


# tau and similarity live in the alignment section only
_TRAIN_EXCLUDED = ("tau", "similarity")
SECTIONS = {"scene": SceneSpec, "train": TrainConfig, "alignment": AlignmentConfig, "paths": PathsConfig}


def _fields(section: str) -> list[dataclasses.Field]:
    fs = dataclasses.fields(SECTIONS[section])
    return [f for f in fs if not (section == "train" and f.name in _TRAIN_EXCLUDED)]


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            out[section] = {f.name: _plain(getattr(obj, f.name)) for f in _fields(section)}
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _coerce(value, default, key: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default and isinstance(default[0], tuple) or (not default and value and isinstance(value[0], list)):
            return tuple(tuple(v) for v in value)
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    return value


def build_config(raw: dict | None = None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}; expected {list(SECTIONS)}")
    built = {}
    for section, cls in SECTIONS.items():
        values = raw.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        names = {f.name: f for f in _fields(section)}
        bad = set(values) - set(names)
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")
        defaults = cls()
        kwargs = {}
        for name, value in values.items():
            default = getattr(defaults, name)
            kwargs[name] = _coerce(value, default, f"{section}.{name}")
        built[section] = kwargs
    try:
        alignment = AlignmentConfig(**built["alignment"])
        return RunConfig(
            scene=SceneSpec(**built["scene"]),
            train=TrainConfig(tau=alignment.tau, similarity=alignment.similarity, **built["train"]),
            alignment=alignment,
            paths=PathsConfig(**built["paths"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def read_raw(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return data or {}


def apply_overrides(raw: dict, overrides: dict[str, str]) -> dict:
    raw = {k: dict(v or {}) for k, v in raw.items()}
    for key, text in overrides.items():
        section, _, name = key.partition(".")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override --{key} {text!r}") from exc
        raw.setdefault(section, {})[name] = value
    return raw


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    return build_config(apply_overrides(read_raw(path), overrides or {}))


def add_override_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides", "any config field as --SECTION.FIELD VALUE, e.g. --train.epochs 5")
    for section in SECTIONS:
        for f in _fields(section):
            group.add_argument(f"--{section}.{f.name}", dest=f"cfg__{section}__{f.name}", metavar="VALUE",
                               default=None, help=argparse.SUPPRESS)


def overrides_from_args(ns: argparse.Namespace) -> dict[str, str]:
    out = {}
    for key, value in vars(ns).items():
        if key.startswith("cfg__") and value is not None:
            _, section, name = key.split("__", 2)
            out[f"{section}.{name}"] = value
    return out
