"""Run configuration: a YAML file with one section per module.

Example::

    backend: {name: toy, seed: 0}
    dataset: {kind: toy, seed: 0, n_samples: 500, n_classes: 10}
    attack: {family: pgd, epsilon: 1.0, steps: 7}
    methods: [zeroshot, ensemble, tpt, rtpt]
    method: {lr: 0.005, k: 20}          # overrides applied to every method
    eval: {seed: 0, workers: 1, out_dir: runs/toy}

Every run writes the resolved config next to its results (``config.yaml``)
together with its hash, so a record set can always be traced back to the
exact settings that produced it.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attacks import PRESETS, AttackSpec
from .errors import ConfigurationError
from .pipeline import MethodConfig, method_preset

DATASET_ROOT_ENV = "RTPT_DATA_ROOT"
FROZEN_NAME = "config.yaml"
SECTIONS = ("backend", "dataset", "attack", "methods", "method", "eval", "report")
DEFAULT_METHODS = ("zeroshot", "ensemble", "tpt", "rtpt")


@dataclass(frozen=True)
class BackendSection:
    name: str = "toy"
    seed: int = 0
    checkpoint: str | None = None
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "toy"
    seed: int = 0
    n_samples: int = 500
    n_classes: int = 10
    noise: float | None = None
    root: str | None = None
    limit: int | None = None

    def validate(self):
        if self.kind not in ("toy", "folder"):
            raise ConfigurationError(f"dataset kind must be 'toy' or 'folder', got {self.kind!r}")
        if self.kind == "toy" and self.n_classes < 2:
            raise ConfigurationError("a toy dataset needs at least two classes")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")


@dataclass(frozen=True)
class EvalSection:
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/default"
    cache_root: str = ".rtpt_cache"


@dataclass(frozen=True)
class ReportSection:
    formats: tuple[str, ...] = ("md", "csv")


@dataclass(frozen=True)
class RunConfig:
    backend: BackendSection = BackendSection()
    dataset: DatasetSection = DatasetSection()
    attack: AttackSpec | None = PRESETS["pgd-rn50"]
    methods: tuple[str, ...] = DEFAULT_METHODS
    method: dict = field(default_factory=dict)
    eval: EvalSection = EvalSection()
    report: ReportSection = ReportSection()

    def method_configs(self) -> list[MethodConfig]:
        return [_resolve_method(name, self.method) for name in self.methods]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        d["report"]["formats"] = list(self.report.formats)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, section: str, **changes) -> RunConfig:
        current = getattr(self, section)
        if section == "attack" and current is None:
            current = AttackSpec()
        return dataclasses.replace(self, **{section: dataclasses.replace(current, **changes)})


def _resolve_method(name: str, overrides: dict) -> MethodConfig:
    cfg = method_preset(name)
    if not overrides:
        return cfg
    d = cfg.to_dict()
    aug = dict(d.pop("augment"))
    for key, value in overrides.items():
        if key == "augment":
            aug.update(value)
        elif key == "n_views":
            aug["n_views"] = value
        elif key in d:
            d[key] = value
        else:
            raise ConfigurationError(f"unknown method setting {key!r}")
    d["augment"] = aug
    return MethodConfig.from_dict(d)


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys {sorted(unknown)} in section {name!r}")
    data = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = tuple(data[f.name])
    return cls(**data)


def from_dict(raw: dict[str, Any]) -> RunConfig:
    raw = copy.deepcopy(raw or {})
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}; expected {SECTIONS}")
    attack = raw.get("attack", "pgd-rn50")
    if isinstance(attack, str):
        if attack not in PRESETS:
            raise ConfigurationError(f"unknown attack preset {attack!r}; choose from {sorted(PRESETS)}")
        attack = PRESETS[attack]
    elif attack is not None:
        attack = _section(AttackSpec, attack, "attack").validate()
    methods = raw.get("methods", list(DEFAULT_METHODS))
    if isinstance(methods, str):
        methods = [methods]
    backend = raw.get("backend") or {}
    cfg = RunConfig(
        backend=_section(BackendSection, backend, "backend"),
        dataset=_section(DatasetSection, raw.get("dataset"), "dataset"),
        attack=attack,
        methods=tuple(methods),
        method=dict(raw.get("method") or {}),
        eval=_section(EvalSection, raw.get("eval"), "eval"),
        report=_section(ReportSection, raw.get("report"), "report"),
    )
    cfg.dataset.validate()
    cfg.method_configs()  # surfaces bad method names and settings early
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    return from_dict(raw)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, allow_unicode=True)


def freeze(cfg: RunConfig, out_dir) -> Path:
    """Write the resolved config and its hash next to the results."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / FROZEN_NAME
    text = f"# config_hash: {cfg.config_hash}\n" + dump(cfg)
    if path.exists() and path.read_text() != text:
        old = from_dict(yaml.safe_load(path.read_text()))
        if old.config_hash != cfg.config_hash:
            raise ConfigurationError(
                f"{out_dir} already holds results for config {old.config_hash}; "
                f"refusing to mix in {cfg.config_hash}"
            )
    tmp = path.with_suffix(".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def dataset_root(explicit: str | None) -> str | None:
    if explicit is not None:
        return explicit
    return os.environ.get(DATASET_ROOT_ENV)
