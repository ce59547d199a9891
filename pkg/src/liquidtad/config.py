"""Run configuration: one JSON document with a section per subsystem.

Unknown keys are rejected; ``key.sub=value`` overrides are applied after
loading; the resolved document round-trips through ``to_dict``/``from_dict``.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

from .bench import BenchSpec
from .detector import PyramidConfig
from .gradcheck import GradcheckConfig
from .synthetic import SyntheticSpec
from .train import EvalConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class AblateConfig:
    parallel_grid: bool = False
    workers: int = 2
    inference_videos: int | None = None   # None: whole test split


SECTIONS = {
    "data": SyntheticSpec,
    "model": PyramidConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "bench": BenchSpec,
    "gradcheck": GradcheckConfig,
    "ablate": AblateConfig,
}


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: PyramidConfig = field(default_factory=PyramidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchSpec = field(default_factory=BenchSpec)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self):
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in SECTIONS.items():
            kw[name] = _build(typ, d.get(name, {}), name)
        return cls(**kw)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(typ, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be an object")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return typ(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where!r} section: {e}") from e


_FRACTION = re.compile(r"^\s*(-?\d+(?:\.\d*)?)\s*/\s*(\d+(?:\.\d*)?)\s*$")


def parse_value(text):
    """JSON literal, a ``a/b`` fraction, or the raw string."""
    m = _FRACTION.match(text)
    if m:
        return float(m.group(1)) / float(m.group(2))
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides):
    """Apply ``["section.key=value", ...]`` and return a new validated config."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.field")
        section, name = parts
        if section not in d:
            raise ConfigError(f"unknown config section {section!r}")
        if name not in d[section]:
            raise ConfigError(f"unknown key {key!r}")
        d[section][name] = parse_value(text)
    return RunConfig.from_dict(d)


def load(path=None, overrides=None):
    if path is None:
        base = RunConfig()
    else:
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        base = RunConfig.from_dict(raw)
    return apply_overrides(base, overrides)


def emit(cfg: RunConfig, path=None):
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as f:
            f.write(text + "\n")
    return text


def loads(text):
    return RunConfig.from_dict(json.loads(text))
