"""Run configuration: one JSON file covering every module's knobs.

A config file is ``{"version": 1, "train": {...}, "loss": {...}, ...}``.
Section contents mirror the corresponding dataclasses; unknown sections
or keys are rejected with every violation listed, and individual values
are re-validated by the dataclasses themselves.  Values can also be
overridden from the command line as dotted ``section.key=value`` pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field, fields as dc_fields, replace

from .clahe import ClaheConfig
from .errors import ConfigError
from .evaluate import EvalConfig
from .fields import FieldSetConfig
from .losses import LossWeights
from .synth import PhantomConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1

_SECTIONS = {
    "field": FieldSetConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "phantom": PhantomConfig,
    "clahe": ClaheConfig,
    "eval": EvalConfig,
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _collect_errors(exc: ConfigError):
    return list(getattr(exc, "errors", None) or [str(exc)])


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    field: FieldSetConfig = dc_field(default_factory=FieldSetConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    loss: LossWeights = dc_field(default_factory=LossWeights)
    phantom: PhantomConfig = dc_field(default_factory=PhantomConfig)
    clahe: ClaheConfig = dc_field(default_factory=ClaheConfig)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {"version": self.version}
        for name in _SECTIONS:
            out[name] = asdict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        errors = []
        version = d.get("version")
        if version is None:
            errors.append("config is missing the 'version' field")
        elif version != CONFIG_VERSION:
            errors.append(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        for key in sorted(set(d) - {"version"} - set(_SECTIONS)):
            errors.append(f"unknown config section {key!r}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            sub = d.get(name)
            if sub is None:
                continue
            if not isinstance(sub, dict):
                errors.append(f"section {name!r} must be a JSON object")
                continue
            known = {f.name for f in dc_fields(section_cls)}
            bad = sorted(set(sub) - known)
            errors.extend(f"unknown key '{name}.{k}'" for k in bad)
            clean = {k: _tuplify(v) for k, v in sub.items() if k in known}
            try:
                kwargs[name] = section_cls(**clean)
            except ConfigError as e:
                errors.extend(f"{name}: {msg}" for msg in _collect_errors(e))
        if errors:
            raise ConfigError(errors)
        return cls(version=CONFIG_VERSION, **kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return RunConfig.from_dict(raw)


def _coerce(text: str):
    """Best-effort typed value from an override string."""
    try:
        return _tuplify(json.loads(text))
    except json.JSONDecodeError:
        pass
    if "," in text:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_coerce(p) for p in parts)
    return text


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply dotted 'section.key=value' strings on top of a config."""
    errors = []
    staged = {}
    for item in overrides:
        if "=" not in item:
            errors.append(f"override {item!r} must look like section.key=value")
            continue
        dotted, _, raw = item.partition("=")
        if "." not in dotted:
            errors.append(f"override key {dotted!r} must be section.key")
            continue
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS:
            errors.append(f"unknown config section {section!r}")
            continue
        known = {f.name for f in dc_fields(_SECTIONS[section])}
        if key not in known:
            errors.append(f"unknown key '{section}.{key}'")
            continue
        staged.setdefault(section, {})[key] = _coerce(raw)
    if errors:
        raise ConfigError(errors)
    for section, changes in staged.items():
        try:
            new_section = replace(getattr(cfg, section), **changes)
        except (ConfigError, TypeError) as e:
            msgs = _collect_errors(e) if isinstance(e, ConfigError) else [str(e)]
            errors.extend(f"{section}: {m}" for m in msgs)
            continue
        cfg = replace(cfg, **{section: new_section})
    if errors:
        raise ConfigError(errors)
    return cfg


def write_effective_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
