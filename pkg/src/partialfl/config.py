"""Experiment configuration: one INI-style document with five sections.

Format (``format_version = 1``)::

    [experiment]
    format_version = 1
    seed = 0
    metrics = accuracy, uar
    output =

    [data]          # SyntheticSpec fields
    [partition]     # mode, alpha, q
    [federation]    # FederationConfig fields (num_clients is K)
    [model]         # ModelDims fields

Every key is optional; omitted keys take the defaults below. Unknown
sections or keys are rejected. Booleans are ``true``/``false``, lists are
comma separated. ``#`` and ``;`` start comment lines.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import PartitionSpec, SyntheticSpec
from .federation import FederationConfig
from .models import ModelDims

FORMAT_VERSION = 1

SECTIONS = {
    "data": SyntheticSpec,
    "partition": PartitionSpec,
    "federation": FederationConfig,
    "model": ModelDims,
}
# K is configured once, under [federation].
_SKIPPED = {("partition", "num_clients")}
_EXPERIMENT_KEYS = ("format_version", "seed", "metrics", "output")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f" [key {key}]"
        if line is not None:
            where += f" [line {line}]"
        super().__init__(message + where)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    model: ModelDims = field(default_factory=ModelDims)
    metrics: tuple[str, ...] = ("accuracy", "uar")
    seed: int = 0
    output: str = ""
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.partition.num_clients != self.federation.num_clients:
            object.__setattr__(
                self, "partition", dataclasses.replace(self.partition, num_clients=self.federation.num_clients)
            )
        if self.format_version != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {self.format_version}")
        if not self.metrics:
            raise ValueError("at least one metric is required")
        for m in self.metrics:
            if m in ("accuracy", "uar"):
                continue
            if m.startswith("top") and m[3:].isdigit():
                if not 1 <= int(m[3:]) <= self.data.num_classes:
                    raise ValueError(f"metric {m} needs k in [1, {self.data.num_classes}]")
                continue
            raise ValueError(f"unknown metric {m!r}")
        if self.federation.num_clients > self.data.num_samples:
            raise ValueError("more clients than samples")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "format_version": self.format_version,
            "seed": self.seed,
            "metrics": list(self.metrics),
            "output": self.output,
        }
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: v for k, v in section.items() if (name, k) not in _SKIPPED}
        return out

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        unknown = set(doc) - set(_EXPERIMENT_KEYS) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            values = dict(doc.get(name, {}))
            allowed = {f.name for f in dataclasses.fields(klass)} - {k for s, k in _SKIPPED if s == name}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            parts[name] = klass(**values)
        fed = parts["federation"]
        parts["partition"] = dataclasses.replace(parts["partition"], num_clients=fed.num_clients)
        return cls(
            metrics=tuple(doc.get("metrics", ("accuracy", "uar"))),
            seed=int(doc.get("seed", 0)),
            output=str(doc.get("output", "")),
            format_version=int(doc.get("format_version", FORMAT_VERSION)),
            **parts,
        )

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Copy with ``{key: value}`` changes; keys are ``section.key`` or an unambiguous bare key."""
        doc = self.to_dict()
        for key, value in overrides.items():
            section, name = resolve_key(key)
            if section == "experiment":
                doc[name] = value
            else:
                doc[section][name] = value
        return ExperimentConfig.from_dict(doc)


def _field_types() -> dict[tuple[str, str], type]:
    types: dict[tuple[str, str], type] = {
        ("experiment", "format_version"): int,
        ("experiment", "seed"): int,
        ("experiment", "metrics"): tuple,
        ("experiment", "output"): str,
    }
    for name, klass in SECTIONS.items():
        defaults = klass()
        for f in dataclasses.fields(klass):
            if (name, f.name) not in _SKIPPED:
                types[(name, f.name)] = type(getattr(defaults, f.name))
    return types


FIELD_TYPES = _field_types()


def resolve_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if (section, name) not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", key)
        return section, name
    hits = [s for (s, k) in FIELD_TYPES if k == key]
    if not hits:
        raise ConfigError(f"unknown key {key!r}", key)
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; qualify it as one of {[f'{h}.{key}' for h in hits]}", key)
    return hits[0], key


def convert_value(section: str, key: str, raw: str) -> Any:
    kind = FIELD_TYPES[(section, key)]
    text = raw.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(p.strip() for p in text.split(",") if p.strip())
    return text


def _line_index(text: str) -> dict[tuple[str | None, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    index: dict[tuple[str | None, str | None], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), n)
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m:
            index.setdefault((section, m.group(1).strip()), n)
    return index


def parse_config(source: str | Path) -> ExperimentConfig:
    """Parse a config document given as text or as a path to a file."""
    if isinstance(source, Path) or ("\n" not in source and source.strip() and Path(source).is_file()):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = str(source)
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", line=exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key in [{exc.section}]", exc.option, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", line=exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc.message}") from None

    doc: dict[str, Any] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section != "experiment" and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", line=lines.get((section, None)))
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if (section, key) not in FIELD_TYPES:
                raise ConfigError(f"unknown key in [{section}]", key, line)
            try:
                value = convert_value(section, key, raw)
            except ValueError as exc:
                raise ConfigError(f"type error: {exc}", key, line) from None
            if section == "experiment":
                doc[key] = value
            else:
                doc[section][key] = value
    try:
        return ExperimentConfig.from_dict(doc)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        key, line = _blame(str(exc), doc, lines)
        raise ConfigError(f"invalid config: {exc}", key, line) from None


def _blame(message: str, doc: dict[str, Any], lines: dict) -> tuple[str | None, int | None]:
    """Find the key behind an invariant violation.

    Each user-set key is tried alone on top of the defaults; the first one
    that fails by itself is blamed. Cross-key violations fall back to a key
    named in the message.
    """
    for section, klass in SECTIONS.items():
        for key, value in doc.get(section, {}).items():
            try:
                klass(**{key: value})
            except (ValueError, TypeError):
                return key, lines.get((section, key))
    for section, key in FIELD_TYPES:
        present = key in doc if section == "experiment" else key in doc.get(section, {})
        if present and re.search(rf"\b{re.escape(key)}\b", message):
            return key, lines.get((section, key))
    return None, None


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    doc = cfg.to_dict()
    out = ["[experiment]"]
    out += [f"{k} = {_format_value(doc[k])}" for k in _EXPERIMENT_KEYS]
    for name in SECTIONS:
        out += ["", f"[{name}]"]
        out += [f"{k} = {_format_value(v)}" for k, v in doc[name].items()]
    return "\n".join(out) + "\n"
