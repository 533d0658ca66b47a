"""INI-style run configuration: typed sections, ``--set`` overrides, snapshots.

Each section maps onto a dataclass. Values are parsed according to the
field's default type, so the file stays plain ``key = value`` text.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, KpBankError
from .synthetic import GeneratorConfig
from .trainer import TrainConfig


@dataclass
class GenerateSection:
    train_count: int = 500
    test_count: int = 100
    test_start: int = 100_000  # scene index offset keeps test scenes disjoint from train
    levels: tuple = (0, 1, 2, 3)
    occlusion_seed: int = 7


@dataclass
class EvalSection:
    threshold: float = 0.1


@dataclass
class InferSection:
    split: str = "test_lv0"
    visualize: int = 4  # number of images that get heatmaps and overlays
    batch_size: int = 32


@dataclass
class OracleSection:
    num_scenes: int = 20
    updates: int = 200
    angle_tol_deg: float = 1.0
    clutter_tol: float = 1e-9
    min_rank_correlation: float = 0.5


@dataclass
class PathsSection:
    data: str = ""
    checkpoint: str = ""
    predictions: str = ""


SECTIONS = {
    "generator": GeneratorConfig,
    "generate": GenerateSection,
    "train": TrainConfig,
    "eval": EvalSection,
    "infer": InferSection,
    "oracle": OracleSection,
    "paths": PathsSection,
}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):  # layer specs: "16:5:1:1, 32:3:2:1"
                return tuple(tuple(int(v) for v in item.split(":")) for item in raw.split(",") if item.strip())
            items = [v for v in raw.replace(" ", "").split(",") if v]
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(":".join(str(v) for v in item) for item in value)
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    generate: GenerateSection = field(default_factory=GenerateSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    infer: InferSection = field(default_factory=InferSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in dataclasses.fields(section)}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in parser[name].items())
            lines.append("")
        return "\n".join(lines)

    def snapshot(self, out_dir) -> Path:
        path = Path(out_dir) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _resolve_key(key: str) -> tuple[str, str]:
    """``section.key`` or a bare key that exists in exactly one section."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigError(f"unknown key {name!r} in section [{section}]")
        return section, name
    owners = [s for s, cls in SECTIONS.items() if key in {f.name for f in dataclasses.fields(cls)}]
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"key {key!r} is ambiguous, qualify it as one of {[f'{s}.{key}' for s in owners]}")
    return owners[0], key


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the file, then ``--seed``, then ``key=value`` overrides."""
    values = {name: {} for name in SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser[section].items():
                values[_resolve_key(f"{section}.{key}")[0]][key] = raw
    if seed is not None:
        values["generator"]["seed"] = str(seed)
        values["train"]["seed"] = str(seed)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        section, name = _resolve_key(key.strip())
        values[section][name] = raw

    sections = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        kwargs = {k: _parse_value(v, getattr(defaults, k), f"{name}.{k}") for k, v in values[name].items()}
        try:
            sections[name] = cls(**kwargs)
        except KpBankError as exc:
            raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"invalid [{name}] section: {exc}") from exc
    return RunConfig(**sections)
