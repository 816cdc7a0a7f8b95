"""Run configuration: dataclass defaults plus a strict ``key = value`` file format.

Files are INI-style with one section per dataclass::

    [run]
    seed = 7
    [channel]
    velocity_kmh = 60

Unknown sections or keys are rejected, values are cast to the type of the
field default, and errors name the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .channel import ChannelConfig
from .handover import HandoverConfig
from .transformer import TransformerConfig

SCENARIOS = ("estimate", "train", "transfer", "handover-sweep", "complexity-sweep", "theory-check")
OUT_ENV = "NOMA_DEEPSIC_OUT"
DEFAULT_OUT = "noma_deepsic_out"


class UnknownKey(KeyError):
    pass


class ConfigValueError(TypeError):
    pass


@dataclass(frozen=True)
class NomaSettings:
    powers: tuple = (0.2, 0.8)
    snr_db: float = 0.0
    n_pilot: int = 4
    n_data: int = 32
    refine_iters: int = 20
    outer_rounds: int = 2


@dataclass(frozen=True)
class EstimateSettings:
    snr_grid: tuple = (-5.0, 0.0, 5.0, 10.0)
    epochs: int = 100
    # transfer: source operating point of the backbone
    source_snr_db: float = 10.0


@dataclass(frozen=True)
class SweepSettings:
    velocities: tuple = (0.0, 30.0, 60.0, 90.0, 120.0)
    filter_steps: int = 200
    pdd_filter_steps: int = 3
    estimate_delay: int = 1


@dataclass(frozen=True)
class ComplexitySettings:
    k_min: int = 1
    k_max: int = 8


@dataclass(frozen=True)
class RunSettings:
    scenario: str = "estimate"
    seed: int = 0
    trials: int = 0          # 0: scenario default
    output_dir: str = ""     # empty: $NOMA_DEEPSIC_OUT, then ./noma_deepsic_out
    jobs: int = 1
    strict: bool = False


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    noma: NomaSettings = field(default_factory=NomaSettings)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    handover: HandoverConfig = field(default_factory=HandoverConfig)
    estimate: EstimateSettings = field(default_factory=EstimateSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    complexity: ComplexitySettings = field(default_factory=ComplexitySettings)

    @property
    def scenario(self) -> str:
        return self.run.scenario

    @property
    def seed(self) -> int:
        return self.run.seed

    def resolved_output_dir(self) -> Path:
        return Path(self.run.output_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _cast(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(",", " ").split() if t]
            kind = type(default[0]) if default else float
            return tuple(kind(float(t)) if kind is int else kind(t) for t in items)
        if default is None:
            return None if text.lower() in ("", "none") else int(text)
        return text
    except ValueError as exc:
        raise ConfigValueError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from exc


def _section_obj(cfg: RunConfig, section: str):
    if section not in SECTIONS:
        raise UnknownKey(f"unknown section [{section}]")
    return getattr(cfg, section)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """``overrides`` maps ``"section.key"`` to a string or an already typed value."""
    grouped: dict[str, dict] = {}
    for path, value in overrides.items():
        if "." not in path:
            raise UnknownKey(f"{path}: expected section.key")
        section, key = path.split(".", 1)
        obj = _section_obj(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if key not in names:
            raise UnknownKey(f"unknown key {section}.{key}")
        default = getattr(obj, key)
        grouped.setdefault(section, {})[key] = _cast(value, default, path) if isinstance(value, str) else value
    changes = {}
    for section, kv in grouped.items():
        try:
            changes[section] = dataclasses.replace(getattr(cfg, section), **kv)
        except (ValueError, TypeError) as exc:
            raise ConfigValueError(f"[{section}] {exc}") from exc
    out = dataclasses.replace(cfg, **changes)
    if out.run.scenario not in SCENARIOS:
        raise ConfigValueError(f"run.scenario: must be one of {SCENARIOS}")
    return out


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` strictly, then apply CLI ``overrides`` on top."""
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigValueError(f"{path}: {exc}") from exc
    flat = {}
    for section in parser.sections():
        _section_obj(RunConfig(), section)
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    cfg = apply_overrides(RunConfig(), flat)
    return apply_overrides(cfg, overrides or {})


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used by manifest replay)."""
    flat = {}
    for section, values in d.items():
        for key, value in values.items():
            flat[f"{section}.{key}"] = tuple(value) if isinstance(value, list) else value
    return apply_overrides(RunConfig(), flat)
