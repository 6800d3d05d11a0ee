"""INI run configuration.

Sections map onto the library dataclasses: ``[trainer]`` onto RunConfig,
``[channel]``, ``[schedule]``, ``[task]`` and ``[loss]`` onto their own
types, ``[verify]`` onto VerifyOptions and ``[rate]`` onto RateOptions.
Missing keys keep the dataclass defaults; unknown sections or keys are
errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .channel import ChannelConfig
from .checks import VerifyOptions
from .core_model import LossModel
from .estimators import TheoryConstants
from .schedules import Schedule
from .trainer import RunConfig, TaskConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class RateOptions:
    horizons: tuple[int, ...] = (125, 250, 500, 1000, 2000)
    burn_in: int = 0
    max_divergence: float = 0.2
    lower: float = -0.8
    upper: float = -0.3


@dataclass(frozen=True)
class Experiment:
    run: RunConfig = field(default_factory=RunConfig)
    verify: VerifyOptions = field(default_factory=VerifyOptions)
    rate: RateOptions = field(default_factory=RateOptions)


_TRAINER_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"schedule", "channel", "loss", "task"}
_SECTIONS = {
    "trainer": None,
    "channel": ChannelConfig,
    "schedule": Schedule,
    "task": TaskConfig,
    "loss": LossModel,
    "verify": VerifyOptions,
    "rate": RateOptions,
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _coerce(cls, name: str, text: str):
    f = {f.name: f for f in dataclasses.fields(cls)}[name]
    default = f.default
    if default is dataclasses.MISSING or default is None:
        ann = str(f.type)
        default = 0.0 if ann.startswith("float") else 0 if ann.startswith("int") else ""
    if (cls, name) == (ChannelConfig, "sigma_h"):
        vals = _floats(text)
        return vals[0] if len(vals) == 1 else vals
    if (cls, name) == (ChannelConfig, "slot_sigma_n"):
        return _floats(text) if text.strip() else None
    if (cls, name) == (TaskConfig, "seed"):
        return int(text) if text.strip() else None
    if (cls, name) == (RateOptions, "horizons"):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _build(cls, items: dict[str, str], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            kwargs[key] = _coerce(cls, key, text)
        except ValueError as err:
            raise ConfigError(f"[{section}] {key}: {err}") from err
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}]: {err}") from err


def parse_experiment(text: str) -> Experiment:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    parts = {}
    for name, cls in _SECTIONS.items():
        if cls is None or not parser.has_section(name):
            continue
        parts[name] = _build(cls, dict(parser.items(name)), name)
    trainer = dict(parser.items("trainer")) if parser.has_section("trainer") else {}
    for key in trainer:
        if key not in _TRAINER_KEYS:
            raise ConfigError(f"unknown key {key!r} in [trainer]")
    kwargs = {}
    for key, text in trainer.items():
        try:
            kwargs[key] = _coerce(RunConfig, key, text)
        except ValueError as err:
            raise ConfigError(f"[trainer] {key}: {err}") from err
    for name in ("channel", "schedule", "task", "loss"):
        if name in parts:
            kwargs[name] = parts[name]
    try:
        run = RunConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[trainer]: {err}") from err
    return Experiment(run, parts.get("verify", VerifyOptions()), parts.get("rate", RateOptions()))


def load_experiment(path: str | Path | None) -> Experiment:
    if path is None:
        return Experiment()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_experiment(p.read_text())


@dataclass(frozen=True)
class BoundInputs:
    """Everything the iteration-count calculators need."""

    constants: TheoryConstants
    sigma_h: float | tuple[float, ...] = 1.0
    gamma: float = 0.0
    eta0: float = 1.0
    gamma0: float = 1.0
    late: tuple[int, ...] = ()


def load_bound_inputs(path: str | Path) -> BoundInputs:
    """Read ``[constants]`` (TheoryConstants fields) and ``[bound]`` (the rest)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"constants file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(p.read_text())
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    for name in parser.sections():
        if name not in ("constants", "bound"):
            raise ConfigError(f"unknown section [{name}]")
    if not parser.has_section("constants"):
        raise ConfigError("constants file needs a [constants] section")
    const = _build(TheoryConstants, dict(parser.items("constants")), "constants")
    rest = dict(parser.items("bound")) if parser.has_section("bound") else {}
    kwargs = {}
    for key, text in rest.items():
        if key == "late":
            kwargs[key] = tuple(int(v) for v in text.replace(",", " ").split())
        elif key == "sigma_h":
            vals = _floats(text)
            kwargs[key] = vals[0] if len(vals) == 1 else vals
        elif key in ("gamma", "eta0", "gamma0"):
            kwargs[key] = float(text)
        else:
            raise ConfigError(f"unknown key {key!r} in [bound]")
    return BoundInputs(const, **kwargs)


def to_dict(obj):
    """JSON-ready view of a config dataclass tree."""
    return dataclasses.asdict(obj)
