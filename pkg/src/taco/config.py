"""Key-value run configuration files.

Sections mirror the config dataclasses: ``[scenario]``, ``[trigger]``,
``[matcher]``, ``[imu]``, ``[pipeline]`` and ``[replay]``. Keys are field
names. Waypoints are written ``x,y; x,y; ...`` and blackouts
``start,end; start,end``. ``[scenario] preset = reference | ablation``
starts from a stock scenario before applying the other keys.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cvgl import SimMatcherConfig
from .geometry import Pose2
from .imu import ImuCalibration
from .simulation import ABLATION_MATCHER, PipelineOptions, ScenarioConfig, ablation_scenario, reference_scenario
from .trigger import TriggerConfig


class ConfigError(ValueError):
    """A config value could not be parsed; the message names the field."""


PRESETS = {"reference": reference_scenario, "ablation": ablation_scenario}
PRESET_MATCHERS = {"reference": SimMatcherConfig(), "ablation": ABLATION_MATCHER}


@dataclass
class RunConfig:
    scenario: ScenarioConfig | None = None
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    matcher: SimMatcherConfig = field(default_factory=SimMatcherConfig)
    calibration: ImuCalibration | None = None
    options: PipelineOptions = field(default_factory=PipelineOptions)
    origin: Pose2 | None = None
    frame_ratio: int | None = None

    def resolved_calibration(self) -> ImuCalibration:
        if self.calibration is not None:
            return self.calibration
        sigma = self.scenario.gyro_noise if self.scenario is not None else 0.002
        return ImuCalibration(sigma_omega=max(sigma, 1e-4))

    def resolved_frame_ratio(self) -> int:
        if self.frame_ratio is not None:
            return self.frame_ratio
        return self.scenario.frame_ratio if self.scenario is not None else 10


def _pairs(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected 'a,b', got {chunk!r}")
        out.append((float(parts[0]), float(parts[1])))
    return tuple(out)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.replace(";", ",").split(",") if p.strip())


_BOOLS = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}


def _convert(kind, text: str):
    if kind is bool:
        try:
            return _BOOLS[text.strip().lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {text!r}") from None
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text.strip()
    raise TypeError(kind)


_SPECIAL = {
    ("scenario", "waypoints"): _pairs,
    ("scenario", "blackouts"): _pairs,
    ("scenario", "speed_profile"): _floats,
}


def _build(section: str, cls, items: dict[str, str], base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown field")
        try:
            if (section, key) in _SPECIAL:
                kwargs[key] = _SPECIAL[(section, key)](text)
            else:
                kwargs[key] = _convert(hints[key], text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"scenario", "trigger", "matcher", "imu", "pipeline", "replay"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"{sec}: unknown section")

    cfg = RunConfig()
    preset = None
    if parser.has_section("scenario"):
        items = dict(parser.items("scenario"))
        preset = items.pop("preset", None)
        base = None
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"scenario.preset: unknown preset {preset!r}")
            base = PRESETS[preset]()
        elif "waypoints" not in items:
            raise ConfigError("scenario.waypoints: required unless a preset is given")
        cfg.scenario = _build("scenario", ScenarioConfig, items, base)
    if parser.has_section("trigger"):
        cfg.trigger = _build("trigger", TriggerConfig, dict(parser.items("trigger")))
    matcher_base = PRESET_MATCHERS.get(preset) if preset else None
    if parser.has_section("matcher"):
        cfg.matcher = _build("matcher", SimMatcherConfig, dict(parser.items("matcher")), matcher_base)
    elif matcher_base is not None:
        cfg.matcher = matcher_base
    if parser.has_section("imu"):
        cfg.calibration = _build("imu", ImuCalibration, dict(parser.items("imu")))
    if parser.has_section("pipeline"):
        cfg.options = _build("pipeline", PipelineOptions, dict(parser.items("pipeline")))
    if parser.has_section("replay"):
        items = dict(parser.items("replay"))
        for key in items:
            if key not in ("origin", "frame_ratio"):
                raise ConfigError(f"replay.{key}: unknown field")
        if "origin" in items:
            try:
                vals = _floats(items["origin"])
                if len(vals) != 3:
                    raise ValueError("expected 'x, y, theta'")
                cfg.origin = Pose2(*vals)
            except ValueError as exc:
                raise ConfigError(f"replay.origin: {exc}") from exc
        if "frame_ratio" in items:
            try:
                cfg.frame_ratio = int(items["frame_ratio"])
                if cfg.frame_ratio < 1:
                    raise ValueError("must be at least 1")
            except ValueError as exc:
                raise ConfigError(f"replay.frame_ratio: {exc}") from exc
    return cfg


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(f"{a!r},{b!r}" for a, b in value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    sections = [("scenario", cfg.scenario), ("trigger", cfg.trigger), ("matcher", cfg.matcher),
                ("imu", cfg.calibration), ("pipeline", cfg.options)]
    for name, obj in sections:
        if obj is None:
            continue
        parser[name] = {f.name: _render(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if name == "scenario" and not obj.blackouts:
            del parser[name]["blackouts"]
    replay = {}
    if cfg.origin is not None:
        replay["origin"] = ", ".join(repr(float(v)) for v in cfg.origin.as_array())
    if cfg.frame_ratio is not None:
        replay["frame_ratio"] = str(cfg.frame_ratio)
    if replay:
        parser["replay"] = replay
    with open(path, "w") as fh:
        parser.write(fh)
