"""Experiment configuration files.

A config is a JSON object; every key is optional and unknown keys are
rejected at every nesting level so typos fail loudly instead of silently
running defaults.  String scene names refer to bundled presets; a dict with
a `path` loads a scene file instead.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import presets
from .control import ControlConfig, ScanCommand, command_from_world
from .evaluation import ManualOperatorModel
from .perception import SensorSuite
from .scene import Scene, load_scene

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {', '.join(unknown)}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )


@dataclass(frozen=True)
class CalibrationSettings:
    dt: float = 1.0 / 30.0
    span: float = 40.0
    heights: tuple = (2.0, 8.0, 16.0)
    n_clusters: int = 5
    temperature: float = 1.0
    estimator: str = "gmm"      # or "kmeans"
    holdout_every: int = 5

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationSettings":
        _check_keys(doc, {f.name for f in dataclasses.fields(cls)}, "calibration")
        if "heights" in doc:
            doc = dict(doc, heights=tuple(float(h) for h in doc["heights"]))
        obj = cls(**doc)
        if obj.estimator not in ("gmm", "kmeans"):
            raise ConfigError(
                f"calibration.estimator must be 'gmm' or 'kmeans', got {obj.estimator!r}"
            )
        return obj


@dataclass(frozen=True)
class ManualSettings:
    repeats: int = 5
    duration: float = 30.0
    mean_offset: float = -0.5
    sigma_hand: float = presets.HAND_TREMOR_SIGMA
    sigma_perp: float = 2.0

    @classmethod
    def from_dict(cls, doc: dict) -> "ManualSettings":
        _check_keys(doc, {f.name for f in dataclasses.fields(cls)}, "manual")
        return cls(**doc)

    def model(self) -> ManualOperatorModel:
        return ManualOperatorModel(
            mean_offset=self.mean_offset,
            sigma_hand=self.sigma_hand,
            sigma_perp=self.sigma_perp,
            duration=self.duration,
        )


_TOP_KEYS = {
    "format_version",
    "scene",
    "sensors",
    "preset",
    "control",
    "line",
    "start_position",
    "estimator_path",
    "seed",
    "repeats",
    "min_success_rate",
    "calibration",
    "manual",
}

_CONTROL_FIELDS = {f.name for f in dataclasses.fields(ControlConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    scene: object = "default"            # preset name or {"path": ...}
    sensors: str = "default"             # "default" | "noiseless"
    preset: str = "default"
    control: dict = field(default_factory=dict)
    line: dict | None = None             # {"world": [[x,y],[x,y]]} or {"px": [...]}
    start_position: tuple = presets.DEFAULT_START_POSITION
    estimator_path: str | None = None
    seed: int = 0
    repeats: int | None = None
    min_success_rate: float = 0.85
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    manual: ManualSettings = field(default_factory=ManualSettings)

    # ---- construction ----

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
        _check_keys(doc, _TOP_KEYS, "config")
        version = doc.get("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported config format_version {version!r}, "
                f"expected {CONFIG_FORMAT_VERSION}"
            )
        kw: dict = {}
        for key in ("scene", "preset", "estimator_path"):
            if key in doc:
                kw[key] = doc[key]
        if "sensors" in doc:
            if doc["sensors"] not in ("default", "noiseless"):
                raise ConfigError(
                    f"sensors must be 'default' or 'noiseless', got {doc['sensors']!r}"
                )
            kw["sensors"] = doc["sensors"]
        if "control" in doc:
            ctrl = doc["control"]
            if not isinstance(ctrl, dict):
                raise ConfigError("control must be an object of field overrides")
            _check_keys(ctrl, _CONTROL_FIELDS, "control")
            kw["control"] = dict(ctrl)
        if "line" in doc and doc["line"] is not None:
            line = doc["line"]
            if not isinstance(line, dict):
                raise ConfigError("line must be an object")
            _check_keys(line, {"world", "px"}, "line")
            if len(line) != 1:
                raise ConfigError("line needs exactly one of 'world' or 'px'")
            (mode, pts), = line.items()
            try:
                (x0, y0), (x1, y1) = pts
            except (TypeError, ValueError):
                raise ConfigError(
                    f"line.{mode} must be [[x0, y0], [x1, y1]]"
                ) from None
            kw["line"] = {mode: [[float(x0), float(y0)], [float(x1), float(y1)]]}
        if "start_position" in doc:
            sp_ = doc["start_position"]
            if not (isinstance(sp_, (list, tuple)) and len(sp_) == 3):
                raise ConfigError("start_position must be [x, y, z]")
            kw["start_position"] = tuple(float(v) for v in sp_)
        for key in ("seed", "repeats"):
            if key in doc and doc[key] is not None:
                if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                    raise ConfigError(f"{key} must be an integer")
                kw[key] = doc[key]
        if "min_success_rate" in doc:
            rate = float(doc["min_success_rate"])
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("min_success_rate must be in [0, 1]")
            kw["min_success_rate"] = rate
        if "calibration" in doc:
            if not isinstance(doc["calibration"], dict):
                raise ConfigError("calibration must be an object")
            kw["calibration"] = CalibrationSettings.from_dict(doc["calibration"])
        if "manual" in doc:
            if not isinstance(doc["manual"], dict):
                raise ConfigError("manual must be an object")
            kw["manual"] = ManualSettings.from_dict(doc["manual"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    # ---- resolution into runtime objects ----

    def make_scene(self) -> Scene:
        if isinstance(self.scene, str):
            try:
                return presets.make_scene(self.scene)
            except KeyError as exc:
                raise ConfigError(str(exc)) from exc
        if isinstance(self.scene, dict):
            _check_keys(self.scene, {"path"}, "scene")
            if "path" not in self.scene:
                raise ConfigError("scene object needs a 'path'")
            return load_scene(self.scene["path"])
        raise ConfigError("scene must be a preset name or {'path': ...}")

    def make_sensors(self, scene: Scene) -> SensorSuite:
        return presets.sensor_suite(scene, noiseless=self.sensors == "noiseless")

    def make_control(self) -> ControlConfig:
        try:
            base = presets.control_preset(self.preset)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.control:
            return base
        try:
            return dataclasses.replace(base, **self.control)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad control override: {exc}") from exc

    def make_command(self, scene: Scene) -> ScanCommand:
        if self.line is None:
            return presets.default_command_line(scene)
        if "px" in self.line:
            (u0, v0), (u1, v1) = self.line["px"]
            return ScanCommand(start=(u0, v0), end=(u1, v1))
        (x0, y0), (x1, y1) = self.line["world"]
        g = scene.surface.height
        return command_from_world(
            scene, (x0, y0, float(g(x0, y0))), (x1, y1, float(g(x1, y1)))
        )

    def world_line(self) -> tuple:
        """World-frame xy endpoints of the scan line.  Hand-held scans run in
        world coordinates, so a pixel-only line cannot drive them."""
        if self.line is None:
            return presets.COMMAND_WORLD
        if "world" in self.line:
            (x0, y0), (x1, y1) = self.line["world"]
            return ((x0, y0), (x1, y1))
        raise ConfigError("manual scans need a world-frame line, got pixel endpoints")

    def effective_repeats(self) -> int:
        if self.repeats is not None:
            return self.repeats
        return presets.PRESET_REPEATS.get(self.preset, 5)

    def describe(self) -> dict:
        """Plain-JSON view of the fully resolved settings."""
        control = self.make_control()
        return {
            "format_version": CONFIG_FORMAT_VERSION,
            "scene": self.scene,
            "sensors": self.sensors,
            "preset": self.preset,
            "control": dataclasses.asdict(control),
            "line": self.line,
            "start_position": list(self.start_position),
            "estimator_path": self.estimator_path,
            "seed": self.seed,
            "repeats": self.effective_repeats(),
            "min_success_rate": self.min_success_rate,
            "calibration": dataclasses.asdict(self.calibration),
            "manual": dataclasses.asdict(self.manual),
        }
