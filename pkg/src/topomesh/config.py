"""Run configuration, stored as JSON."""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .pipeline import StageSchedule
from .render import RenderSettings

__all__ = ["RunConfig", "ConfigError"]

_PATH_FIELDS = ("cameras", "sequence", "mesh", "texture")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    render: RenderSettings = field(default_factory=RenderSettings)
    densify_n: int = 30
    texture_resolution: int = 1024
    geometry_downscale: float = 1.0
    scene_scale: float | None = None
    seed: int = 0
    # inputs: camera rig JSON, sequence directory (frame_####/cam_##.png), frame-0 OBJ, texture PNG
    cameras: str | None = None
    sequence: str | None = None
    mesh: str | None = None
    texture: str | None = None
    output: str = "out"

    def __post_init__(self):
        if self.densify_n < 2:
            raise ConfigError("densify_n must be >= 2")
        if self.texture_resolution < 1:
            raise ConfigError("texture_resolution must be >= 1")
        if self.geometry_downscale < 1.0:
            raise ConfigError("geometry_downscale must be >= 1")
        if self.scene_scale is not None and self.scene_scale <= 0:
            raise ConfigError("scene_scale must be positive")

    def check_paths(self, *names):
        """Raise ``ConfigError`` naming the first configured input path that does not exist."""
        for name in names or _PATH_FIELDS:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"config field {name!r} is required")
            if not Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "render":
                v = {"alpha_min": v.alpha_min, "t_min": v.t_min, "low_pass": v.low_pass,
                     "near": v.near, "background": list(v.background)}
            elif hasattr(v, "to_dict"):
                v = v.to_dict()
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "loss" in d:
                d["loss"] = LossConfig.from_dict(d["loss"])
            if "schedule" in d:
                d["schedule"] = StageSchedule.from_dict(d["schedule"])
            if "render" in d:
                r = dict(d["render"])
                if "background" in r:
                    r["background"] = tuple(r["background"])
                d["render"] = RenderSettings(**r)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        cfg = cls.from_dict(data)
        # relative input paths are resolved against the config file's directory
        for name in _PATH_FIELDS + ("output",):
            value = getattr(cfg, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg, name, str(path.parent / value))
        return cfg

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
