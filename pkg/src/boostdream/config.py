"""Run configuration: JSON file + flag overrides, validated up front."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .cameras import CameraRanges
from .errors import ConfigError
from .guidance import GuidanceConfig

# Fixed rig used when targets are a fixed image set: matches the default
# turntable camera so `render-turntable --frames 4` output is directly
# usable as --target-dir input.
FIXED_RIG_ELEVATION = 15.0
FIXED_RIG_AZIMUTH = 0.0
FIXED_RIG_FOV = 50.0
FIXED_RIG_DISTANCE = 3.1


@dataclass
class RunConfig:
    # inputs / outputs
    mesh: str | None = None
    prompt: str = ""
    out_dir: str | None = None
    seed: int = 0

    # guidance backend
    backend: str = "analytic"  # analytic | remote
    endpoint: str = ""
    target_dir: str | None = None
    target_field: str | None = None

    # stage schedule
    distill_iters: int = 200
    boost_iters: int = 1800
    self_boost_iters: int = 3000
    lr_distill: float = 0.05
    lr_boost: float = 0.01
    lr_self_boost: float = 0.01
    orient_weight: float = 0.01
    opacity_weight: float = 0.001
    normal_source_boost: str = "mesh"  # mesh | fitted-field
    per_view_size: int = 64
    views_per_iter: int = 4

    # field / renderer
    resolution: int = 32
    n_samples: int = 64
    background: tuple = (1.0, 1.0, 1.0)
    init_mode: str = "blob"

    # camera sampling
    elevation_range: tuple = (-10.0, 70.0)
    azimuth_range: tuple = (0.0, 360.0)
    fov_range: tuple = (40.0, 70.0)
    distance_range: tuple = (2.8, 3.4)
    rotation_angle_deg: float = 90.0
    rig_mode: str = "random"  # random | fixed

    # diffusion
    cfg_scale: float = 7.5
    control_strength: float = 1.0
    t_range: tuple = (0.02, 0.98)
    w_mode: str = "sigma2"
    fixed_timestep: int | None = None
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    # operational
    skip_budget: int = 3
    remote_timeout: float = 60.0
    remote_retries: int = 2
    turntable_frames: int = 8

    def camera_ranges(self) -> CameraRanges:
        return CameraRanges(
            elevation_deg=tuple(self.elevation_range),
            azimuth_deg=tuple(self.azimuth_range),
            fov_deg=tuple(self.fov_range),
            distance=tuple(self.distance_range),
        )

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(
            prompt=self.prompt,
            control_strength=self.control_strength,
            cfg_scale=self.cfg_scale,
            t_range=tuple(self.t_range),
            w_mode=self.w_mode,
            fixed_t=self.fixed_timestep,
        )

    def validate(self) -> None:
        def check(cond, key, why):
            if not cond:
                raise ConfigError(f"config key '{key}': {why}")

        check(self.backend in ("analytic", "remote"), "backend",
              f"must be 'analytic' or 'remote', got {self.backend!r}")
        for key in ("distill_iters", "boost_iters", "self_boost_iters"):
            check(getattr(self, key) >= 0, key, "iteration count must be >= 0")
        for key in ("lr_distill", "lr_boost", "lr_self_boost"):
            check(getattr(self, key) > 0, key, "learning rate must be > 0")
        for key in ("orient_weight", "opacity_weight"):
            check(getattr(self, key) >= 0, key, "loss weight must be >= 0")
        check(self.normal_source_boost in ("mesh", "fitted-field"), "normal_source_boost",
              f"must be 'mesh' or 'fitted-field', got {self.normal_source_boost!r}")
        check(self.per_view_size >= 8 and self.per_view_size % 2 == 0, "per_view_size",
              "must be even and >= 8")
        check(self.views_per_iter == 4, "views_per_iter",
              "the composite layout is 2x2; only 4 views are supported")
        check(self.resolution >= 2, "resolution", "must be >= 2")
        check(self.n_samples >= 1, "n_samples", "must be >= 1")
        check(len(tuple(self.background)) == 3, "background", "must be an RGB triple")
        check(self.init_mode in ("blob", "empty"), "init_mode",
              f"must be 'blob' or 'empty', got {self.init_mode!r}")
        for key in ("elevation_range", "azimuth_range", "fov_range", "distance_range", "t_range"):
            rng = tuple(getattr(self, key))
            check(len(rng) == 2, key, "must be a (min, max) pair")
            check(rng[0] <= rng[1], key, f"min {rng[0]} > max {rng[1]}")
        check(0.0 < self.rotation_angle_deg < 360.0, "rotation_angle_deg",
              "must lie in (0, 360)")
        check(self.rig_mode in ("random", "fixed"), "rig_mode",
              f"must be 'random' or 'fixed', got {self.rig_mode!r}")
        check(self.cfg_scale >= 0, "cfg_scale", "must be >= 0")
        check(0.0 <= self.control_strength <= 1.0, "control_strength", "must lie in [0, 1]")
        check(self.w_mode in ("sigma2", "uniform"), "w_mode",
              f"must be 'sigma2' or 'uniform', got {self.w_mode!r}")
        check(self.diffusion_steps >= 2, "diffusion_steps", "must be >= 2")
        check(0.0 < self.beta_start <= self.beta_end < 1.0, "beta_start",
              "betas must satisfy 0 < start <= end < 1")
        if self.fixed_timestep is not None:
            check(1 <= self.fixed_timestep <= self.diffusion_steps, "fixed_timestep",
                  f"must lie in [1, {self.diffusion_steps}]")
        check(self.skip_budget >= 0, "skip_budget", "must be >= 0")
        check(self.turntable_frames >= 1, "turntable_frames", "must be >= 1")
        if self.target_dir is not None and self.target_field is not None:
            raise ConfigError("config key 'target_dir': set either target_dir or "
                              "target_field, not both")

    def resolved(self) -> "RunConfig":
        """Apply cross-field policies (fixed-image targets imply a fixed rig)."""
        if self.target_dir is not None and self.rig_mode != "fixed":
            return dataclasses.replace(self, rig_mode="fixed")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value):
    """Light type normalization so JSON and flag values land correctly."""
    if value is None:
        return None
    default = _FIELD_TYPES[key].default
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"config key '{key}': expected an integer, got {value}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(value)
    return value


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file <- explicit overrides; unknown keys rejected."""
    values: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        values.update(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    try:
        cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    cfg = cfg.resolved()
    cfg.validate()
    return cfg
