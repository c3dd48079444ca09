"""Camera sampling and the four-view orbit rig.

World convention (shared by every module): right-handed, Z-up, azimuth
measured from +X toward +Y, elevation from the XY plane toward +Z.
Cameras always target the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Up-vector fallback threshold: |view . up| above this means the camera is
# looking straight along the pole and +Z is unusable.
_UP_DEGENERATE = 0.999


@dataclass(frozen=True)
class CameraSample:
    """Base camera draw in spherical coordinates."""

    elevation_deg: float
    azimuth_deg: float
    fov_deg: float
    distance: float

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"camera distance must be positive, got {self.distance}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov must lie strictly inside (0, 180), got {self.fov_deg}")


@dataclass(frozen=True)
class RotationSpec:
    """Orbit axis (unit vector through the origin) and step angle."""

    axis: np.ndarray
    angle_deg: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        norm = float(np.linalg.norm(axis))
        if norm <= 1e-8:
            raise ValueError("rotation axis is numerically zero")
        object.__setattr__(self, "axis", axis / norm)
        if not 0.0 < self.angle_deg < 360.0:
            raise ValueError(f"rotation angle must lie in (0, 360), got {self.angle_deg}")


@dataclass(frozen=True)
class CameraPose:
    """Look-at pinhole camera over a square image."""

    position: np.ndarray
    target: np.ndarray
    up: np.ndarray
    fov_deg: float
    image_size: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64))
        if np.allclose(self.position, self.target):
            raise ValueError("camera position coincides with its target")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward) triple; forward points at the target."""
        forward = self.target - self.position
        forward = forward / np.linalg.norm(forward)
        up_hint = self.up / np.linalg.norm(self.up)
        if abs(float(np.dot(forward, up_hint))) > _UP_DEGENERATE:
            up_hint = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up_hint)
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return right, true_up, forward


@dataclass(frozen=True)
class MultiViewRig:
    """Base sample, orbit spec, and the derived camera poses."""

    base: CameraSample
    rotation: RotationSpec
    poses: tuple[CameraPose, ...]


@dataclass(frozen=True)
class CameraRanges:
    """Uniform sampling ranges for the base camera."""

    elevation_deg: tuple[float, float] = (-10.0, 70.0)
    azimuth_deg: tuple[float, float] = (0.0, 360.0)
    # Narrower than the physically admissible (0, 180): extreme fields of view
    # degenerate the pinhole model. Widen via config if needed.
    fov_deg: tuple[float, float] = (40.0, 70.0)
    distance: tuple[float, float] = (2.8, 3.4)

    def __post_init__(self):
        for name in ("elevation_deg", "azimuth_deg", "fov_deg", "distance"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"camera range {name} is degenerate: min {lo} > max {hi}")


def sample_camera(ranges: CameraRanges, rng: np.random.Generator) -> CameraSample:
    """Draw a base camera uniformly from the configured ranges."""
    return CameraSample(
        elevation_deg=float(rng.uniform(*ranges.elevation_deg)),
        azimuth_deg=float(rng.uniform(*ranges.azimuth_deg)),
        fov_deg=float(rng.uniform(*ranges.fov_deg)),
        distance=float(rng.uniform(*ranges.distance)),
    )


def sample_rotation_axis(rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the unit sphere."""
    while True:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm


def spherical_to_position(sample: CameraSample) -> np.ndarray:
    """p = d * (cos(el) cos(az), cos(el) sin(az), sin(el))."""
    el = np.deg2rad(sample.elevation_deg)
    az = np.deg2rad(sample.azimuth_deg)
    return sample.distance * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )


def skew_matrix(axis: np.ndarray) -> np.ndarray:
    """Cross-product matrix K such that K v = axis x v."""
    ax, ay, az = np.asarray(axis, dtype=np.float64)
    return np.array([[0.0, -az, ay], [az, 0.0, -ax], [-ay, ax, 0.0]])


def rotation_matrix(spec: RotationSpec, angle_deg: float | None = None) -> np.ndarray:
    """Axis-angle rotation, R = I + sin(a) K + (1 - cos(a)) K^2.

    ``angle_deg`` overrides the spec's own angle (used for multiples of the
    orbit step).
    """
    a = np.deg2rad(spec.angle_deg if angle_deg is None else angle_deg)
    k = skew_matrix(spec.axis)
    return np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k)


def orbit_positions(p0: np.ndarray, spec: RotationSpec, count: int = 4) -> list[np.ndarray]:
    """position[i] = R(axis, i*angle) p0, with position[0] = p0 exactly."""
    if count < 1:
        raise ValueError(f"orbit count must be >= 1, got {count}")
    p0 = np.asarray(p0, dtype=np.float64)
    out = [p0.copy()]
    for i in range(1, count):
        out.append(rotation_matrix(spec, angle_deg=i * spec.angle_deg) @ p0)
    return out


def build_rig(
    sample: CameraSample,
    spec: RotationSpec,
    image_size: int,
    count: int = 4,
) -> MultiViewRig:
    """Assemble the orbit rig: look-at poses through every rotated position."""
    p0 = spherical_to_position(sample)
    positions = orbit_positions(p0, spec, count=count)
    poses = tuple(
        CameraPose(
            position=p,
            target=np.zeros(3),
            up=np.array([0.0, 0.0, 1.0]),
            fov_deg=sample.fov_deg,
            image_size=image_size,
        )
        for p in positions
    )
    return MultiViewRig(base=sample, rotation=spec, poses=poses)


def generate_rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, row-major over the image.

    Pixel (ix, iy) maps to NDC ((ix+0.5)/W*2-1, 1-(iy+0.5)/H*2); +y NDC is up.
    """
    right, up, forward = pose.basis()
    n = pose.image_size
    half = np.tan(np.deg2rad(pose.fov_deg) / 2.0)
    px = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    ndc_x, ndc_y = np.meshgrid(px, -px, indexing="xy")
    dirs = (
        forward[None, None, :]
        + ndc_x[..., None] * half * right[None, None, :]
        + ndc_y[..., None] * half * up[None, None, :]
    )
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def world_to_camera_matrix(pose: CameraPose) -> np.ndarray:
    """Rows (right, up, -forward): maps world directions into camera space.

    Camera space is OpenGL-like: +x right, +y up, the view axis along -z, so
    a surface normal pointing at the camera lands on (0, 0, 1).
    """
    right, up, forward = pose.basis()
    return np.stack([right, up, -forward])
