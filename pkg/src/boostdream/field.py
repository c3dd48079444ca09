"""Trainable voxel radiance field and its differentiable renderer.

Parameters are stored pre-activation: sigma = softplus(density_raw),
rgb = sigmoid(color_raw). Arrays are float32 (matching the on-disk format);
all rendering and gradient math runs in float64.

render / render_normal_map / field_gradient are pure functions of (field,
pose) and safe to call concurrently; gradient accumulation inside the
kernels is single-threaded and therefore deterministic. apply_update
mutates the field in place and requires exclusive access.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .cameras import CameraPose, generate_rays, world_to_camera_matrix
from .errors import FieldFormatError

MAGIC = b"BDF1"
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)
DEFAULT_SAMPLES = 64
# Pre-activation level whose softplus is numerically zero density.
EMPTY_DENSITY = -20.0


@dataclass
class VoxelField:
    resolution: tuple[int, int, int]
    bbox: np.ndarray  # (2, 3): [lo, hi]
    density_raw: np.ndarray  # (Rx, Ry, Rz) float32
    color_raw: np.ndarray  # (Rx, Ry, Rz, 3) float32

    def __post_init__(self):
        rx, ry, rz = self.resolution
        if min(rx, ry, rz) < 2:
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        if self.density_raw.shape != (rx, ry, rz):
            raise ValueError("density_raw shape does not match resolution")
        if self.color_raw.shape != (rx, ry, rz, 3):
            raise ValueError("color_raw shape does not match resolution")

    def copy(self) -> "VoxelField":
        return VoxelField(
            resolution=self.resolution,
            bbox=self.bbox.copy(),
            density_raw=self.density_raw.copy(),
            color_raw=self.color_raw.copy(),
        )


@dataclass
class RenderOutput:
    """Per-pixel render buffers; normals are camera-space unit vectors."""

    color: np.ndarray  # (H, W, 3) in [0, 1]
    opacity: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) world units
    normal: np.ndarray  # (H, W, 3), zero below the visibility threshold
    sample_weights: np.ndarray | None = None  # (H, W, S)
    sample_normal_dot: np.ndarray | None = None  # (H, W, S)


@dataclass
class FieldGradient:
    d_density_raw: np.ndarray
    d_color_raw: np.ndarray

    def __iadd__(self, other: "FieldGradient") -> "FieldGradient":
        self.d_density_raw += other.d_density_raw
        self.d_color_raw += other.d_color_raw
        return self

    def scaled(self, factor: float) -> "FieldGradient":
        return FieldGradient(self.d_density_raw * factor, self.d_color_raw * factor)


def zero_gradient(field: VoxelField) -> FieldGradient:
    return FieldGradient(
        np.zeros(field.density_raw.shape), np.zeros(field.color_raw.shape)
    )


def _default_bbox() -> np.ndarray:
    return np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def init_field(
    resolution: int | tuple[int, int, int],
    seed: int = 0,
    init_mode: str = "blob",
    bbox: np.ndarray | None = None,
) -> VoxelField:
    """Random initialization: a faint centered blob, or near-zero density.

    density_raw ~ N(mu(x), 0.1) where mu peaks at the box center, so the
    very first renders already show a soft silhouette; color_raw ~ N(0, 0.1)
    (mid-gray). "empty" sets density so low the field renders background.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution, resolution)
    rx, ry, rz = resolution
    if min(resolution) < 2:
        raise ValueError(f"resolution must be >= 2 per axis, got {resolution}")
    bbox = _default_bbox() if bbox is None else np.asarray(bbox, dtype=np.float64)

    if init_mode == "empty":
        density = np.full(resolution, EMPTY_DENSITY, dtype=np.float32)
        color = np.zeros((rx, ry, rz, 3), dtype=np.float32)
        return VoxelField(resolution, bbox, density, color)
    if init_mode != "blob":
        raise ValueError(f"unknown init_mode {init_mode!r}")

    rng = np.random.default_rng(seed)
    axes = [np.linspace(bbox[0, k], bbox[1, k], resolution[k]) for k in range(3)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    r2 = xs**2 + ys**2 + zs**2
    mu = -3.0 + 5.0 * np.exp(-r2 / (2.0 * 0.35**2))
    density = (mu + 0.1 * rng.standard_normal(resolution)).astype(np.float32)
    color = (0.1 * rng.standard_normal((rx, ry, rz, 3))).astype(np.float32)
    return VoxelField(resolution, bbox, density, color)


def render(
    field: VoxelField,
    pose: CameraPose,
    n_samples: int = DEFAULT_SAMPLES,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
    want_normal: bool = True,
    want_samples: bool = False,
) -> RenderOutput:
    """Emission-absorption render of the field through a pinhole camera."""
    if pose.image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {pose.image_size}")
    origins, dirs = generate_rays(pose)
    out = kernels.render_rays(
        field.density_raw, field.color_raw, field.bbox, origins, dirs,
        n_samples, np.asarray(background, dtype=np.float64),
        want_normal=want_normal, want_samples=want_samples,
    )
    n = pose.image_size
    normal = out["normal"] @ world_to_camera_matrix(pose).T
    return RenderOutput(
        color=out["color"].reshape(n, n, 3),
        opacity=out["opacity"].reshape(n, n),
        depth=out["depth"].reshape(n, n),
        normal=normal.reshape(n, n, 3),
        sample_weights=out["weights"].reshape(n, n, -1) if want_samples else None,
        sample_normal_dot=out["normal_dot"].reshape(n, n, -1) if want_samples else None,
    )


def encode_normal_map(normal_cam: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """RGB encoding (n+1)/2 blended over a camera-facing background normal.

    Uncovered pixels come out as (0.5, 0.5, 1.0). Shared by the field
    renderer and the mesh rasterizer so their maps are interchangeable.
    """
    bg = np.array([0.0, 0.0, 1.0])
    blended = opacity[..., None] * normal_cam + (1.0 - opacity[..., None]) * bg
    return (blended + 1.0) / 2.0


def render_normal_map(
    field: VoxelField,
    pose: CameraPose,
    n_samples: int = DEFAULT_SAMPLES,
) -> np.ndarray:
    """Normal map in [0,1]^3 with the shared RGB encoding."""
    out = render(field, pose, n_samples=n_samples, want_normal=True)
    return encode_normal_map(out.normal, out.opacity)


def field_gradient(
    field: VoxelField,
    pose: CameraPose,
    dl_dcolor: np.ndarray,
    dl_dopacity: np.ndarray | None = None,
    n_samples: int = DEFAULT_SAMPLES,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> FieldGradient:
    """Exact reverse-mode derivative of render() w.r.t. the raw parameters.

    Only the color and opacity outputs backpropagate; rendered normals are
    stop-gradient on this path.
    """
    n = pose.image_size
    dl_dcolor = np.asarray(dl_dcolor, dtype=np.float64)
    if dl_dcolor.shape != (n, n, 3):
        raise ValueError(f"dl_dcolor shape {dl_dcolor.shape} != {(n, n, 3)}")
    if not np.all(np.isfinite(dl_dcolor)):
        bad = np.argwhere(~np.isfinite(dl_dcolor))[0]
        raise ValueError(f"non-finite color gradient at pixel {tuple(int(b) for b in bad[:2])}")
    if dl_dopacity is not None:
        dl_dopacity = np.asarray(dl_dopacity, dtype=np.float64)
        if dl_dopacity.shape != (n, n):
            raise ValueError(f"dl_dopacity shape {dl_dopacity.shape} != {(n, n)}")
        if not np.all(np.isfinite(dl_dopacity)):
            bad = np.argwhere(~np.isfinite(dl_dopacity))[0]
            raise ValueError(f"non-finite opacity gradient at pixel {tuple(int(b) for b in bad)}")
        dl_dopacity = dl_dopacity.reshape(-1)
    origins, dirs = generate_rays(pose)
    dd, dc = kernels.render_backward(
        field.density_raw, field.color_raw, field.bbox, origins, dirs,
        n_samples, np.asarray(background, dtype=np.float64),
        dl_dcolor.reshape(-1, 3), dl_dopacity,
    )
    return FieldGradient(dd, dc)


def orientation_gradient(
    field: VoxelField, pose: CameraPose, n_samples: int = DEFAULT_SAMPLES
) -> tuple[float, FieldGradient]:
    """Orientation penalty for one view and its gradient (density only)."""
    origins, dirs = generate_rays(pose)
    loss, dd = kernels.orientation_loss_grad(
        field.density_raw, field.bbox, origins, dirs, n_samples
    )
    return loss, FieldGradient(dd, np.zeros(field.color_raw.shape))


@dataclass
class AdamState:
    """Moment buffers for both parameter arrays; advances on every update."""

    m_density: np.ndarray
    v_density: np.ndarray
    m_color: np.ndarray
    v_color: np.ndarray
    step: int = 0

    @classmethod
    def for_field(cls, field: VoxelField) -> "AdamState":
        return cls(
            m_density=np.zeros(field.density_raw.shape),
            v_density=np.zeros(field.density_raw.shape),
            m_color=np.zeros(field.color_raw.shape),
            v_color=np.zeros(field.color_raw.shape),
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8


def apply_update(
    field: VoxelField, grad: FieldGradient, state: AdamState, lr: float
) -> VoxelField:
    """In-place Adam step on the raw parameter grids."""
    if not (np.all(np.isfinite(grad.d_density_raw)) and np.all(np.isfinite(grad.d_color_raw))):
        n_bad = int((~np.isfinite(grad.d_density_raw)).sum() + (~np.isfinite(grad.d_color_raw)).sum())
        raise ValueError(f"non-finite field gradient ({n_bad} entries); aborting update")
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for param, g, m, v in (
        (field.density_raw, grad.d_density_raw, state.m_density, state.v_density),
        (field.color_raw, grad.d_color_raw, state.m_color, state.v_color),
    ):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        param -= upd.astype(np.float32)
    return field


def save_field(field: VoxelField, path) -> None:
    """Binary dump: magic, u32 resolution x3, u32 flags, f64 bbox x6, f32 grids.

    Scalars are little-endian; grids are written x-fastest, colors
    interleaved per voxel.
    """
    rx, ry, rz = field.resolution
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", rx, ry, rz, 0))
        fh.write(struct.pack("<6d", *field.bbox[0], *field.bbox[1]))
        fh.write(np.ravel(field.density_raw, order="F").astype("<f4").tobytes())
        fh.write(field.color_raw.transpose(2, 1, 0, 3).astype("<f4").tobytes())


def load_field(path) -> VoxelField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FieldFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise FieldFormatError("truncated header")
        rx, ry, rz, flags = struct.unpack("<IIII", header)
        if flags != 0:
            raise FieldFormatError(f"unsupported flags {flags}")
        if min(rx, ry, rz) < 2:
            raise FieldFormatError(f"invalid resolution ({rx}, {ry}, {rz})")
        raw_bbox = fh.read(48)
        if len(raw_bbox) != 48:
            raise FieldFormatError("truncated bbox")
        bbox = np.array(struct.unpack("<6d", raw_bbox)).reshape(2, 3)
        nvox = rx * ry * rz
        buf = fh.read(4 * nvox)
        if len(buf) != 4 * nvox:
            raise FieldFormatError("truncated density_raw array")
        density = np.frombuffer(buf, dtype="<f4").reshape((rz, ry, rx)).transpose(2, 1, 0)
        buf = fh.read(12 * nvox)
        if len(buf) != 12 * nvox:
            raise FieldFormatError("truncated color_raw array")
        color = np.frombuffer(buf, dtype="<f4").reshape((rz, ry, rx, 3)).transpose(2, 1, 0, 3)
        return VoxelField(
            (rx, ry, rz), bbox,
            np.ascontiguousarray(density), np.ascontiguousarray(color),
        )
