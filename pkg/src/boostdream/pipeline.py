"""Three-stage refinement driver.

Stage 1 distills a coarse mesh into the voxel field with per-view L1.
Stages 2 and 3 run multi-view score-distillation steps over a four-view
orbit rig: the boost stage conditions guidance on the coarse asset's
normal maps, the self-boost stage on the field's own.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import (
    CameraPose,
    CameraSample,
    MultiViewRig,
    RotationSpec,
    build_rig,
    sample_camera,
    sample_rotation_axis,
    spherical_to_position,
)
from .config import (
    FIXED_RIG_AZIMUTH,
    FIXED_RIG_DISTANCE,
    FIXED_RIG_ELEVATION,
    FIXED_RIG_FOV,
    RunConfig,
)
from .errors import ConfigError, GuidanceError, TransportError
from .field import (
    AdamState,
    RenderOutput,
    VoxelField,
    apply_update,
    encode_normal_map,
    field_gradient,
    init_field,
    load_field,
    orientation_gradient,
    render,
    save_field,
    zero_gradient,
)
from .guidance import (
    GuidanceRequest,
    GuidanceResponse,
    RemoteGuidanceClient,
    analytic_grad,
    build_schedule,
)
from .imgio import load_image_any, psnr, save_color_png
from .mesh import CoarseAsset, load_mesh, rasterize

OPACITY_LOSS_EPS = 0.01


def assemble_composite(views) -> np.ndarray:
    """2x2 stitch, row-major: views 0,1 on top, 2,3 below."""
    if len(views) != 4:
        raise ValueError(f"composite needs exactly 4 views, got {len(views)}")
    views = [np.asarray(v) for v in views]
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise ValueError("composite views must share dimensions")
    top = np.concatenate([views[0], views[1]], axis=1)
    bottom = np.concatenate([views[2], views[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def split_composite(composite: np.ndarray) -> list[np.ndarray]:
    """Quadrant extraction; exact adjoint of assemble_composite."""
    h, w = composite.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"composite dimensions must be even, got {h}x{w}")
    hh, hw = h // 2, w // 2
    return [
        composite[:hh, :hw],
        composite[:hh, hw:],
        composite[hh:, :hw],
        composite[hh:, hw:],
    ]


def orientation_loss(out: RenderOutput) -> float:
    """sum_samples w_i relu(n_i . d)^2, averaged over rays; weights stop-grad."""
    if out.sample_weights is None or out.sample_normal_dot is None:
        raise ValueError("render output lacks per-sample buffers; render with want_samples")
    relu = np.maximum(out.sample_normal_dot, 0.0)
    n_rays = out.opacity.size
    return float((out.sample_weights * relu * relu).sum() / n_rays)


def opacity_loss(out: RenderOutput) -> float:
    """Mean over rays of sqrt(O^2 + 0.01); pushes opacity toward sparsity."""
    return float(np.mean(np.sqrt(out.opacity**2 + OPACITY_LOSS_EPS)))


def _opacity_loss_grad(opacity: np.ndarray) -> np.ndarray:
    return opacity / np.sqrt(opacity**2 + OPACITY_LOSS_EPS) / opacity.size


def look_at_pose(sample: CameraSample, image_size: int) -> CameraPose:
    return CameraPose(
        position=spherical_to_position(sample),
        target=np.zeros(3),
        up=np.array([0.0, 0.0, 1.0]),
        fov_deg=sample.fov_deg,
        image_size=image_size,
    )


def canonical_rig(image_size: int, rotation_angle_deg: float = 90.0) -> MultiViewRig:
    """Deterministic rig (Z-axis orbit) used with fixed image targets."""
    base = CameraSample(
        elevation_deg=FIXED_RIG_ELEVATION,
        azimuth_deg=FIXED_RIG_AZIMUTH,
        fov_deg=FIXED_RIG_FOV,
        distance=FIXED_RIG_DISTANCE,
    )
    spec = RotationSpec(axis=np.array([0.0, 0.0, 1.0]), angle_deg=rotation_angle_deg)
    return build_rig(base, spec, image_size)


def sample_rig(cfg: RunConfig, rng: np.random.Generator) -> MultiViewRig:
    if cfg.rig_mode == "fixed":
        return canonical_rig(cfg.per_view_size, cfg.rotation_angle_deg)
    sample = sample_camera(cfg.camera_ranges(), rng)
    spec = RotationSpec(axis=sample_rotation_axis(rng), angle_deg=cfg.rotation_angle_deg)
    return build_rig(sample, spec, cfg.per_view_size)


# --- guidance target sources -------------------------------------------------

TARGET_PATTERNS = ("view_{i}.npy", "view_{i}.png", "frame_{i:03d}.png")


def load_target_views(target_dir, per_view_size: int) -> list[np.ndarray]:
    target_dir = Path(target_dir)
    views = []
    for i in range(4):
        for pattern in TARGET_PATTERNS:
            p = target_dir / pattern.format(i=i)
            if p.exists():
                views.append(load_image_any(p))
                break
        else:
            raise ConfigError(
                f"target_dir {target_dir} is missing view {i} "
                f"(tried {[p.format(i=i) for p in TARGET_PATTERNS]})"
            )
    for i, v in enumerate(views):
        if v.shape != (per_view_size, per_view_size, 3):
            raise ConfigError(
                f"target view {i} has shape {v.shape}, expected "
                f"({per_view_size}, {per_view_size}, 3)"
            )
    return views


class CompositeTarget:
    """Fixed target composite (from four view images)."""

    def __init__(self, views):
        self.composite = assemble_composite(views)

    def composite_for(self, rig: MultiViewRig) -> np.ndarray:
        return self.composite


class FieldTarget:
    """Targets rendered on demand from a frozen reference field."""

    def __init__(self, reference: VoxelField, n_samples: int, background):
        self.reference = reference
        self.n_samples = n_samples
        self.background = tuple(background)

    def composite_for(self, rig: MultiViewRig) -> np.ndarray:
        views = [
            render(self.reference, pose, n_samples=self.n_samples,
                   background=self.background, want_normal=False).color
            for pose in rig.poses
        ]
        return assemble_composite(views)


# --- guidance backends -------------------------------------------------------


class AnalyticBackend:
    """Local ideal-denoiser guidance; needs a target source."""

    name = "analytic"

    def __init__(self, target_source, schedule=None, w_mode="sigma2",
                 t_range=(0.02, 0.98)):
        self.target_source = target_source
        self.schedule = schedule if schedule is not None else build_schedule()
        self.w_mode = w_mode
        self.t_range = tuple(t_range)
        self.last_target: np.ndarray | None = None

    def check(self) -> None:
        pass

    def compute_grad(self, request: GuidanceRequest, rig: MultiViewRig) -> GuidanceResponse:
        target = self.target_source.composite_for(rig)
        self.last_target = target
        return analytic_grad(request, target, self.schedule,
                             w_mode=self.w_mode, t_range=self.t_range)


class RemoteBackend:
    """Forwards guidance requests to the diffusion sidecar."""

    name = "remote"

    def __init__(self, client: RemoteGuidanceClient, w_mode="sigma2"):
        self.client = client
        self.w_mode = w_mode
        self.last_target = None

    def check(self) -> None:
        info = self.client.health()
        if info.get("status") != "ok":
            raise TransportError(f"sidecar health returned {info!r}")

    def compute_grad(self, request: GuidanceRequest, rig: MultiViewRig) -> GuidanceResponse:
        return self.client.grad(request, w_mode=self.w_mode)


def backend_from_config(cfg: RunConfig):
    cfg.guidance_config().validate()
    schedule = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    if cfg.backend == "remote":
        if not cfg.endpoint:
            raise ConfigError("config key 'endpoint': remote backend needs an endpoint")
        client = RemoteGuidanceClient(cfg.endpoint, timeout=cfg.remote_timeout,
                                      retries=cfg.remote_retries)
        return RemoteBackend(client, w_mode=cfg.w_mode)
    if cfg.target_field is not None:
        reference = load_field(cfg.target_field)
        source = FieldTarget(reference, cfg.n_samples, cfg.background)
    elif cfg.target_dir is not None:
        source = CompositeTarget(load_target_views(cfg.target_dir, cfg.per_view_size))
    else:
        raise ConfigError("config key 'target_dir': analytic backend needs "
                          "target_dir or target_field")
    return AnalyticBackend(source, schedule=schedule, w_mode=cfg.w_mode,
                           t_range=cfg.t_range)


# --- normal-map sources for the guidance condition ---------------------------


class MeshNormals:
    tag = "mesh"

    def __init__(self, asset: CoarseAsset):
        self.asset = asset

    def maps(self, rig: MultiViewRig, live_renders) -> list[np.ndarray]:
        out = []
        for pose in rig.poses:
            r = rasterize(self.asset, pose)
            out.append(encode_normal_map(r.normal, r.opacity))
        return out


class FrozenFieldNormals:
    tag = "fitted-field"

    def __init__(self, snapshot: VoxelField, n_samples: int, background):
        self.snapshot = snapshot
        self.n_samples = n_samples
        self.background = tuple(background)

    def maps(self, rig: MultiViewRig, live_renders) -> list[np.ndarray]:
        out = []
        for pose in rig.poses:
            r = render(self.snapshot, pose, n_samples=self.n_samples,
                       background=self.background, want_normal=True)
            out.append(encode_normal_map(r.normal, r.opacity))
        return out


class LiveFieldNormals:
    """Self-guidance: normal maps of the field being optimized."""

    tag = "self"

    def maps(self, rig: MultiViewRig, live_renders) -> list[np.ndarray]:
        return [encode_normal_map(r.normal, r.opacity) for r in live_renders]


# --- stages -------------------------------------------------------------------


class MetricsLog:
    """In-memory record list, optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "a") if path is not None else None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class MeshReference:
    """Reference renderer the distillation stage fits against."""

    def __init__(self, asset: CoarseAsset, background):
        self.asset = asset
        self.background = tuple(background)

    def render(self, pose: CameraPose) -> RenderOutput:
        return rasterize(self.asset, pose, background=self.background)


MASK_WEIGHT = 0.5


def distill_stage(
    voxels: VoxelField,
    reference,
    cfg: RunConfig,
    rng: np.random.Generator,
    opt_state: AdamState | None = None,
    log: MetricsLog | None = None,
    iterations: int | None = None,
    start_iteration: int = 0,
) -> VoxelField:
    """L1-fit the field to the reference renderer over random views.

    Loss per iteration: mean |color - ref| + 0.5 mean |opacity - coverage|.
    The gradient is the exact L1 subgradient (zero on ties).
    """
    iterations = cfg.distill_iters if iterations is None else iterations
    opt_state = AdamState.for_field(voxels) if opt_state is None else opt_state
    ranges = cfg.camera_ranges()
    npx = cfg.per_view_size * cfg.per_view_size
    for i in range(iterations):
        t_start = time.perf_counter()
        pose = look_at_pose(sample_camera(ranges, rng), cfg.per_view_size)
        ref = reference.render(pose)
        out = render(voxels, pose, n_samples=cfg.n_samples,
                     background=cfg.background, want_normal=False)
        color_diff = out.color - ref.color
        mask_diff = out.opacity - ref.opacity
        loss = float(np.abs(color_diff).mean() + MASK_WEIGHT * np.abs(mask_diff).mean())
        if not np.isfinite(loss):
            raise RuntimeError(
                f"distillation diverged at iteration {start_iteration + i}: loss={loss}"
            )
        grad = field_gradient(
            voxels, pose,
            dl_dcolor=np.sign(color_diff) / (npx * 3),
            dl_dopacity=MASK_WEIGHT * np.sign(mask_diff) / npx,
            n_samples=cfg.n_samples, background=cfg.background,
        )
        apply_update(voxels, grad, opt_state, cfg.lr_distill)
        if log is not None:
            log.append({
                "iteration": start_iteration + i,
                "stage": "distill",
                "loss_l1": loss,
                "loss_sds": None,
                "loss_orient": None,
                "loss_opacity": None,
                "psnr": None,
                "t_used": None,
                "w_used": None,
                "wall_time_ms": (time.perf_counter() - t_start) * 1e3,
            })
    return voxels


def mv_sds_step(
    voxels: VoxelField,
    rig: MultiViewRig,
    normal_source,
    backend,
    cfg: RunConfig,
    rng: np.random.Generator,
    opt_state: AdamState,
    lr: float,
) -> dict:
    """One multi-view guidance step: render, stitch, query, chain-rule, update."""
    t_start = time.perf_counter()
    want_normal = isinstance(normal_source, LiveFieldNormals)
    renders = [
        render(voxels, pose, n_samples=cfg.n_samples, background=cfg.background,
               want_normal=want_normal)
        for pose in rig.poses
    ]
    composite = assemble_composite([r.color for r in renders])
    normal_comp = assemble_composite(normal_source.maps(rig, renders))
    request = GuidanceRequest(
        image=composite,
        control=normal_comp,
        prompt=cfg.prompt,
        control_strength=cfg.control_strength,
        cfg_scale=cfg.cfg_scale,
        seed=int(rng.integers(2**31 - 1)),
        t=cfg.fixed_timestep,
    )
    response = backend.compute_grad(request, rig)
    if response.grad.shape != composite.shape:
        raise GuidanceError(
            f"guidance gradient shape {response.grad.shape} != {composite.shape}"
        )
    if not np.all(np.isfinite(response.grad)):
        raise GuidanceError("guidance gradient contains non-finite values")

    per_view = split_composite(response.grad)
    total = zero_gradient(voxels)
    orient_val = 0.0
    opacity_val = 0.0
    for pose, view_grad, out in zip(rig.poses, per_view, renders):
        opacity_val += opacity_loss(out) / 4.0
        dl_dopacity = None
        if cfg.opacity_weight > 0:
            dl_dopacity = cfg.opacity_weight * _opacity_loss_grad(out.opacity) / 4.0
        total += field_gradient(
            voxels, pose, dl_dcolor=view_grad, dl_dopacity=dl_dopacity,
            n_samples=cfg.n_samples, background=cfg.background,
        )
        if cfg.orient_weight > 0:
            oloss, ograd = orientation_gradient(voxels, pose, n_samples=cfg.n_samples)
            orient_val += oloss / 4.0
            total += ograd.scaled(cfg.orient_weight / 4.0)
    apply_update(voxels, total, opt_state, lr)

    target = getattr(backend, "last_target", None)
    return {
        "loss_sds": float(np.linalg.norm(response.grad)),
        "loss_orient": orient_val if cfg.orient_weight > 0 else 0.0,
        "loss_opacity": opacity_val,
        "psnr": psnr(composite, target) if target is not None else None,
        "t_used": response.t_used,
        "w_used": response.w_used,
        "wall_time_ms": (time.perf_counter() - t_start) * 1e3,
    }


def _boost_loop(
    voxels, normal_source, backend, cfg, rng, opt_state, log,
    iterations, stage, lr, start_iteration,
) -> None:
    skips = 0
    completed = 0
    while completed < iterations:
        rig = sample_rig(cfg, rng)
        try:
            metrics = mv_sds_step(voxels, rig, normal_source, backend, cfg, rng,
                                  opt_state, lr)
        except (TransportError, GuidanceError) as exc:
            skips += 1
            if skips > cfg.skip_budget:
                raise GuidanceError(
                    f"{stage} stage aborted after {skips} failed guidance calls "
                    f"(budget {cfg.skip_budget}): {exc}"
                ) from exc
            if log is not None:
                log.append({
                    "iteration": start_iteration + completed,
                    "stage": stage,
                    "skipped": True,
                    "error": str(exc)[:200],
                })
            continue
        metrics.update({"iteration": start_iteration + completed, "stage": stage})
        if log is not None:
            log.append(metrics)
        completed += 1


def render_turntable(
    voxels: VoxelField,
    out_dir,
    frames: int = 8,
    elevation_deg: float = FIXED_RIG_ELEVATION,
    fov_deg: float = FIXED_RIG_FOV,
    distance: float = FIXED_RIG_DISTANCE,
    image_size: int = 64,
    n_samples: int = 64,
    background=(1.0, 1.0, 1.0),
) -> list[Path]:
    """Equally spaced azimuth sweep written as sRGB PNG frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(frames):
        sample = CameraSample(
            elevation_deg=elevation_deg,
            azimuth_deg=360.0 * k / frames,
            fov_deg=fov_deg,
            distance=distance,
        )
        out = render(voxels, look_at_pose(sample, image_size),
                     n_samples=n_samples, background=background, want_normal=False)
        path = out_dir / f"frame_{k:03d}.png"
        save_color_png(path, out.color)
        paths.append(path)
    return paths


@dataclass
class PipelineResult:
    field: VoxelField
    metrics: list[dict]
    checkpoints: dict[str, Path]


def run_pipeline(
    asset_path,
    prompt: str,
    cfg: RunConfig,
    backend=None,
    out_dir=None,
) -> PipelineResult:
    """init -> distill -> boost (coarse-asset normals) -> self-boost (own normals).

    Writes the resolved config, a JSONL metrics log, stage checkpoints, and
    turntable renders into out_dir. Deterministic for fixed seeds and local
    backends.
    """
    if prompt:
        cfg = dataclasses.replace(cfg, prompt=prompt)
    cfg = cfg.resolved()
    cfg.validate()
    out_dir = Path(out_dir if out_dir is not None else (cfg.out_dir or "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())

    needs_mesh = cfg.distill_iters > 0 or (
        cfg.boost_iters > 0 and cfg.normal_source_boost == "mesh"
    )
    asset = None
    if asset_path is not None:
        asset = asset_path if isinstance(asset_path, CoarseAsset) else load_mesh(asset_path)
    elif needs_mesh:
        raise ConfigError("config key 'mesh': this run needs a coarse asset")

    needs_guidance = cfg.boost_iters > 0 or cfg.self_boost_iters > 0
    if needs_guidance:
        if backend is None:
            backend = backend_from_config(cfg)
        backend.check()

    init_seed, distill_seed, boost_seed, self_seed = (
        int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(4)
    )
    voxels = init_field(cfg.resolution, seed=init_seed, init_mode=cfg.init_mode)
    opt_state = AdamState.for_field(voxels)
    log = MetricsLog(out_dir / "metrics.jsonl")
    checkpoints: dict[str, Path] = {}

    def checkpoint(tag: str) -> None:
        path = out_dir / f"field_{tag}.bdf"
        save_field(voxels, path)
        checkpoints[tag] = path
        render_turntable(
            voxels, out_dir / f"turntable_{tag}", frames=cfg.turntable_frames,
            image_size=cfg.per_view_size, n_samples=cfg.n_samples,
            background=cfg.background,
        )

    try:
        if cfg.distill_iters > 0:
            reference = MeshReference(asset, cfg.background)
            distill_stage(voxels, reference, cfg, np.random.default_rng(distill_seed),
                          opt_state=opt_state, log=log)
        checkpoint("distilled")

        if cfg.boost_iters > 0:
            if cfg.normal_source_boost == "mesh":
                normal_source = MeshNormals(asset)
            else:
                normal_source = FrozenFieldNormals(voxels.copy(), cfg.n_samples,
                                                   cfg.background)
            _boost_loop(voxels, normal_source, backend, cfg,
                        np.random.default_rng(boost_seed), opt_state, log,
                        cfg.boost_iters, "boost", cfg.lr_boost, cfg.distill_iters)
        checkpoint("boost")

        if cfg.self_boost_iters > 0:
            _boost_loop(voxels, LiveFieldNormals(), backend, cfg,
                        np.random.default_rng(self_seed), opt_state, log,
                        cfg.self_boost_iters, "self_boost", cfg.lr_self_boost,
                        cfg.distill_iters + cfg.boost_iters)
        checkpoint("final")
    finally:
        log.close()

    return PipelineResult(field=voxels, metrics=log.records, checkpoints=checkpoints)
