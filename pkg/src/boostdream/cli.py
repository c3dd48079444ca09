"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, parse_config
from .errors import ConfigError, FieldFormatError, MeshLoadError
from .field import load_field
from .imgio import linear_to_srgb, psnr
from .pipeline import render_turntable, run_pipeline


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, FieldFormatError, MeshLoadError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON config file; flags override its values."),
        click.option("--mesh", type=click.Path(), default=None),
        click.option("--prompt", default=None),
        click.option("--backend", type=click.Choice(["analytic", "remote"]), default=None),
        click.option("--endpoint", envvar="BOOSTDREAM_ENDPOINT", default=None,
                     help="Sidecar URL (or env BOOSTDREAM_ENDPOINT)."),
        click.option("--seed", type=int, default=None),
        click.option("--out", "out_dir", type=click.Path(), default=None),
        click.option("--distill-iters", type=int, default=None),
        click.option("--boost-iters", type=int, default=None),
        click.option("--self-boost-iters", type=int, default=None),
        click.option("--lambda", "control_strength", type=float, default=None,
                     help="Normal-map control strength in [0, 1]."),
        click.option("--cfg-scale", type=float, default=None),
        click.option("--target-dir", type=click.Path(), default=None,
                     help="Directory with 4 target views (analytic backend)."),
        click.option("--target-field", type=click.Path(), default=None,
                     help="Frozen reference field checkpoint (analytic backend)."),
        click.option("--resolution", type=int, default=None),
        click.option("--per-view-size", type=int, default=None),
        click.option("--n-samples", type=int, default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_config(config_path, **overrides) -> RunConfig:
    return parse_config(config_path, overrides)


@click.group()
def main():
    """Refine coarse 3D assets into voxel radiance fields."""


@main.command()
@_config_options
@click.option("--skip-init", is_flag=True, help="Ablation: no distillation stage.")
@click.option("--skip-boost", is_flag=True, help="Ablation: no coarse-guided stage.")
@click.option("--skip-self-boost", is_flag=True, help="Ablation: no self-guided stage.")
@_guarded
def refine(config_path, skip_init, skip_boost, skip_self_boost, **overrides):
    """Run the full three-stage refinement."""
    if skip_init:
        overrides["distill_iters"] = 0
    if skip_boost:
        overrides["boost_iters"] = 0
    if skip_self_boost:
        overrides["self_boost_iters"] = 0
    cfg = _build_config(config_path, **overrides)
    if cfg.mesh is None and (cfg.distill_iters > 0 or
                             (cfg.boost_iters > 0 and cfg.normal_source_boost == "mesh")):
        raise ConfigError("config key 'mesh': refine needs a mesh path")
    result = run_pipeline(cfg.mesh, cfg.prompt, cfg, out_dir=cfg.out_dir)
    click.echo(f"completed {len(result.metrics)} iterations; "
               f"checkpoints: {', '.join(str(p) for p in result.checkpoints.values())}")


@main.command()
@_config_options
@_guarded
def distill(config_path, **overrides):
    """Run only the distillation stage (mesh -> field)."""
    overrides["boost_iters"] = 0
    overrides["self_boost_iters"] = 0
    cfg = _build_config(config_path, **overrides)
    if cfg.mesh is None:
        raise ConfigError("config key 'mesh': distill needs a mesh path")
    result = run_pipeline(cfg.mesh, cfg.prompt, cfg, out_dir=cfg.out_dir)
    click.echo(f"distilled {cfg.distill_iters} iterations; "
               f"checkpoint: {result.checkpoints['distilled']}")


@main.command("render-turntable")
@click.option("--field", "field_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--frames", type=int, default=8, show_default=True)
@click.option("--elevation", type=float, default=15.0, show_default=True)
@click.option("--fov", type=float, default=50.0, show_default=True)
@click.option("--distance", type=float, default=3.1, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--n-samples", type=int, default=64, show_default=True)
@_guarded
def render_turntable_cmd(field_path, out_dir, frames, elevation, fov, distance, size, n_samples):
    """Render equally spaced azimuth frames from a field checkpoint."""
    voxels = load_field(field_path)
    paths = render_turntable(
        voxels, out_dir, frames=frames, elevation_deg=elevation, fov_deg=fov,
        distance=distance, image_size=size, n_samples=n_samples,
    )
    click.echo(f"wrote {len(paths)} frames to {out_dir}")


def _load_frames(directory) -> list[np.ndarray]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG frames found in {directory}")
    from PIL import Image

    return [np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
            for p in paths]


@main.command("eval-metrics")
@click.option("--field", "field_path", type=click.Path(), default=None,
              help="Render this checkpoint with the turntable cameras.")
@click.option("--renders-dir", type=click.Path(), default=None,
              help="Pre-rendered frames to evaluate instead of a field.")
@click.option("--ref-dir", type=click.Path(), required=True)
@click.option("--frames", type=int, default=8, show_default=True)
@click.option("--elevation", type=float, default=15.0, show_default=True)
@click.option("--fov", type=float, default=50.0, show_default=True)
@click.option("--distance", type=float, default=3.1, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--n-samples", type=int, default=64, show_default=True)
@_guarded
def eval_metrics(field_path, renders_dir, ref_dir, frames, elevation, fov, distance,
                 size, n_samples):
    """PSNR / L1 between a field's renders (or a frame dir) and references.

    Comparison happens on the quantized 8-bit values, so identical image
    sets report PSNR "inf" and L1 0 exactly.
    """
    if (field_path is None) == (renders_dir is None):
        raise ConfigError("pass exactly one of --field or --renders-dir")
    refs = _load_frames(ref_dir)
    if renders_dir is not None:
        rendered = _load_frames(renders_dir)
    else:
        from .cameras import CameraSample
        from .field import render as field_render
        from .pipeline import look_at_pose

        voxels = load_field(field_path)
        rendered = []
        for k in range(frames):
            sample = CameraSample(elevation_deg=elevation,
                                  azimuth_deg=360.0 * k / frames,
                                  fov_deg=fov, distance=distance)
            out = field_render(voxels, look_at_pose(sample, size), n_samples=n_samples)
            rendered.append(np.rint(linear_to_srgb(out.color) * 255.0) / 255.0)
    if len(rendered) != len(refs):
        raise ConfigError(f"frame count mismatch: {len(rendered)} vs {len(refs)}")
    stacked_a = np.stack(rendered)
    stacked_b = np.stack(refs)
    value = psnr(stacked_a, stacked_b)
    report = {
        "frames": len(refs),
        "psnr": "inf" if value == float("inf") else round(value, 4),
        "l1": float(np.abs(stacked_a - stacked_b).mean()),
    }
    click.echo(json.dumps(report))


if __name__ == "__main__":
    main()
