"""Volume-rendering kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable; ``BOOSTDREAM_KERNELS``
(``auto`` | ``compiled`` | ``numpy``) or :func:`set_backend` overrides the
choice. Both backends implement the same float64 contract and agree to
round-off; see benchmarks/bench_kernels.py for the speed comparison.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import numpy_backend
from .numpy_backend import EPS_VIS, sigmoid, softplus

try:
    from . import _core
except ImportError:  # pragma: no cover - depends on the build environment
    _core = None

_choice = os.environ.get("BOOSTDREAM_KERNELS", "auto")
if _choice == "compiled" and _core is None:  # pragma: no cover
    raise ImportError("BOOSTDREAM_KERNELS=compiled but the extension is not built")
if _choice == "auto" and _core is None:  # pragma: no cover
    warnings.warn("compiled rendering kernels unavailable; using the numpy fallback")


def set_backend(name: str) -> None:
    """Force 'compiled' or 'numpy', or restore 'auto'."""
    global _choice
    if name not in ("auto", "compiled", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "compiled" and _core is None:
        raise RuntimeError("compiled kernels are not available")
    _choice = name


def active_backend() -> str:
    if _choice == "numpy" or (_choice == "auto" and _core is None):
        return "numpy"
    return "compiled"


def compiled_available() -> bool:
    return _core is not None


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def sigma_gradient_grid(density, bbox) -> np.ndarray:
    """Spatial gradient of activated density at the grid nodes, (Rx,Ry,Rz,3).

    Central differences inside, one-sided at the faces; the negated,
    normalized interpolation of this grid is the surface normal.
    """
    density = _as_f64(density)
    lo, hi = bbox
    sig = softplus(density)
    spacing = [(hi[k] - lo[k]) / (density.shape[k] - 1) for k in range(3)]
    gx, gy, gz = (np.gradient(sig, spacing[k], axis=k) for k in range(3))
    return np.stack([gx, gy, gz], axis=-1)


def _gradient_grid_adjoint(d_grid, density_shape, bbox):
    """Adjoint of sigma_gradient_grid's finite differences (w.r.t. sigma)."""
    lo, hi = bbox
    d_sigma = np.zeros(density_shape)
    for k in range(3):
        dx = (hi[k] - lo[k]) / (density_shape[k] - 1)
        g = np.moveaxis(d_grid[..., k], k, 0)
        out = np.moveaxis(d_sigma, k, 0)
        out[2:] += g[1:-1] / (2.0 * dx)
        out[:-2] -= g[1:-1] / (2.0 * dx)
        out[1] += g[0] / dx
        out[0] -= g[0] / dx
        out[-1] += g[-1] / dx
        out[-2] -= g[-1] / dx
    return d_sigma


def render_rays(
    density, color, bbox, origins, dirs, n_samples, background,
    want_normal=False, want_samples=False,
):
    """Render a batch of rays; see numpy_backend.render_rays for outputs."""
    density = _as_f64(density)
    color = _as_f64(color)
    origins = _as_f64(origins)
    dirs = _as_f64(dirs)
    background = _as_f64(background)
    lo, hi = (_as_f64(bbox[0]), _as_f64(bbox[1]))
    normal_grid = sigma_gradient_grid(density, (lo, hi)) if (want_normal or want_samples) else None
    if active_backend() == "numpy":
        return numpy_backend.render_rays(
            density, color, lo, hi, origins, dirs, n_samples, background,
            normal_grid=normal_grid, want_samples=want_samples,
        )
    n = origins.shape[0]
    out = dict(
        color=np.empty((n, 3)), opacity=np.empty(n), depth=np.empty(n),
        normal=np.zeros((n, 3)),
        weights=np.zeros((n, n_samples)) if want_samples else None,
        normal_dot=np.zeros((n, n_samples)) if want_samples else None,
    )
    _core.render_rays(
        density, color, lo, hi, origins, dirs, n_samples, background,
        normal_grid if normal_grid is not None else np.zeros((1, 1, 1, 3)),
        normal_grid is not None, want_samples,
        out["color"], out["opacity"], out["depth"], out["normal"],
        out["weights"] if want_samples else np.zeros((1, 1)),
        out["normal_dot"] if want_samples else np.zeros((1, 1)),
    )
    return out


def render_backward(
    density, color, bbox, origins, dirs, n_samples, background,
    dl_color, dl_opacity=None,
):
    """Adjoint of render_rays through the color and opacity outputs."""
    density = _as_f64(density)
    color = _as_f64(color)
    origins = _as_f64(origins)
    dirs = _as_f64(dirs)
    background = _as_f64(background)
    dl_color = _as_f64(dl_color)
    lo, hi = (_as_f64(bbox[0]), _as_f64(bbox[1]))
    if dl_opacity is not None:
        dl_opacity = _as_f64(dl_opacity)
    if active_backend() == "numpy":
        return numpy_backend.render_backward(
            density, color, lo, hi, origins, dirs, n_samples, background,
            dl_color, dl_opacity,
        )
    d_density = np.zeros(density.shape)
    d_color = np.zeros(color.shape)
    _core.render_backward(
        density, color, lo, hi, origins, dirs, n_samples, background,
        dl_color,
        dl_opacity if dl_opacity is not None else np.zeros(1),
        dl_opacity is not None,
        d_density, d_color,
    )
    return d_density, d_color


def orientation_loss_grad(density, bbox, origins, dirs, n_samples):
    """Mean-per-ray orientation penalty and its density gradient.

    loss = (1/N) sum_rays sum_j w_j relu(n_j . d)^2 with w_j stop-gradient;
    the gradient flows through the normals back to the raw density grid.
    """
    density = _as_f64(density)
    origins = _as_f64(origins)
    dirs = _as_f64(dirs)
    lo, hi = (_as_f64(bbox[0]), _as_f64(bbox[1]))
    normal_grid = sigma_gradient_grid(density, (lo, hi))
    if active_backend() == "numpy":
        loss_sum, d_grid = numpy_backend.orientation_backward(
            density, normal_grid, lo, hi, origins, dirs, n_samples
        )
    else:
        d_grid = np.zeros(normal_grid.shape)
        loss_sum = _core.orientation_backward(
            density, normal_grid, lo, hi, origins, dirs, n_samples, d_grid
        )
    n_rays = origins.shape[0]
    d_sigma = _gradient_grid_adjoint(d_grid, density.shape, (lo, hi))
    d_density = d_sigma * sigmoid(density) / n_rays
    return loss_sum / n_rays, d_density
