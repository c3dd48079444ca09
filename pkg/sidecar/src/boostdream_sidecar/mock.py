"""Mock guidance: the ideal denoiser of a server-configured target image.

This module is intentionally self-contained (no engine imports): it is the
independent counterpart the engine's analytic backend is checked against.
The timestep draw must match the engine exactly: a single
``default_rng(seed).integers(lo, hi + 1)`` over the fractional range of
[1, T], with lo/hi rounded from t_range * T.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA = (1e-4, 2e-2)
DEFAULT_T_RANGE = (0.02, 0.98)
TARGET_VIEW_PATTERNS = ("view_{i}.npy", "view_{i}.png", "frame_{i:03d}.png")


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def load_image(path) -> np.ndarray:
    """Load one target image: .npy linear floats, .png 8-bit sRGB."""
    p = str(path)
    if p.endswith(".npy"):
        arr = np.asarray(np.load(p), dtype=np.float64)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        arr = srgb_to_linear(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"target image {p} must be HxWx3, got {arr.shape}")
    return arr


def load_target(path) -> np.ndarray:
    """A composite image file, or a directory of 4 views tiled 2x2 row-major."""
    path = Path(path)
    if path.is_file():
        return load_image(path)
    views = []
    for i in range(4):
        for pattern in TARGET_VIEW_PATTERNS:
            p = path / pattern.format(i=i)
            if p.exists():
                views.append(load_image(p))
                break
        else:
            raise ValueError(f"target dir {path} is missing view {i}")
    if any(v.shape != views[0].shape for v in views):
        raise ValueError("target views must share dimensions")
    top = np.concatenate([views[0], views[1]], axis=1)
    bottom = np.concatenate([views[2], views[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


class MockGuidance:
    """Deterministic guidance for a point-mass target distribution."""

    mode = "mock"

    def __init__(
        self,
        target: np.ndarray,
        T: int = DEFAULT_T,
        beta_start: float = DEFAULT_BETA[0],
        beta_end: float = DEFAULT_BETA[1],
        t_range: tuple[float, float] = DEFAULT_T_RANGE,
    ):
        # Hold the target at wire precision: images arrive as float32, so
        # the fixed point (image == target -> grad == 0) is exact.
        self.target = np.asarray(target, dtype=np.float32).astype(np.float64)
        self.T = T
        beta = np.linspace(beta_start, beta_end, T)
        self.alpha_bar = np.cumprod(1.0 - beta)
        self.sigma = np.sqrt(1.0 - self.alpha_bar)
        self.t_range = t_range

    @property
    def ready(self) -> bool:
        return True

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise TimestepError(f"timestep {t} outside [1, {self.T}]")

    def sample_t(self, seed: int) -> int:
        lo = max(1, int(round(self.t_range[0] * self.T)))
        hi = min(self.T, int(round(self.t_range[1] * self.T)))
        return int(np.random.default_rng(seed).integers(lo, hi + 1))

    def weight(self, t: int, w_mode: str) -> float:
        if w_mode == "sigma2":
            return float(1.0 - self.alpha_bar[t - 1])
        if w_mode == "uniform":
            return 1.0
        raise ValueError(f"unknown w_mode {w_mode!r}")

    def eps_pair(self, x_t: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Ideal denoiser prediction; the unconditioned branch is identical
        (the mock ignores prompt and control by definition)."""
        self.check_t(t)
        if x_t.shape != self.target.shape:
            raise ValueError(
                f"x_t shape {x_t.shape} != target shape {self.target.shape}"
            )
        ab = self.alpha_bar[t - 1]
        target_pm1 = 2.0 * self.target - 1.0
        eps = (x_t - np.sqrt(ab) * target_pm1) / self.sigma[t - 1]
        return eps, eps

    def grad(self, image: np.ndarray, t: int | None, seed: int, w_mode: str):
        """w(t) (eps_hat - eps) in image space.

        For the point-mass target the drawn noise cancels algebraically:
        grad = 4 w(t) sqrt(ab)/sigma (image - target), exactly zero at the
        fixed point. Must match the engine's analytic backend bit-for-bit
        up to float32 transport.
        """
        if image.shape != self.target.shape:
            raise ValueError(
                f"image shape {image.shape} != target shape {self.target.shape}"
            )
        if t is None:
            t = self.sample_t(seed)
        else:
            self.check_t(t)
        ab = self.alpha_bar[t - 1]
        w = self.weight(t, w_mode)
        grad = (4.0 * w * np.sqrt(ab) / self.sigma[t - 1]) * (image - self.target)
        return grad, t, w


class TimestepError(ValueError):
    """Timestep outside [1, T]; mapped to HTTP 422."""
