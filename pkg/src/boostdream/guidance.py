"""Diffusion-side math and the guidance backends.

Every backend satisfies one contract: given the 2x2 composite render and
its normal-map composite, return dL/dcomposite (the timestep weighting
already applied). The analytic backend is the desk-scale oracle -- the
ideal denoiser of a point-mass target; the remote backend forwards the
request to a sidecar service over HTTP.
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .errors import ConfigError, GuidanceError, TransportError

DEFAULT_T = 1000
DEFAULT_BETA = (1e-4, 2e-2)
DEFAULT_T_RANGE = (0.02, 0.98)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Forward-process tables, 1-indexed by timestep (t in [1, T])."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def at(self, t: int) -> tuple[float, float]:
        """(alpha_bar_t, sigma_t) with range checking."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1]), float(self.sigma[t - 1])


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA[0],
    beta_end: float = DEFAULT_BETA[1],
) -> DiffusionSchedule:
    """Linear beta schedule with cumulative-product alpha_bar."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"invalid beta bounds ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma=np.sqrt(1.0 - alpha_bar))


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    ab, sigma = schedule.at(t)
    return np.sqrt(ab) * x0 + sigma * eps


def cfg_compose(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free extrapolation: eps_cond + s (eps_cond - eps_uncond)."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if s < 0:
        raise ValueError(f"guidance scale must be >= 0, got {s}")
    return eps_cond + s * (eps_cond - eps_uncond)


def sds_weight(t: int, schedule: DiffusionSchedule, w_mode: str = "sigma2") -> float:
    """Timestep weighting w(t)."""
    ab, _ = schedule.at(t)
    if w_mode == "sigma2":
        return 1.0 - ab
    if w_mode == "uniform":
        return 1.0
    raise ConfigError(f"unknown w_mode {w_mode!r}")


def sample_timestep(
    rng: np.random.Generator,
    schedule: DiffusionSchedule,
    t_range: tuple[float, float] = DEFAULT_T_RANGE,
) -> int:
    """Uniform integer timestep in the fractional range of [1, T].

    The draw is a single rng.integers call; the mock sidecar replays the
    same construction from the request seed so local and remote runs see
    identical timesteps.
    """
    t_min, t_max = t_range
    if not (0.0 < t_min < t_max < 1.0):
        raise ConfigError(f"t_range must satisfy 0 < min < max < 1, got {t_range}")
    lo = max(1, int(round(t_min * schedule.T)))
    hi = min(schedule.T, int(round(t_max * schedule.T)))
    return int(rng.integers(lo, hi + 1))


@dataclass
class GuidanceConfig:
    prompt: str = ""
    control_strength: float = 1.0  # lambda in [0, 1]
    cfg_scale: float = 7.5  # s
    t_range: tuple[float, float] = DEFAULT_T_RANGE
    w_mode: str = "sigma2"
    fixed_t: int | None = None

    def validate(self) -> None:
        if not 0.0 <= self.control_strength <= 1.0:
            raise ConfigError(f"control_strength must lie in [0,1], got {self.control_strength}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        t_min, t_max = self.t_range
        if not (0.0 < t_min < t_max < 1.0):
            raise ConfigError(f"t_range must satisfy 0 < min < max < 1, got {self.t_range}")
        if self.w_mode not in ("sigma2", "uniform"):
            raise ConfigError(f"unknown w_mode {self.w_mode!r}")


@dataclass
class GuidanceRequest:
    image: np.ndarray  # (H, W, 3) composite in [0, 1]
    control: np.ndarray  # (H, W, 3) normal composite in [0, 1]
    prompt: str
    control_strength: float
    cfg_scale: float
    seed: int
    t: int | None = None

    def __post_init__(self):
        if self.image.shape != self.control.shape:
            raise ValueError(
                f"image {self.image.shape} and control {self.control.shape} differ"
            )
        h, w = self.image.shape[:2]
        if h % 2 or w % 2:
            raise ValueError(f"composite dimensions must be even, got {h}x{w}")


@dataclass
class GuidanceResponse:
    grad: np.ndarray  # dL/dcomposite, w(t) included
    t_used: int
    w_used: float
    diagnostics: dict[str, str] = field(default_factory=dict)


def analytic_grad(
    request: GuidanceRequest,
    target: np.ndarray,
    schedule: DiffusionSchedule,
    w_mode: str = "sigma2",
    t_range: tuple[float, float] = DEFAULT_T_RANGE,
    rng: np.random.Generator | None = None,
) -> GuidanceResponse:
    """Ideal-denoiser guidance toward a known target image.

    For a point-mass target the predicted noise is
    eps* = (x_t - sqrt(ab) target') / sigma, so the weighted residual
    w(t)(eps* - eps) collapses algebraically to
    w(t) sqrt(ab)/sigma (x0' - target'): the drawn noise cancels exactly
    and the gradient is identically zero at image == target. The factor 2
    maps the [0,1] images onto the [-1,1] diffusion domain.
    x0' - target' = 2 (image - target), hence the overall 4.
    """
    if target.shape != request.image.shape:
        raise ValueError(f"target shape {target.shape} != image shape {request.image.shape}")
    if request.t is not None:
        t = int(request.t)
        schedule.at(t)  # range check
    else:
        local_rng = np.random.default_rng(request.seed) if rng is None else rng
        t = sample_timestep(local_rng, schedule, t_range)
    ab, sigma = schedule.at(t)
    w = sds_weight(t, schedule, w_mode)
    grad = (4.0 * w * np.sqrt(ab) / sigma) * (request.image - target)
    return GuidanceResponse(
        grad=grad, t_used=t, w_used=w, diagnostics={"backend": "analytic"}
    )


def _encode_tensor(arr: np.ndarray) -> dict:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "f32",
        "data": base64.b64encode(arr32.tobytes()).decode("ascii"),
    }


def _decode_tensor(obj: dict) -> np.ndarray:
    if obj.get("dtype") != "f32":
        raise GuidanceError(f"unsupported wire dtype {obj.get('dtype')!r}")
    shape = tuple(int(s) for s in obj["shape"])
    raw = base64.b64decode(obj["data"])
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise GuidanceError(f"wire tensor has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


class RemoteGuidanceClient:
    """HTTP client for the diffusion sidecar's /v1 protocol."""

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._session = requests.Session()

    def health(self) -> dict:
        try:
            resp = self._session.get(f"{self.endpoint}/v1/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"health check failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"sidecar unhealthy: HTTP {resp.status_code}")
        return resp.json()

    def grad(self, request: GuidanceRequest, w_mode: str = "sigma2") -> GuidanceResponse:
        body = {
            "image": _encode_tensor(request.image),
            "normal": _encode_tensor(request.control),
            "prompt": request.prompt,
            "lambda": request.control_strength,
            "s": request.cfg_scale,
            "seed": int(request.seed),
            "w_mode": w_mode,
        }
        if request.t is not None:
            body["t"] = int(request.t)
        last_exc = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.post(
                    f"{self.endpoint}/v1/grad", json=body, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(min(0.2 * 2**attempt, 2.0))
                continue
            if resp.status_code != 200:
                raise TransportError(
                    f"/v1/grad returned HTTP {resp.status_code}: {resp.text[:200]}"
                )
            payload = resp.json()
            grad = _decode_tensor(payload["grad"])
            if grad.shape != request.image.shape:
                raise GuidanceError(
                    f"gradient shape {grad.shape} != composite shape {request.image.shape}"
                )
            if not np.all(np.isfinite(grad)):
                raise GuidanceError("remote gradient contains non-finite values")
            return GuidanceResponse(
                grad=grad,
                t_used=int(payload["t"]),
                w_used=float(payload["w"]),
                diagnostics={"backend": "remote"},
            )
        raise TransportError(
            f"/v1/grad unreachable after {self.retries + 1} attempts: {last_exc}"
        )
