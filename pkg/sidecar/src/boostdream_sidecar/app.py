"""HTTP surface: /v1/health, /v1/eps, /v1/grad.

Error contract: 400 for malformed shapes/fields (message names the field),
422 for a timestep outside [1, T], 500 with diagnostics on model failure,
503 while a model backend is still loading.
"""

from __future__ import annotations

import threading

from fastapi import Body, FastAPI
from fastapi.responses import JSONResponse

from . import wire
from .mock import TimestepError


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(backend) -> FastAPI:
    app = FastAPI(title="boostdream-sidecar")
    lock = threading.Lock()  # one request at a time per model instance

    @app.get("/v1/health")
    def health():
        if not backend.ready:
            return _error(503, "model is still loading")
        return {"status": "ok", "mode": backend.mode}

    @app.post("/v1/eps")
    def eps(payload: dict = Body(...)):
        try:
            x_t = wire.decode(payload.get("x_t"), "x_t")
            control = wire.decode(payload.get("control"), "control")
            t = _require_int(payload, "t")
            _require_str(payload, "prompt")
            _require_number(payload, "lambda")
        except (wire.WireError, FieldError) as exc:
            return _error(400, str(exc))
        try:
            with lock:
                if backend.mode == "mock":
                    eps_cond, eps_uncond = backend.eps_pair(x_t, t)
                else:
                    eps_cond, eps_uncond = backend.eps_pair(
                        x_t, t, prompt=payload["prompt"], control=control,
                        control_scale=float(payload["lambda"]),
                    )
        except TimestepError as exc:
            return _error(422, str(exc))
        except ValueError as exc:
            return _error(400, str(exc))
        except Exception as exc:  # model failure: engine treats 500 as skippable
            return _error(500, f"backend failure: {exc}")
        return {"eps_cond": wire.encode(eps_cond), "eps_uncond": wire.encode(eps_uncond)}

    @app.post("/v1/grad")
    def grad(payload: dict = Body(...)):
        try:
            image = wire.decode(payload.get("image"), "image")
            normal = wire.decode(payload.get("normal"), "normal")
            seed = _require_int(payload, "seed")
            _require_str(payload, "prompt")
            _require_number(payload, "lambda")
            _require_number(payload, "s")
            w_mode = payload.get("w_mode", "sigma2")
            if w_mode not in ("sigma2", "uniform"):
                raise FieldError("w_mode", f"unknown value {w_mode!r}")
            t = payload.get("t")
            if t is not None and not isinstance(t, int):
                raise FieldError("t", "must be an integer timestep")
            if image.shape != normal.shape:
                raise FieldError("normal", f"shape {normal.shape} != image shape {image.shape}")
            if image.ndim != 3 or image.shape[2] != 3:
                raise FieldError("image", f"expected HxWx3, got {image.shape}")
            if image.shape[0] % 2 or image.shape[1] % 2:
                raise FieldError("image", "composite dimensions must be even")
        except (wire.WireError, FieldError) as exc:
            return _error(400, str(exc))
        try:
            with lock:
                if backend.mode == "mock":
                    out, t_used, w = backend.grad(image, t, seed, w_mode)
                else:
                    out, t_used, w = backend.grad(
                        image, normal, payload["prompt"], float(payload["lambda"]),
                        float(payload["s"]), t, seed, w_mode,
                    )
        except TimestepError as exc:
            return _error(422, str(exc))
        except ValueError as exc:
            return _error(400, str(exc))
        except Exception as exc:
            return _error(500, f"backend failure: {exc}")
        return {"grad": wire.encode(out), "t": t_used, "w": w}

    return app


class FieldError(ValueError):
    def __init__(self, field: str, why: str):
        super().__init__(f"field '{field}': {why}")


def _require_int(payload: dict, key: str) -> int:
    val = payload.get(key)
    if not isinstance(val, int):
        raise FieldError(key, "required integer field")
    return val


def _require_str(payload: dict, key: str) -> str:
    val = payload.get(key)
    if not isinstance(val, str):
        raise FieldError(key, "required string field")
    return val


def _require_number(payload: dict, key: str) -> float:
    val = payload.get(key)
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise FieldError(key, "required numeric field")
    return float(val)
