"""Stable Diffusion 1.5 + ControlNet (normal) guidance backend.

Heavy dependencies (torch, diffusers) load lazily on first use; the server
reports 503 from /v1/health until the models are in memory. The control
strength maps to the ControlNet conditioning scale rather than scaling the
normal map's pixels (see the protocol notes in the README).
"""

from __future__ import annotations

import threading

import numpy as np

from .mock import TimestepError

SD_MODEL = "runwayml/stable-diffusion-v1-5"
CONTROLNET_MODEL = "lllyasviel/control_v11p_sd15_normalbae"


class SdGuidance:
    mode = "sd"

    def __init__(self, device: str | None = None, t_range=(0.02, 0.98)):
        self.t_range = t_range
        self._device = device
        self._lock = threading.Lock()
        self._models = None
        self._error: Exception | None = None

    @property
    def ready(self) -> bool:
        return self._models is not None

    def load(self) -> None:
        with self._lock:
            if self._models is not None:
                return
            if self._error is not None:
                raise self._error
            try:
                self._models = self._load_models()
            except Exception as exc:  # remember the failure; health stays 503
                self._error = exc
                raise

    def _load_models(self):
        import torch
        from diffusers import (
            AutoencoderKL,
            ControlNetModel,
            DDPMScheduler,
            UNet2DConditionModel,
        )
        from transformers import CLIPTextModel, CLIPTokenizer

        device = self._device or ("cuda" if torch.cuda.is_available() else "cpu")
        dtype = torch.float16 if device == "cuda" else torch.float32
        vae = AutoencoderKL.from_pretrained(SD_MODEL, subfolder="vae", torch_dtype=dtype)
        unet = UNet2DConditionModel.from_pretrained(SD_MODEL, subfolder="unet", torch_dtype=dtype)
        text_encoder = CLIPTextModel.from_pretrained(SD_MODEL, subfolder="text_encoder", torch_dtype=dtype)
        tokenizer = CLIPTokenizer.from_pretrained(SD_MODEL, subfolder="tokenizer")
        controlnet = ControlNetModel.from_pretrained(CONTROLNET_MODEL, torch_dtype=dtype)
        scheduler = DDPMScheduler.from_pretrained(SD_MODEL, subfolder="scheduler")
        for module in (vae, unet, text_encoder, controlnet):
            module.to(device).eval().requires_grad_(False)
        return dict(
            torch=torch, vae=vae, unet=unet, text_encoder=text_encoder,
            tokenizer=tokenizer, controlnet=controlnet,
            alphas_cumprod=scheduler.alphas_cumprod.to(device),
            device=device, dtype=dtype,
        )

    # -- helpers ---------------------------------------------------------

    def _embed(self, prompt: str):
        m = self._models
        tokens = m["tokenizer"](
            [prompt], padding="max_length",
            max_length=m["tokenizer"].model_max_length,
            truncation=True, return_tensors="pt",
        ).input_ids.to(m["device"])
        with m["torch"].no_grad():
            return m["text_encoder"](tokens)[0]

    def _eps_branches(self, latents, t, prompt, control_image, control_scale):
        """Conditioned (prompt + control) and unconditioned noise predictions."""
        m = self._models
        torch = m["torch"]
        t_tensor = torch.tensor([t - 1], device=m["device"])
        with torch.no_grad():
            cond_emb = self._embed(prompt)
            down, mid = m["controlnet"](
                latents, t_tensor, encoder_hidden_states=cond_emb,
                controlnet_cond=control_image,
                conditioning_scale=float(control_scale),
                return_dict=False,
            )
            eps_cond = m["unet"](
                latents, t_tensor, encoder_hidden_states=cond_emb,
                down_block_additional_residuals=down,
                mid_block_additional_residual=mid,
            ).sample
            uncond_emb = self._embed("")
            eps_uncond = m["unet"](latents, t_tensor, encoder_hidden_states=uncond_emb).sample
        return eps_cond, eps_uncond

    def _to_control(self, normal_rgb: np.ndarray):
        m = self._models
        torch = m["torch"]
        img = torch.from_numpy(normal_rgb.astype(np.float32)).permute(2, 0, 1)[None]
        return img.to(m["device"], m["dtype"])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= 1000:
            raise TimestepError(f"timestep {t} outside [1, 1000]")

    def sample_t(self, seed: int) -> int:
        lo = max(1, int(round(self.t_range[0] * 1000)))
        hi = min(1000, int(round(self.t_range[1] * 1000)))
        return int(np.random.default_rng(seed).integers(lo, hi + 1))

    # -- endpoints -------------------------------------------------------

    def eps_pair(self, x_t: np.ndarray, t: int, prompt: str = "",
                 control: np.ndarray | None = None, control_scale: float = 1.0):
        """x_t is model-native latent (4, H/8, W/8); control is an RGB map."""
        self.load()
        self.check_t(t)
        m = self._models
        torch = m["torch"]
        latents = torch.from_numpy(x_t.astype(np.float32))[None].to(m["device"], m["dtype"])
        ctrl = self._to_control(control) if control is not None else torch.zeros(
            (1, 3, x_t.shape[1] * 8, x_t.shape[2] * 8), device=m["device"], dtype=m["dtype"]
        )
        eps_cond, eps_uncond = self._eps_branches(latents, t, prompt, ctrl, control_scale)
        return (
            eps_cond[0].float().cpu().numpy().astype(np.float64),
            eps_uncond[0].float().cpu().numpy().astype(np.float64),
        )

    def grad(self, image: np.ndarray, normal: np.ndarray, prompt: str,
             control_scale: float, cfg_scale: float, t: int | None,
             seed: int, w_mode: str):
        """w(t)(eps_hat - eps) mapped back to RGB via VAE-encoder backprop."""
        self.load()
        if t is None:
            t = self.sample_t(seed)
        else:
            self.check_t(t)
        m = self._models
        torch = m["torch"]
        gen = torch.Generator(device="cpu").manual_seed(int(seed))

        rgb = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)[None]
        rgb = rgb.to(m["device"], m["dtype"]).requires_grad_(True)
        posterior = m["vae"].encode(rgb * 2.0 - 1.0).latent_dist
        latents0 = posterior.mean * m["vae"].config.scaling_factor

        ab = m["alphas_cumprod"][t - 1]
        eps = torch.randn(latents0.shape, generator=gen).to(m["device"], m["dtype"])
        x_t = ab.sqrt() * latents0 + (1 - ab).sqrt() * eps

        ctrl = self._to_control(normal)
        eps_cond, eps_uncond = self._eps_branches(
            x_t.detach(), t, prompt, ctrl, control_scale
        )
        eps_hat = eps_cond + cfg_scale * (eps_cond - eps_uncond)
        w = float(1.0 - ab) if w_mode == "sigma2" else 1.0
        residual = (w * (eps_hat - eps)).detach()

        # d<latents0, residual>/d(rgb): pulls the latent-space residual back
        # through the encoder so the wire carries an RGB-space gradient
        (latents0 * residual).sum().backward()
        grad = rgb.grad[0].permute(1, 2, 0).float().cpu().numpy().astype(np.float64)
        return grad, t, w
