"""Stable Diffusion + ControlNet backbone through ``diffusers`` (optional dependency).

Every UNet attention layer gets a processor that defers to the active
:class:`~longedit.attention.AttentionHooks`: self-attention reads its
keys/values from ``hooks.context`` (cross-window attention), and text
cross-attention hands its probabilities to ``hooks.cross_attention`` when
the hooks ask for them (mask capture). The ControlNet keeps stock attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..attention import AttentionHooks
from ..diffusion import BackboneAdapter, NoiseSchedule
from ..errors import AttentionError, BackboneError


@dataclass(frozen=True)
class DiffusersPrompt:
    text: str
    input_ids: tuple[int, ...]
    embeddings: torch.Tensor  # [1, tokens, D]


class _Routing:
    """Mutable state shared by all processors during one UNet call."""

    hooks: AttentionHooks = AttentionHooks()
    latent_hw: tuple[int, int] = (0, 0)


def _grid(length: int, latent_hw: tuple[int, int]) -> tuple[int, int]:
    h, w = latent_hw
    factor = round(math.sqrt(h * w / length))
    grid = (math.ceil(h / factor), math.ceil(w / factor))
    if grid[0] * grid[1] != length:
        raise AttentionError(f"cannot place {length} attention positions on a {h}x{w} latent")
    return grid


class HookedAttnProcessor:
    def __init__(self, layer: str, routing: _Routing):
        self.layer = layer
        self.routing = routing

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None,
                 temb=None, *args, **kwargs):
        hooks = self.routing.hooks
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        batch = hidden_states.shape[0]

        is_cross = encoder_hidden_states is not None
        if is_cross:
            context = encoder_hidden_states
            if attn.norm_cross:
                context = attn.norm_encoder_hidden_states(context)
        elif hooks.routes_self_attention:
            ctx = hooks.context(self.layer, hidden_states.detach().float().cpu().numpy())
            context = torch.as_tensor(ctx, dtype=hidden_states.dtype, device=hidden_states.device)
        else:
            context = hidden_states

        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)
        head_dim = key.shape[-1] // attn.heads
        query = query.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
        key = key.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
        value = value.view(batch, -1, attn.heads, head_dim).transpose(1, 2)

        if is_cross and hooks.wants_cross_attention:
            probs = (query @ key.transpose(-1, -2) * attn.scale).softmax(dim=-1)
            grid = _grid(query.shape[2], self.routing.latent_hw)
            hooks.cross_attention(self.layer, probs.double().cpu().numpy(), grid)
            out = probs @ value
        else:
            out = F.scaled_dot_product_attention(query, key, value, scale=attn.scale)

        out = out.transpose(1, 2).reshape(batch, -1, attn.heads * head_dim).to(query.dtype)
        out = attn.to_out[1](attn.to_out[0](out))
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class DiffusersBackbone(BackboneAdapter):
    """Latent diffusion backbone backed by ``diffusers`` modules.

    Pass model ids (loaded with ``from_pretrained``) or ready modules through
    :meth:`from_components`. Latents cross the adapter boundary as float64
    numpy arrays; the model itself runs in ``dtype`` on ``device``.
    """

    name = "diffusers"
    reconstruction_tolerance = 0.1  # the VAE is lossy

    def __init__(self, model: str = "runwayml/stable-diffusion-v1-5",
                 controlnet: str | None = "lllyasviel/sd-controlnet-canny",
                 device: str | None = None, dtype: str = "float32"):
        from diffusers import AutoencoderKL, ControlNetModel, DDIMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        torch_dtype = getattr(torch, dtype)
        components = {
            "unet": UNet2DConditionModel.from_pretrained(model, subfolder="unet", torch_dtype=torch_dtype),
            "vae": AutoencoderKL.from_pretrained(model, subfolder="vae", torch_dtype=torch_dtype),
            "text_encoder": CLIPTextModel.from_pretrained(model, subfolder="text_encoder",
                                                          torch_dtype=torch_dtype),
            "tokenizer": CLIPTokenizer.from_pretrained(model, subfolder="tokenizer"),
            "scheduler_config": dict(DDIMScheduler.load_config(model, subfolder="scheduler")),
            "controlnet": ControlNetModel.from_pretrained(controlnet, torch_dtype=torch_dtype)
            if controlnet else None,
        }
        self._setup(components, device, {"model": model, "controlnet": controlnet, "dtype": dtype})

    @classmethod
    def from_components(cls, unet, vae, text_encoder, tokenizer, scheduler_config: dict,
                        controlnet=None, device: str | None = None,
                        identity: dict[str, Any] | None = None) -> "DiffusersBackbone":
        self = cls.__new__(cls)
        self._setup({"unet": unet, "vae": vae, "text_encoder": text_encoder, "tokenizer": tokenizer,
                     "scheduler_config": scheduler_config, "controlnet": controlnet},
                    device, identity or {"model": "<in-memory>"})
        return self

    def _setup(self, parts: dict[str, Any], device: str | None, identity: dict[str, Any]) -> None:
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.unet = parts["unet"].to(self.device).eval()
        self.vae = parts["vae"].to(self.device).eval()
        self.text_encoder = parts["text_encoder"].to(self.device).eval()
        self.tokenizer = parts["tokenizer"]
        self.controlnet = parts["controlnet"].to(self.device).eval() if parts["controlnet"] is not None else None
        self.dtype = self.unet.dtype
        self.scheduler_config = dict(parts["scheduler_config"])
        self.identity = identity
        self._routing = _Routing()
        self.unet.set_attn_processor({name: HookedAttnProcessor(name.removesuffix(".processor"), self._routing)
                                      for name in self.unet.attn_processors})
        self._vae_scale = float(getattr(self.vae.config, "scaling_factor", 0.18215))

    def noise_schedule(self) -> NoiseSchedule:
        cfg = self.scheduler_config
        args = (cfg.get("beta_start", 8.5e-4), cfg.get("beta_end", 1.2e-2),
                cfg.get("num_train_timesteps", 1000))
        kind = cfg.get("beta_schedule", "scaled_linear")
        if kind == "scaled_linear":
            return NoiseSchedule.scaled_linear(*args)
        if kind == "linear":
            return NoiseSchedule.linear(*args)
        raise BackboneError(f"unsupported beta schedule {kind!r}")

    @torch.no_grad()
    def encode(self, frames: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(frames).transpose(0, 3, 1, 2) * 2.0 - 1.0,
                            dtype=self.dtype, device=self.device)
        z = self.vae.encode(x).latent_dist.mean * self._vae_scale
        return z.double().cpu().numpy()

    @torch.no_grad()
    def decode(self, latents: np.ndarray) -> np.ndarray:
        z = torch.as_tensor(latents / self._vae_scale, dtype=self.dtype, device=self.device)
        x = self.vae.decode(z).sample
        return ((x.double().cpu().numpy().transpose(0, 2, 3, 1) + 1.0) / 2.0).clip(0.0, 1.0)

    @torch.no_grad()
    def encode_prompt(self, prompt: str) -> DiffusersPrompt:
        tok = self.tokenizer(prompt, padding="max_length", max_length=self.tokenizer.model_max_length,
                             truncation=True, return_tensors="pt")
        emb = self.text_encoder(tok.input_ids.to(self.device))[0]
        return DiffusersPrompt(prompt, tuple(tok.input_ids[0].tolist()), emb)

    def token_positions(self, prompt: str, words: Sequence[str]) -> list[int]:
        ids = self.tokenizer(prompt).input_ids
        positions: set[int] = set()
        for word in words:
            sub = self.tokenizer(word, add_special_tokens=False).input_ids
            hits = [s for s in range(len(ids) - len(sub) + 1) if ids[s:s + len(sub)] == sub]
            if not sub or not hits:
                raise AttentionError(f"object token {word!r} not found in {prompt!r}")
            for s in hits:
                positions.update(range(s, s + len(sub)))
        return sorted(positions)

    @torch.no_grad()
    def predict_noise(self, latents, timestep, prompt_embedding: DiffusersPrompt, control=None,
                      control_scale=1.0, attention=None) -> np.ndarray:
        z = torch.as_tensor(latents, dtype=self.dtype, device=self.device)
        text = prompt_embedding.embeddings.to(self.device, self.dtype).expand(z.shape[0], -1, -1)
        t = torch.tensor(int(timestep), device=self.device)
        self._routing.hooks = attention if attention is not None else AttentionHooks()
        self._routing.latent_hw = tuple(z.shape[-2:])
        extra: dict[str, Any] = {}
        try:
            if self.controlnet is not None and control is not None:
                cond = torch.as_tensor(np.asarray(control).transpose(0, 3, 1, 2), dtype=self.dtype,
                                       device=self.device)
                down, mid = self.controlnet(z, t, encoder_hidden_states=text, controlnet_cond=cond,
                                            conditioning_scale=float(control_scale), return_dict=False)
                extra = {"down_block_additional_residuals": down, "mid_block_additional_residual": mid}
            eps = self.unet(z, t, encoder_hidden_states=text, **extra).sample
        finally:
            self._routing.hooks = AttentionHooks()
        return eps.double().cpu().numpy()

    def describe(self) -> dict[str, Any]:
        return {"name": self.name, **self.identity,
                "schedule": self.scheduler_config.get("beta_schedule", "scaled_linear")}
