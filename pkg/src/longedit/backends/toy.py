"""A small analytic backbone for exact tests and offline runs.

The autoencoder is a pixel-unshuffle followed by an orthogonal channel mix,
so ``decode(encode(x)) == x`` up to float rounding. The noise prediction is
``c_p * z`` with a per-prompt constant ``c_p``, optionally plus a term read
out from a tiny attention stack (two self-attention layers around one text
cross-attention layer) and a control term. Both extra terms default to zero
gain; the attention layers still run through the hooks so caches and
captures are exercised either way.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ..attention import AttentionHooks, AttentionProjection, softmax
from ..diffusion import BackboneAdapter, NoiseSchedule
from ..errors import AttentionError, ShapeError


def _unit_hash(text: str, salt: str = "") -> float:
    digest = hashlib.sha256((salt + text).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


def tokenize(prompt: str) -> list[str]:
    return ["<bos>"] + re.findall(r"\w+|[^\w\s]", prompt.lower())


@dataclass(frozen=True)
class ToyPrompt:
    text: str
    tokens: tuple[str, ...]
    coefficient: float
    embeddings: np.ndarray  # [tokens, D]


class ToyBackbone(BackboneAdapter):
    name = "toy"
    reconstruction_tolerance = 1e-12

    SELF_LAYERS = ("down_blocks.0.attn1", "up_blocks.0.attn1")
    CROSS_LAYER = "up_blocks.0.attn2"

    def __init__(self, patch: int = 2, feature_dim: int = 16, heads: int = 2,
                 noise_scale: float = 5e-5, attention_gain: float = 0.0,
                 control_gain: float = 0.0, uniform_cross_attention: bool = False,
                 seed: int = 0, schedule: NoiseSchedule | None = None):
        if feature_dim % heads:
            raise ValueError("feature_dim must be divisible by heads")
        self.patch = patch
        self.channels = 3 * patch * patch
        self.feature_dim = feature_dim
        self.heads = heads
        self.noise_scale = noise_scale
        self.attention_gain = attention_gain
        self.control_gain = control_gain
        self.uniform_cross_attention = uniform_cross_attention
        self.seed = seed
        self._schedule = schedule or NoiseSchedule.linear()

        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.normal(size=(self.channels, self.channels)))
        self._mix = q * np.sign(np.diag(r))  # orthogonal, so its inverse is the transpose
        d = feature_dim
        self._w_in = rng.normal(0, 1 / np.sqrt(self.channels), (self.channels, d))
        self._w_out = rng.normal(0, 1 / np.sqrt(d), (d, self.channels))
        self._self_proj = {name: AttentionProjection.random(d, heads=heads, rng=rng)
                           for name in self.SELF_LAYERS}
        self._cross = AttentionProjection.random(d, heads=heads, rng=rng)

    # -- autoencoder ---------------------------------------------------------

    def noise_schedule(self) -> NoiseSchedule:
        return self._schedule

    def encode(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        n, hgt, wid, c = frames.shape
        f = self.patch
        if c != 3 or hgt % f or wid % f:
            raise ShapeError(f"toy encoder needs [N, H, W, 3] with H, W divisible by {f}, "
                             f"got {frames.shape}")
        x = frames.reshape(n, hgt // f, f, wid // f, f, 3).transpose(0, 2, 4, 5, 1, 3)
        x = x.reshape(n, self.channels, hgt // f, wid // f)
        return np.einsum("kc,nchw->nkhw", self._mix, x)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        n, c, h, w = latents.shape
        if c != self.channels:
            raise ShapeError(f"toy decoder needs {self.channels} channels, got {c}")
        f = self.patch
        x = np.einsum("kc,nkhw->nchw", self._mix, latents)
        x = x.reshape(n, f, f, 3, h, w).transpose(0, 4, 1, 5, 2, 3)
        return x.reshape(n, h * f, w * f, 3)

    # -- text ----------------------------------------------------------------

    def encode_prompt(self, prompt: str) -> ToyPrompt:
        tokens = tuple(tokenize(prompt))
        coefficient = self.noise_scale * (2 * _unit_hash(prompt, "coef") - 1)
        emb = np.stack([
            np.random.default_rng(int(_unit_hash(tok, "tok") * 2**32)).normal(size=self.feature_dim)
            for tok in tokens
        ])
        return ToyPrompt(prompt, tokens, coefficient, emb)

    def token_positions(self, prompt: str, words: Sequence[str]) -> list[int]:
        tokens = tokenize(prompt)
        positions: list[int] = []
        for word in words:
            sub = tokenize(word)[1:]
            hits = [s for s in range(1, len(tokens) - len(sub) + 1)
                    if sub and tokens[s:s + len(sub)] == sub]
            if not hits:
                raise AttentionError(f"object token {word!r} not found in prompt {prompt!r}")
            for s in hits:
                positions.extend(range(s, s + len(sub)))
        return sorted(set(positions))

    def feature_shapes(self, resolution: tuple[int, int]) -> dict[str, tuple[int, int]]:
        length = (resolution[0] // self.patch) * (resolution[1] // self.patch)
        return {name: (length, self.feature_dim) for name in self.SELF_LAYERS}

    # -- noise prediction ----------------------------------------------------

    def _control_term(self, control: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        n, c, h, w = shape
        gray = np.asarray(control, dtype=np.float64).mean(axis=-1)
        if gray.shape[1] % h or gray.shape[2] % w:
            raise ShapeError(f"control maps {control.shape} do not tile the latent grid {(h, w)}")
        fy, fx = gray.shape[1] // h, gray.shape[2] // w
        pooled = gray.reshape(n, h, fy, w, fx).mean(axis=(2, 4))
        return np.broadcast_to(pooled[:, None], shape)

    def predict_noise(self, latents, timestep, prompt_embedding: ToyPrompt, control=None,
                      control_scale=1.0, attention=None) -> np.ndarray:
        hooks = attention if attention is not None else AttentionHooks()
        z = np.asarray(latents, dtype=np.float64)
        b, c, h, w = z.shape
        eps = prompt_embedding.coefficient * z

        tokens = z.reshape(b, c, h * w).transpose(0, 2, 1)
        feats = tokens @ self._w_in
        feats = feats + hooks.self_attention(self.SELF_LAYERS[0], feats, self._self_proj[self.SELF_LAYERS[0]])

        cross = self._cross
        dh = cross.head_dim
        q = (feats @ cross.to_q).reshape(b, h * w, self.heads, dh).transpose(0, 2, 1, 3)
        text = prompt_embedding.embeddings
        k = (text @ cross.to_k).reshape(-1, self.heads, dh).transpose(1, 0, 2)
        v = (text @ cross.to_v).reshape(-1, self.heads, dh).transpose(1, 0, 2)
        if self.uniform_cross_attention:
            probs = np.full((b, self.heads, h * w, text.shape[0]), 1.0 / text.shape[0])
        else:
            probs = softmax(q @ k.transpose(0, 2, 1)[None] / np.sqrt(dh))
        hooks.cross_attention(self.CROSS_LAYER, probs, (h, w))
        feats = feats + (probs @ v[None]).transpose(0, 2, 1, 3).reshape(b, h * w, -1) @ cross.to_out

        feats = feats + hooks.self_attention(self.SELF_LAYERS[1], feats, self._self_proj[self.SELF_LAYERS[1]])

        if self.attention_gain:
            readout = (feats @ self._w_out).transpose(0, 2, 1).reshape(b, c, h, w)
            eps = eps + self.attention_gain * readout
        if self.control_gain and control is not None:
            eps = eps + self.control_gain * control_scale * self._control_term(control, z.shape)
        return eps

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "patch": self.patch,
            "feature_dim": self.feature_dim,
            "heads": self.heads,
            "noise_scale": self.noise_scale,
            "attention_gain": self.attention_gain,
            "control_gain": self.control_gain,
            "uniform_cross_attention": self.uniform_cross_attention,
            "seed": self.seed,
        }


def toy_backend(**options) -> ToyBackbone:
    return ToyBackbone(**options)
