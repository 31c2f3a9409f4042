"""Objective quality metrics for an edited clip: prompt alignment, temporal
consistency, source fidelity (embedding cosines) and frame-to-frame flicker."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import MetricsError
from .video import VideoClip


class Embedder(Protocol):
    name: str

    def embed_images(self, frames: np.ndarray) -> np.ndarray:
        """``[N, H, W, 3]`` frames to ``[N, E]`` unit vectors."""

    def embed_text(self, prompt: str) -> np.ndarray:
        """One prompt to an ``[E]`` unit vector."""


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def _frames(clip: VideoClip | np.ndarray) -> np.ndarray:
    if isinstance(clip, VideoClip):
        return clip.frames[: clip.num_frames - clip.pad_count]
    return np.asarray(clip, dtype=np.float64)


def _embed(embedder: Embedder, frames: np.ndarray) -> np.ndarray:
    try:
        return _unit(np.asarray(embedder.embed_images(frames), dtype=np.float64))
    except MetricsError:
        raise
    except Exception as exc:
        raise MetricsError(f"embedder {getattr(embedder, 'name', embedder)!r} failed: {exc}") from exc


def clip_text_pairs(edited, prompt: str, embedder: Embedder) -> np.ndarray:
    frames = _frames(edited)
    if frames.shape[0] < 1:
        raise MetricsError("need at least one frame")
    img = _embed(embedder, frames)
    txt = _unit(np.asarray(embedder.embed_text(prompt), dtype=np.float64))
    return img @ txt


def clip_text(edited, prompt: str, embedder: Embedder) -> float:
    return float(clip_text_pairs(edited, prompt, embedder).mean())


def clip_temp_pairs(edited, embedder: Embedder) -> np.ndarray:
    frames = _frames(edited)
    if frames.shape[0] < 2:
        raise MetricsError("temporal consistency needs at least two frames")
    e = _embed(embedder, frames)
    return np.sum(e[:-1] * e[1:], axis=-1)


def clip_temp(edited, embedder: Embedder) -> float:
    return float(clip_temp_pairs(edited, embedder).mean())


def clip_se_pairs(source, edited, embedder: Embedder) -> np.ndarray:
    """Cosine between the j-th source frame and the j-th edited frame."""
    src, edt = _frames(source), _frames(edited)
    if src.shape[0] != edt.shape[0]:
        raise MetricsError(f"source has {src.shape[0]} frames, edited has {edt.shape[0]}")
    return np.sum(_embed(embedder, src) * _embed(embedder, edt), axis=-1)


def clip_se(source, edited, embedder: Embedder) -> float:
    return float(clip_se_pairs(source, edited, embedder).mean())


def con_l2_pairs(edited) -> np.ndarray:
    frames = _frames(edited)
    if frames.shape[0] < 2:
        raise MetricsError("Con-L2 needs at least two frames")
    diff = frames[1:] - frames[:-1]
    return np.mean(diff.reshape(diff.shape[0], -1) ** 2, axis=1)


def con_l2(edited) -> float:
    """Mean over consecutive pairs of the per-pixel, per-channel mean squared difference."""
    return float(con_l2_pairs(edited).mean())


@dataclass
class MetricsReport:
    clip_text: float
    clip_temp: float
    clip_se: float
    con_l2: float
    embedder: str = ""
    per_pair: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def evaluate(source, edited, prompt: str, embedder: Embedder) -> MetricsReport:
    text = clip_text_pairs(edited, prompt, embedder)
    temp = clip_temp_pairs(edited, embedder)
    se = clip_se_pairs(source, edited, embedder)
    l2 = con_l2_pairs(edited)
    return MetricsReport(
        clip_text=float(text.mean()),
        clip_temp=float(temp.mean()),
        clip_se=float(se.mean()),
        con_l2=float(l2.mean()),
        embedder=getattr(embedder, "name", type(embedder).__name__),
        per_pair={
            "clip_text": text.tolist(),
            "clip_temp": temp.tolist(),
            "clip_se": se.tolist(),
            "con_l2": l2.tolist(),
        },
    )


# -- embedders ----------------------------------------------------------------

class ToyEmbedder:
    """Weight-free embedder: pooled colour layout for images, hashed words for text.

    Image and text vectors live in one space only loosely; it exists so the
    metric pipeline can run without model weights.
    """

    name = "toy"

    def __init__(self, grid: int = 4, dim: int = 64):
        self.grid = grid
        self.dim = dim
        rng = np.random.default_rng(1234)
        self._proj = rng.normal(size=(grid * grid * 3, dim))

    def embed_images(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        n, h, w, _ = frames.shape
        g = self.grid
        ys = np.linspace(0, h, g + 1).astype(int)
        xs = np.linspace(0, w, g + 1).astype(int)
        cells = np.stack([frames[:, ys[a]:ys[a + 1], xs[b]:xs[b + 1]].mean(axis=(1, 2))
                          for a in range(g) for b in range(g)], axis=1)
        feats = cells.reshape(n, -1) - 0.5
        return _unit(feats @ self._proj)

    def embed_text(self, prompt: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for word in prompt.lower().split():
            seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:4], "little")
            v += np.random.default_rng(seed).normal(size=self.dim)
        return _unit(v)


class ClipEmbedder:
    """CLIP image/text embeddings through ``transformers`` (loaded on first use)."""

    def __init__(self, model: str = "openai/clip-vit-large-patch14", device: str | None = None,
                 batch_size: int = 16):
        self.model_id = model
        self.name = f"clip:{model}"
        self.batch_size = batch_size
        self._device = device
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            import torch
            from transformers import CLIPModel, CLIPProcessor

            self._device = self._device or ("cuda" if torch.cuda.is_available() else "cpu")
            self._model = CLIPModel.from_pretrained(self.model_id).to(self._device).eval()
            self._processor = CLIPProcessor.from_pretrained(self.model_id)
        return self._model, self._processor

    def embed_images(self, frames: np.ndarray) -> np.ndarray:
        import torch

        model, proc = self._load()
        out = []
        for s in range(0, len(frames), self.batch_size):
            batch = [np.round(f * 255).astype(np.uint8) for f in frames[s:s + self.batch_size]]
            inputs = proc(images=batch, return_tensors="pt").to(self._device)
            with torch.no_grad():
                feats = model.get_image_features(**inputs)
            out.append(feats.float().cpu().numpy())
        return _unit(np.concatenate(out))

    def embed_text(self, prompt: str) -> np.ndarray:
        import torch

        model, proc = self._load()
        inputs = proc(text=[prompt], return_tensors="pt", padding=True).to(self._device)
        with torch.no_grad():
            feats = model.get_text_features(**inputs)
        return _unit(feats.float().cpu().numpy()[0])


def load_embedder(name: str) -> Embedder:
    if name == "toy":
        return ToyEmbedder()
    if name == "clip":
        return ClipEmbedder()
    if name.startswith("clip:"):
        return ClipEmbedder(name.split(":", 1)[1])
    raise MetricsError(f"unknown embedder {name!r} (expected 'toy', 'clip' or 'clip:<model>')")
