"""Time-independent edit masks from captured object cross-attention maps."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import cv2
import numpy as np

from .attention import CrossAttnMapStack
from .errors import MaskError


def _resize(m: np.ndarray, size: tuple[int, int], nearest: bool = False) -> np.ndarray:
    if m.shape == tuple(size):
        return m
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(m, (size[1], size[0]), interpolation=interp)


def _iter_maps(stack: CrossAttnMapStack | dict | np.ndarray) -> Iterable[np.ndarray]:
    if isinstance(stack, CrossAttnMapStack):
        stack = stack.maps
    if isinstance(stack, dict):
        for maps in stack.values():
            yield from np.asarray(maps, dtype=np.float64).reshape(-1, *np.shape(maps)[-2:])
    else:
        arr = np.asarray(stack, dtype=np.float64)
        if arr.ndim < 2:
            raise MaskError(f"attention maps need at least 2 dims, got {arr.shape}")
        yield from arr.reshape(-1, *arr.shape[-2:])


def estimate_mask(stack: CrossAttnMapStack | dict | np.ndarray, threshold: float,
                  target_size: tuple[int, int]) -> np.ndarray:
    """Binary ``uint8`` mask of shape ``target_size`` from a stack of attention maps.

    Each map is max-normalized, resized to the largest map resolution,
    thresholded (``>= threshold`` is 1), and the binary maps are merged by
    an elementwise max before a nearest-neighbour resize to ``target_size``.
    """
    if not 0.0 < threshold < 1.0:
        raise MaskError(f"threshold must lie in (0, 1), got {threshold}")
    maps = list(_iter_maps(stack))
    if not maps:
        raise MaskError("empty attention map stack")
    if any(m.min() < 0 for m in maps):
        raise MaskError("attention maps must be nonnegative")
    common = max((m.shape for m in maps), key=lambda s: s[0] * s[1])
    pooled = np.zeros(common, dtype=np.uint8)
    for m in maps:
        peak = m.max()
        if peak <= 0:
            continue
        norm = _resize(m / peak, common)
        np.maximum(pooled, (norm >= threshold).astype(np.uint8), out=pooled)
    return _resize(pooled, target_size, nearest=True)


def save_mask_overlay(frame: np.ndarray, mask: np.ndarray, path: str | Path,
                      color=(1.0, 0.0, 0.0), alpha: float = 0.5) -> Path:
    """Write ``frame`` with the mask region tinted, for inspection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = frame.shape[:2]
    m = _resize(mask.astype(np.float64), (h, w), nearest=True)[..., None]
    tint = np.asarray(color, dtype=np.float64)
    out = frame * (1 - alpha * m) + tint * (alpha * m)
    img = np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    return path
