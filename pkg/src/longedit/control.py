"""Per-frame structural control maps (edges, boundaries, depth)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import ControlError
from .video import VideoClip

# largest Sobel magnitude a [0, 1] image can produce: 4 per axis
_SOBEL_MAX = 4.0 * np.sqrt(2.0)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ControlSignal:
    maps: np.ndarray  # [M, H, W, C] in [0, 1]
    control_type: str

    def __post_init__(self):
        if self.maps.ndim != 4:
            raise ControlError(f"control maps must be [M, H, W, C], got {self.maps.shape}")
        if self.maps.size and (self.maps.min() < 0 or self.maps.max() > 1):
            raise ControlError("control maps must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]


def luminance(frame: np.ndarray) -> np.ndarray:
    return frame @ _LUMA


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels that peak along their gradient direction.

    Ties keep the pixel on the positive side only, so a symmetric ridge two
    pixels wide thins to one.
    """
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)  # 0: horizontal gradient
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape

    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    # (row, col) offsets of the neighbour in the +gradient direction per sector
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = shifted(dy, dx)
        back = shifted(-dy, -dx)
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag > back)
    return np.where(keep, mag, 0.0)


def _hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_frame(frame: np.ndarray, low_threshold: float = 0.1, high_threshold: float = 0.2,
                sigma: float = 1.4) -> np.ndarray:
    """Binary edge map ``[H, W]`` of one RGB frame; thresholds on the [0, 1] magnitude scale."""
    if not 0 < low_threshold < high_threshold:
        raise ControlError(f"canny thresholds must satisfy 0 < low < high, "
                           f"got ({low_threshold}, {high_threshold})")
    gray = luminance(np.asarray(frame, dtype=np.float64))
    if sigma > 0:
        gray = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    mag = np.hypot(gx, gy) / _SOBEL_MAX
    return _hysteresis(_non_max_suppression(mag, gx, gy), low_threshold, high_threshold).astype(np.float64)


def canny_maps(clip: VideoClip, low_threshold: float = 0.1, high_threshold: float = 0.2,
               sigma: float = 1.4, channels: int = 3) -> ControlSignal:
    if not 0 < low_threshold < high_threshold:
        raise ControlError(f"canny thresholds must satisfy 0 < low < high, "
                           f"got ({low_threshold}, {high_threshold})")
    edges = np.stack([canny_frame(f, low_threshold, high_threshold, sigma) for f in clip.frames])
    return ControlSignal(np.repeat(edges[..., None], channels, axis=-1), "canny")


ControlAdapter = Callable[[np.ndarray], np.ndarray]


def external_control(clip: VideoClip, adapter: ControlAdapter, control_type: str = "external",
                     channels: int = 3) -> ControlSignal:
    """Run a frame-to-map model over the clip; maps are clipped to [0, 1]."""
    h, w = clip.resolution
    out = []
    for n, frame in enumerate(clip.frames):
        try:
            m = np.asarray(adapter(frame), dtype=np.float64)
        except Exception as exc:
            raise ControlError(f"{control_type} adapter failed on frame {n}: {exc}") from exc
        if m.ndim == 2:
            m = np.repeat(m[..., None], channels, axis=-1)
        if m.shape[:2] != (h, w) or m.ndim != 3:
            raise ControlError(f"{control_type} adapter returned {m.shape} for frame {n}, "
                               f"expected ({h}, {w}[, C])")
        if m.shape[-1] == 1:
            m = np.repeat(m, channels, axis=-1)
        out.append(np.clip(m, 0.0, 1.0))
    return ControlSignal(np.stack(out), control_type)


def luminance_adapter(frame: np.ndarray) -> np.ndarray:
    return luminance(frame)


def depth_adapter(model: str = "Intel/dpt-hybrid-midas") -> ControlAdapter:
    """Monocular depth through a ``transformers`` depth-estimation pipeline."""
    from transformers import pipeline
    from PIL import Image

    estimator = pipeline("depth-estimation", model=model)

    def run(frame: np.ndarray) -> np.ndarray:
        img = Image.fromarray(np.round(frame * 255).astype(np.uint8))
        depth = np.asarray(estimator(img)["depth"].resize(img.size), dtype=np.float64)
        span = depth.max() - depth.min()
        return (depth - depth.min()) / span if span > 0 else np.zeros_like(depth)

    return run


def hed_adapter(model: str = "lllyasviel/Annotators") -> ControlAdapter:
    """HED soft boundaries via ``controlnet_aux`` (installed separately)."""
    from controlnet_aux import HEDdetector
    from PIL import Image

    detector = HEDdetector.from_pretrained(model)

    def run(frame: np.ndarray) -> np.ndarray:
        h, w = frame.shape[:2]
        img = Image.fromarray(np.round(frame * 255).astype(np.uint8))
        edges = detector(img, detect_resolution=max(h, w), image_resolution=max(h, w))
        return np.asarray(edges.convert("L").resize((w, h)), dtype=np.float64) / 255.0

    return run


def control_for_config(clip: VideoClip, config, adapter: ControlAdapter | None = None) -> ControlSignal:
    kind = getattr(config.control_type, "value", config.control_type)
    if kind == "canny":
        return canny_maps(clip, config.canny_low, config.canny_high, config.canny_sigma)
    if adapter is None:
        adapter = depth_adapter() if kind == "depth" else hed_adapter()
    return external_control(clip, adapter, kind)
