"""Video loading/saving and the split of a frame sequence into fixed-size windows."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .errors import ShapeError, VideoIOError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


@dataclass(frozen=True)
class VideoClip:
    """Frames ``[M, H, W, 3]`` in ``[0, 1]``; ``pad_count`` trailing frames are padding."""

    frames: np.ndarray
    frame_rate: float = 8.0
    pad_count: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ShapeError(f"frames must be [M, H, W, 3], got {f.shape}")
        if f.shape[0] < 1:
            raise ShapeError("a clip needs at least one frame")
        if not np.isfinite(f).all() or f.min() < 0.0 or f.max() > 1.0:
            raise ShapeError("frame values must be finite and within [0, 1]")
        if self.frame_rate <= 0:
            raise ShapeError(f"frame_rate must be positive, got {self.frame_rate}")
        if not 0 <= self.pad_count < f.shape[0]:
            raise ShapeError(f"pad_count {self.pad_count} out of range for {f.shape[0]} frames")
        view = f.view()
        view.setflags(write=False)
        object.__setattr__(self, "frames", view)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class WindowPlan:
    """Consecutive, disjoint windows of ``window_size`` frames.

    Window and in-window indices are 1-based, global frame indices are 0-based.
    """

    window_size: int
    num_frames: int  # M, real frames
    pad_count: int

    @property
    def padded_frames(self) -> int:
        return self.num_frames + self.pad_count

    @property
    def window_count(self) -> int:
        return self.padded_frames // self.window_size

    def global_index(self, i: int, j: int) -> int:
        if not (1 <= i <= self.window_count and 1 <= j <= self.window_size):
            raise IndexError(f"window position ({i}, {j}) outside the plan")
        return (i - 1) * self.window_size + (j - 1)

    def locate(self, g: int) -> tuple[int, int]:
        if not 0 <= g < self.padded_frames:
            raise IndexError(f"frame {g} outside the plan")
        i, j = divmod(g, self.window_size)
        return i + 1, j + 1

    def window_frames(self, i: int) -> range:
        start = self.global_index(i, 1)
        return range(start, start + self.window_size)

    def is_pad(self, g: int) -> bool:
        return g >= self.num_frames


def make_plan(num_frames: int, window_size: int) -> WindowPlan:
    if window_size < 2:
        raise ShapeError(f"window_size must be >= 2, got {window_size}")
    if num_frames < 1:
        raise ShapeError("cannot plan windows for an empty clip")
    pad = (-num_frames) % window_size
    return WindowPlan(window_size=window_size, num_frames=num_frames, pad_count=pad)


def plan_windows(clip: VideoClip, window_size: int) -> tuple[VideoClip, WindowPlan]:
    """Pad ``clip`` by repeating its last frame until its length divides evenly."""
    plan = make_plan(clip.num_frames - clip.pad_count, window_size)
    real = clip.frames[: plan.num_frames]
    if plan.pad_count:
        tail = np.repeat(real[-1:], plan.pad_count, axis=0)
        frames = np.concatenate([real, tail], axis=0)
    else:
        frames = real.copy()
    return VideoClip(frames, clip.frame_rate, plan.pad_count), plan


def split_windows(clip: VideoClip, plan: WindowPlan) -> list[np.ndarray]:
    if clip.num_frames != plan.padded_frames:
        raise ShapeError(f"clip has {clip.num_frames} frames, plan expects {plan.padded_frames}")
    k = plan.window_size
    return [clip.frames[w * k:(w + 1) * k] for w in range(plan.window_count)]


def merge_windows(windows: Sequence[np.ndarray], plan: WindowPlan,
                  frame_rate: float = 8.0) -> VideoClip:
    """Concatenate windows in order and drop the trailing pad frames."""
    if len(windows) != plan.window_count:
        raise ShapeError(f"expected {plan.window_count} windows, got {len(windows)}")
    first = np.asarray(windows[0])
    for n, w in enumerate(windows):
        if w.shape[0] != plan.window_size or w.shape[1:] != first.shape[1:]:
            raise ShapeError(f"window {n + 1} has shape {w.shape}, expected "
                             f"{(plan.window_size,) + first.shape[1:]}")
    frames = np.concatenate(windows, axis=0)[: plan.num_frames]
    return VideoClip(frames, frame_rate, 0)


# -- decoding / encoding ------------------------------------------------------

def _natural_key(p: Path):
    return [int(t) if t.isdigit() else t.lower() for t in re.split(r"(\d+)", p.name)]


def _fit(frame_rgb: np.ndarray, resolution: tuple[int, int] | None) -> np.ndarray:
    """Center-crop to the target aspect ratio, then resize."""
    if resolution is None:
        return frame_rgb
    th, tw = resolution
    h, w = frame_rgb.shape[:2]
    if (h, w) != (th, tw):
        target_aspect = tw / th
        if w / h > target_aspect:
            cw = max(1, round(h * target_aspect))
            x0 = (w - cw) // 2
            frame_rgb = frame_rgb[:, x0:x0 + cw]
        else:
            ch = max(1, round(w / target_aspect))
            y0 = (h - ch) // 2
            frame_rgb = frame_rgb[y0:y0 + ch]
        shrinking = frame_rgb.shape[0] > th
        interp = cv2.INTER_AREA if shrinking else cv2.INTER_CUBIC
        frame_rgb = cv2.resize(frame_rgb, (tw, th), interpolation=interp)
    return frame_rgb


def _to_unit(frame: np.ndarray, source: str) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame.astype(np.float64) / 255.0
    if frame.dtype == np.uint16:
        return frame.astype(np.float64) / 65535.0
    raise VideoIOError(f"unsupported pixel format {frame.dtype} in {source}")


def _read_image(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise VideoIOError(f"cannot read image {path}")
    if img.ndim == 2:
        img = cv2.cvtColor(img, cv2.COLOR_GRAY2RGB)
    elif img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    elif img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    else:
        raise VideoIOError(f"unsupported channel count {img.shape[2]} in {path}")
    return img


def load_video(path: str | Path, resolution: tuple[int, int] | None = (512, 512),
               max_frames: int | None = None, frame_rate: float = 8.0) -> VideoClip:
    """Load a video container or a directory of ordered image frames.

    ``frame_rate`` is only used for image directories; containers report their own.
    """
    path = Path(path)
    frames: list[np.ndarray] = []
    if path.is_dir():
        files = sorted((p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
                       key=_natural_key)
        if max_frames is not None:
            files = files[:max_frames]
        for f in files:
            img = _read_image(f)
            frames.append(_fit(_to_unit(img, str(f)), resolution))
    elif path.is_file():
        cap = cv2.VideoCapture(str(path))
        if not cap.isOpened():
            raise VideoIOError(f"cannot open video {path}")
        fps = cap.get(cv2.CAP_PROP_FPS)
        if fps and fps > 0:
            frame_rate = float(fps)
        try:
            while max_frames is None or len(frames) < max_frames:
                ok, bgr = cap.read()
                if not ok:
                    break
                rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
                frames.append(_fit(_to_unit(rgb, str(path)), resolution))
        finally:
            cap.release()
    else:
        raise VideoIOError(f"no such file or directory: {path}")
    if not frames:
        raise VideoIOError(f"no frames found in {path}")
    stack = np.clip(np.stack(frames), 0.0, 1.0)
    return VideoClip(stack, frame_rate, 0)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_video(clip: VideoClip, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = clip.resolution
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"), clip.frame_rate, (w, h))
    if not writer.isOpened():
        raise VideoIOError(f"cannot open video writer for {path}")
    try:
        for frame in to_uint8(clip.frames[: clip.num_frames - clip.pad_count]):
            writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    finally:
        writer.release()
    return path


def save_frames(frames: np.ndarray, directory: str | Path, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for n, frame in enumerate(to_uint8(frames)):
        p = directory / f"{prefix}_{n:05d}.png"
        if frame.ndim == 3 and frame.shape[-1] == 3:
            frame = cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(p), frame)
        out.append(p)
    return out


def frame_grid(clip: VideoClip, count: int = 8) -> np.ndarray:
    """``count`` evenly sampled frames laid side by side, as one RGB image."""
    real = clip.frames[: clip.num_frames - clip.pad_count]
    count = min(count, real.shape[0])
    idx = np.linspace(0, real.shape[0] - 1, count).round().astype(int)
    return np.concatenate(list(real[idx]), axis=1)


def save_preview(clip: VideoClip, path: str | Path, count: int = 8) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = to_uint8(frame_grid(clip, count))
    cv2.imwrite(str(path), cv2.cvtColor(grid, cv2.COLOR_RGB2BGR))
    return path
