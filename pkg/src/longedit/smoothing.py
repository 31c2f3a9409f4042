"""Temporal smoothing of decoded frames by sequential pairwise interpolation.

Interior frames are rebuilt left to right: each new frame interpolates the
already-smoothed previous frame and the original next frame, while the first
and last frames are kept. Each frame may go through this at most twice,
once inside its window and once over the whole video, since every pass adds
an encode/decode round trip.
"""

from __future__ import annotations

from collections import Counter
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np

from .diffusion import BackboneAdapter, SamplerSchedule, project_to_x0
from .errors import InterpolationBudgetError, InterpolationError

WINDOW = "window"
WHOLE_VIDEO = "whole_video"


class Interpolator(Protocol):
    """Two pixel frames in, the frame halfway between them out (same shape)."""

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray: ...


def midpoint(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a + b) / 2


def _call(psi: Interpolator, a: np.ndarray, b: np.ndarray, index: int) -> np.ndarray:
    try:
        out = np.asarray(psi(a, b), dtype=np.float64)
    except Exception as exc:
        raise InterpolationError(f"interpolator failed at frame {index}: {exc}") from exc
    if out.shape != np.shape(a):
        raise InterpolationError(f"interpolator returned {out.shape} at frame {index}, "
                                 f"expected {np.shape(a)}")
    return np.clip(out, 0.0, 1.0)


def smooth_stream(frames: Iterable[np.ndarray], psi: Interpolator) -> Iterator[np.ndarray]:
    """Lazily smooth a frame sequence, holding only two frames at a time."""
    it = iter(frames)
    try:
        prev = next(it)
    except StopIteration:
        return
    yield prev
    current = next(it, None)
    if current is None:
        return
    index = 1
    for nxt in it:
        prev = _call(psi, prev, nxt, index)
        yield prev
        current = nxt
        index += 1
    yield current


def smooth_window(frames: np.ndarray, psi: Interpolator) -> np.ndarray:
    """Smooth a ``[K, ...]`` stack; endpoints are returned untouched."""
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise InterpolationError(f"smoothing needs at least 2 frames, got {frames.shape[0]}")
    return np.stack(list(smooth_stream(frames, psi)))


class SmoothingGuard:
    """Counts smoothing passes per frame and refuses a third one.

    Window-scope passes must all happen before the single whole-video pass.
    """

    def __init__(self, limit: int = 2):
        self.limit = limit
        self.counts: Counter[int] = Counter()
        self.invocations: Counter[str] = Counter()
        self._whole_done = False

    def claim(self, scope: str, frames: Sequence[int]) -> None:
        if scope not in (WINDOW, WHOLE_VIDEO):
            raise ValueError(f"unknown smoothing scope {scope!r}")
        if self._whole_done:
            raise InterpolationBudgetError("the whole-video smoothing pass already ran")
        over = [f for f in frames if self.counts[f] + 1 > self.limit]
        if over:
            raise InterpolationBudgetError(f"frames {over[:8]} would be smoothed more than "
                                           f"{self.limit} times")
        if scope == WINDOW:
            again = [f for f in frames if self.counts[f] > 0]
            if again:
                raise InterpolationBudgetError(f"frames {again[:8]} were already smoothed "
                                               "in their window")
        for f in frames:
            self.counts[f] += 1
        self.invocations[scope] += 1
        if scope == WHOLE_VIDEO:
            self._whole_done = True

    @property
    def stages_used(self) -> int:
        return sum(1 for n in self.invocations.values() if n)


def smooth_and_reencode(latents: np.ndarray, t: int, eps: np.ndarray, schedule: SamplerSchedule,
                        backbone: BackboneAdapter, psi: Interpolator, guard: SmoothingGuard,
                        frame_ids: Sequence[int], scope: str = WINDOW) -> np.ndarray:
    """Project latents at level ``t`` to clean estimates, smooth them in pixel space
    and encode the interior frames back; endpoint latents are the projections."""
    if latents.shape[0] != len(frame_ids):
        raise InterpolationError(f"{latents.shape[0]} latents for {len(frame_ids)} frame ids")
    guard.claim(scope, frame_ids)
    x0 = project_to_x0(latents, t, eps, schedule)
    pixels = np.clip(backbone.decode(x0), 0.0, 1.0)
    smoothed = smooth_window(pixels, psi)
    out = x0.copy()
    if latents.shape[0] > 2:
        out[1:-1] = backbone.encode(smoothed[1:-1])
    return out


def load_interpolator(ref: str | None) -> Interpolator | None:
    """Resolve an interpolator by name.

    ``"none"`` disables smoothing, ``"midpoint"`` averages the two frames,
    ``"pkg.module:attr"`` imports a callable and ``"pkg.module:attr()"``
    calls a zero-argument factory that returns one.
    """
    if ref is None or ref == "none":
        return None
    if ref == "midpoint":
        return midpoint
    import importlib

    call = ref.endswith("()")
    target = ref[:-2] if call else ref
    module, _, attr = target.partition(":")
    if not attr:
        raise InterpolationError(f"interpolator {ref!r} is not 'module:attr'")
    obj = getattr(importlib.import_module(module), attr)
    return obj() if call else obj
