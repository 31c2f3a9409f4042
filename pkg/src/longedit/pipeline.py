"""End-to-end windowed editing.

1. Every source frame is DDIM-inverted with the source prompt; the whole
   latent trajectory and the object cross-attention maps are kept (in memory
   or spilled to disk).
2. Windows are edited one after another, starting from the inverted noise.
   Each step predicts guided noise with cross-window attention, takes a DDIM
   step and fuses the result with the inversion latent of the same level. The
   last step of a window ends with interpolation smoothing.
3. The whole video is smoothed once more across window seams, then decoded.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import __version__
from .attention import AttentionHooks, CaptureHooks, CrossAttnMapStack, CrossWindowHooks, FeatureCache
from .config import EditConfig, ensure_valid
from .control import ControlSignal, control_for_config
from .diffusion import (BackboneAdapter, SamplerSchedule, ddim_invert_step, ddim_sample_step,
                        guided_noise)
from .errors import LongEditError, PipelineError
from .fusion import FusionSchedule, fuse
from .masks import estimate_mask
from .smoothing import WHOLE_VIDEO, WINDOW, Interpolator, SmoothingGuard, smooth_and_reencode, smooth_stream
from .video import VideoClip, WindowPlan, plan_windows

log = logging.getLogger(__name__)


# -- per-frame storage ----------------------------------------------------------

class FrameStore:
    """Named arrays per frame index, kept in memory or as ``.npz`` files in ``directory``."""

    def __init__(self, directory: str | Path | None = None, prefix: str = "frame"):
        self.directory = Path(directory) if directory is not None else None
        self.prefix = prefix
        self._mem: dict[int, dict[str, np.ndarray]] = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, index: int) -> Path:
        return self.directory / f"{self.prefix}_{index:05d}.npz"

    def put(self, index: int, **arrays: np.ndarray) -> None:
        if self.directory is None:
            self._mem[index] = {k: np.array(v, copy=True) for k, v in arrays.items()}
        else:
            np.savez(self._path(index), **arrays)

    def get(self, index: int) -> dict[str, np.ndarray]:
        if self.directory is None:
            try:
                return self._mem[index]
            except KeyError:
                raise KeyError(f"frame {index} not in store") from None
        path = self._path(index)
        if not path.exists():
            raise KeyError(f"frame {index} not in store {self.directory}")
        with np.load(path) as data:
            return {k: data[k] for k in data.files}

    def __contains__(self, index: int) -> bool:
        if self.directory is None:
            return index in self._mem
        return self._path(index).exists()

    def indices(self) -> list[int]:
        if self.directory is None:
            return sorted(self._mem)
        return sorted(int(p.stem.rsplit("_", 1)[1]) for p in self.directory.glob(f"{self.prefix}_*.npz"))


@dataclass
class InversionRecord:
    """Inversion of one source frame: latents at levels ``0..T`` and captured maps."""

    frame: int
    trajectory: np.ndarray  # [T + 1, C, h, w]
    maps: CrossAttnMapStack | None = None

    @property
    def noise(self) -> np.ndarray:
        return self.trajectory[-1]

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"trajectory": self.trajectory}
        if self.maps is not None:
            arrays["map_timesteps"] = np.asarray(self.maps.timesteps, dtype=np.int64)
            for layer, m in self.maps.maps.items():
                arrays["map:" + layer] = m
        return arrays

    @classmethod
    def from_arrays(cls, frame: int, arrays: dict[str, np.ndarray]) -> "InversionRecord":
        maps = {k[4:]: v for k, v in arrays.items() if k.startswith("map:")}
        stack = None
        if maps:
            stack = CrossAttnMapStack(maps, tuple(int(t) for t in arrays.get("map_timesteps", ())))
        return cls(frame, arrays["trajectory"], stack)


class InversionStore:
    """Sequence of :class:`InversionRecord`, optionally backed by a cache directory.

    On-disk layout: ``meta.json`` plus ``frame_NNNNN.npz`` per frame holding
    ``trajectory`` ``[T+1, C, h, w]``, ``map_timesteps`` and one
    ``map:<layer>`` array ``[T, h_a, w_a]`` per captured layer.
    """

    def __init__(self, directory: str | Path | None = None, meta: dict | None = None):
        self.frames = FrameStore(directory)
        self.meta: dict[str, Any] = dict(meta or {})

    @property
    def directory(self) -> Path | None:
        return self.frames.directory

    def put(self, record: InversionRecord) -> None:
        self.frames.put(record.frame, **record.to_arrays())

    def __getitem__(self, index: int) -> InversionRecord:
        return InversionRecord.from_arrays(index, self.frames.get(index))

    def __len__(self) -> int:
        return len(self.frames.indices())

    def __iter__(self) -> Iterator[InversionRecord]:
        for i in self.frames.indices():
            yield self[i]

    def save_meta(self) -> None:
        if self.directory is not None:
            (self.directory / "meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))

    @classmethod
    def open(cls, directory: str | Path) -> "InversionStore":
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise PipelineError(f"{directory} is not an inversion cache (no meta.json)", stage="invert")
        return cls(directory, json.loads(meta_path.read_text()))


def inversion_meta(config: EditConfig, backbone: BackboneAdapter, schedule: SamplerSchedule,
                   num_frames: int) -> dict[str, Any]:
    return {
        "num_frames": num_frames,
        "num_steps": config.num_steps,
        "timesteps": list(schedule.timesteps),
        "source_prompt": config.source_prompt,
        "object_tokens": list(config.object_tokens),
        "resolution": list(config.resolution),
        "control_type": config.control_type.value,
        "control_scale": config.control_scale,
        "backbone": backbone.describe(),
    }


# -- inversion ------------------------------------------------------------------

def _capture_positions(config: EditConfig, backbone: BackboneAdapter) -> list[int]:
    if not config.use_mask:
        return []
    try:
        return backbone.token_positions(config.source_prompt, config.object_tokens)
    except LongEditError as exc:
        raise PipelineError(str(exc), stage="invert") from exc


def invert_all(clip: VideoClip, config: EditConfig, backbone: BackboneAdapter,
               control: ControlSignal | None = None, store: InversionStore | None = None,
               batch_size: int | None = None) -> InversionStore:
    """Invert every real frame of ``clip`` with the source prompt.

    Inversion evaluates only the conditional branch (no guidance). Object
    cross-attention maps are captured when the config uses masks.
    """
    ensure_valid(config)
    schedule = backbone.noise_schedule().sampler(config.num_steps)
    frames = clip.frames[: clip.num_frames - clip.pad_count]
    m = frames.shape[0]
    if control is not None and control.num_frames < m:
        raise PipelineError(f"control has {control.num_frames} frames for {m}", stage="invert")
    store = store if store is not None else InversionStore()
    store.meta.update(inversion_meta(config, backbone, schedule, m))
    source = backbone.encode_prompt(config.source_prompt)
    positions = _capture_positions(config, backbone)
    batch_size = batch_size or config.window_size

    for start in range(0, m, batch_size):
        idx = list(range(start, min(m, start + batch_size)))
        ctrl = control.maps[idx] if control is not None else None
        try:
            z = backbone.encode(frames[idx])
        except Exception as exc:
            raise PipelineError(f"encoding failed: {exc}", stage="invert", frame=idx[0]) from exc
        trajectory = [z]
        hooks = CaptureHooks(positions, len(idx)) if positions else AttentionHooks()
        for t in range(config.num_steps):
            hooks.timestep = t
            try:
                eps = guided_noise(backbone, z, t, schedule, source, None, 1.0, control=ctrl,
                                   control_scale=config.control_scale, attention=hooks)
            except Exception as exc:
                raise PipelineError(str(exc), stage="invert", frame=idx[0], step=t + 1) from exc
            z = ddim_invert_step(z, t, eps, schedule)
            trajectory.append(z)
        traj = np.stack(trajectory, axis=1)
        stacks = hooks.stacks() if positions else [None] * len(idx)
        for b, g in enumerate(idx):
            store.put(InversionRecord(g, traj[b], stacks[b]))
        log.debug("inverted frames %d..%d", idx[0], idx[-1])
    store.save_meta()
    return store


def check_inversion_cache(store: InversionStore, config: EditConfig, backbone: BackboneAdapter,
                          num_frames: int) -> None:
    schedule = backbone.noise_schedule().sampler(config.num_steps)
    expected = inversion_meta(config, backbone, schedule, num_frames)
    keys = ("num_frames", "num_steps", "timesteps", "source_prompt", "resolution", "backbone")
    if config.use_mask:
        keys += ("object_tokens",)
    stale = [k for k in keys if store.meta.get(k) != expected[k]]
    if stale:
        raise PipelineError(f"inversion cache does not match this job (differs in {stale})",
                            stage="invert")


# -- editing --------------------------------------------------------------------

@dataclass
class EditRun:
    config: EditConfig
    plan: WindowPlan
    control: ControlSignal | None
    inversions: InversionStore
    outputs: FrameStore
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    guard: SmoothingGuard = field(default_factory=SmoothingGuard)
    cache_log: list[tuple[int, str, int]] = field(default_factory=list)
    windows_done: int = 0
    metrics: Any = None
    provenance: dict[str, Any] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


StepCallback = Callable[[int, int], None]


class WindowEditor:
    """Runs the editing stages for one clip; each stage can also be driven on its own."""

    def __init__(self, clip: VideoClip, config: EditConfig, backbone: BackboneAdapter,
                 interpolator: Interpolator | None = None, control: ControlSignal | None = None,
                 inversions: InversionStore | None = None, workdir: str | Path | None = None,
                 on_step: StepCallback | None = None):
        self.config = ensure_valid(config)
        self.backbone = backbone
        self.interpolator = interpolator
        self.on_step = on_step
        self.workdir = Path(workdir) if workdir is not None else None
        self.source = clip
        self.real_frames = clip.num_frames - clip.pad_count
        _, self.plan = plan_windows(clip, config.window_size)
        self.schedule = backbone.noise_schedule().sampler(config.num_steps)
        self.fusion = FusionSchedule.from_config(config)
        self.control = control
        self.inversions = inversions
        self.cache = FeatureCache(config.window_size)
        outputs = FrameStore(self.workdir / "edited" if self.workdir else None, "latent")
        self.run = EditRun(config, self.plan, control, inversions, outputs)  # type: ignore[arg-type]
        self._latent_grid: tuple[int, int] | None = None

    # stage 1
    def prepare(self) -> None:
        t0 = time.perf_counter()
        real = VideoClip(self.source.frames[: self.real_frames], self.source.frame_rate)
        if self.control is None:
            try:
                self.control = control_for_config(real, self.config)
            except Exception as exc:
                raise PipelineError(str(exc), stage="control") from exc
        self.run.control = self.control
        self.run.timings["control"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        if self.inversions is None:
            store = InversionStore(self.workdir / "inversion" if self.workdir else None)
            self.inversions = invert_all(real, self.config, self.backbone, self.control, store)
        else:
            check_inversion_cache(self.inversions, self.config, self.backbone, self.real_frames)
        self.run.inversions = self.inversions
        self.run.timings["inversion"] = time.perf_counter() - t0

    def _source_index(self, g: int) -> int:
        # padding frames repeat the last real frame
        return min(g, self.real_frames - 1)

    def _mask(self, g: int, record: InversionRecord) -> np.ndarray | None:
        if not self.config.use_mask:
            return None
        if record.maps is None:
            raise PipelineError("inversion record has no attention maps but masks are enabled",
                                stage="mask", frame=g)
        grid = record.trajectory.shape[-2:]
        mask = estimate_mask(record.maps, self.config.mask_threshold, grid)
        self.run.masks[g] = mask
        return mask

    def _window_noise(self, i: int, z: np.ndarray, t: int, target: Any, null: Any,
                      ctrl: np.ndarray | None) -> np.ndarray:
        k = self.plan.window_size
        if i == 1:
            groups = [[0], [k - 1], list(range(1, k - 1))]
        else:
            groups = [[k - 1], list(range(0, k - 1))]
        eps = np.empty_like(z)
        for group in groups:
            if not group:
                continue
            positions = [(i, j + 1) for j in group]

            def hooks(branch, positions=positions):
                return CrossWindowHooks(self.cache, positions, t, branch)

            eps[group] = guided_noise(
                self.backbone, z[group], t, self.schedule, target, null, self.config.guidance_scale,
                control=None if ctrl is None else ctrl[group],
                control_scale=self.config.control_scale, attention=hooks)
        return eps

    # stage 2
    def edit_window(self, i: int, target: Any, null: Any) -> None:
        cfg = self.config
        ids = list(self.plan.window_frames(i))
        src_ids = [self._source_index(g) for g in ids]
        records = [self.inversions[s] for s in src_ids]
        source_traj = np.stack([r.trajectory for r in records])  # [K, T+1, C, h, w]
        masks = None
        if cfg.use_mask:
            masks = np.stack([self._mask(g, r) for g, r in zip(ids, records)])
        del records
        ctrl = self.control.maps[src_ids] if self.control is not None else None

        self.cache.begin_window(i)
        z = source_traj[:, -1].copy()
        eps = np.zeros_like(z)
        n = cfg.num_steps
        for s in range(1, n + 1):
            t = n - s + 1
            try:
                eps = self._window_noise(i, z, t, target, null, ctrl)
            except Exception as exc:
                raise PipelineError(str(exc), stage="denoise", window=i, step=s) from exc
            z = ddim_sample_step(z, t, eps, self.schedule)
            z = fuse(z, source_traj[:, t - 1], masks, s, self.fusion)
            if self.on_step:
                self.on_step(i, s)
        if self.interpolator is not None:
            try:
                z = smooth_and_reencode(z, 0, eps, self.schedule, self.backbone, self.interpolator,
                                        self.run.guard, ids, WINDOW)
            except LongEditError as exc:
                raise PipelineError(str(exc), stage="smooth", window=i, step=n) from exc
        for b, g in enumerate(ids):
            self.run.outputs.put(g, z=z[b])
        self.cache.end_window()
        self.run.windows_done = i

    def edit_windows(self) -> None:
        t0 = time.perf_counter()
        target = self.backbone.encode_prompt(self.config.target_prompt)
        null = self.backbone.encode_prompt("")
        for i in range(1, self.plan.window_count + 1):
            self.edit_window(i, target, null)
            log.info("window %d/%d done", i, self.plan.window_count)
        self.run.cache_log = list(self.cache.access_log)
        self.run.timings["editing"] = time.perf_counter() - t0

    # stage 3
    def smooth_video(self) -> None:
        if self.interpolator is None or self.real_frames < 2:
            return
        t0 = time.perf_counter()
        m = self.real_frames
        outputs, bb = self.run.outputs, self.backbone
        try:
            self.run.guard.claim(WHOLE_VIDEO, range(m))
        except LongEditError as exc:
            raise PipelineError(str(exc), stage="smooth") from exc

        def decoded():
            for g in range(m):
                yield np.clip(bb.decode(outputs.get(g)["z"][None])[0], 0.0, 1.0)

        for g, frame in enumerate(smooth_stream(decoded(), self.interpolator)):
            if 0 < g < m - 1:
                outputs.put(g, z=bb.encode(frame[None])[0])
        self.run.timings["smoothing"] = time.perf_counter() - t0

    # stage 4
    def decode(self) -> VideoClip:
        t0 = time.perf_counter()
        frames = np.empty((self.real_frames, *self.source.resolution, 3))
        for g in range(self.real_frames):
            frames[g] = self.backbone.decode(self.run.outputs.get(g)["z"][None])[0]
        self.run.timings["decode"] = time.perf_counter() - t0
        return VideoClip(np.clip(frames, 0.0, 1.0), self.source.frame_rate)

    def provenance(self) -> dict[str, Any]:
        schedule = self.backbone.noise_schedule()
        return {
            "package_version": __version__,
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "backbone": self.backbone.describe(),
            "interpolator": getattr(self.interpolator, "__name__", repr(self.interpolator))
            if self.interpolator is not None else None,
            "schedule": {**schedule.describe(), "sampler_timesteps": list(self.schedule.timesteps)},
            "frames": self.real_frames,
            "windows": self.plan.window_count,
            "pad_count": self.plan.pad_count,
            "smoothing_passes": dict(self.run.guard.invocations),
            "timings": dict(self.run.timings),
        }

    def __call__(self) -> tuple[VideoClip, EditRun]:
        stage = "prepare"
        try:
            self.prepare()
            stage = "edit"
            self.edit_windows()
            stage = "smooth"
            self.smooth_video()
            stage = "decode"
            out = self.decode()
        except PipelineError as exc:
            exc.run = self.run
            raise
        except Exception as exc:
            err = PipelineError(f"{type(exc).__name__}: {exc}", stage=stage)
            err.run = self.run
            raise err from exc
        self.run.provenance = self.provenance()
        return out, self.run


def edit_video(clip: VideoClip, config: EditConfig, backbone: BackboneAdapter,
               interpolator: Interpolator | None = None, control: ControlSignal | None = None,
               inversions: InversionStore | None = None, workdir: str | Path | None = None,
               on_step: StepCallback | None = None) -> tuple[VideoClip, EditRun]:
    """Edit ``clip`` according to ``config``; returns the edited clip and its run record.

    ``interpolator=None`` turns smoothing off. With ``workdir`` set, inversion
    trajectories and edited latents are spilled to disk so memory use does not
    grow with the clip length. On failure the raised :class:`PipelineError`
    carries the partial run as ``exc.run``.
    """
    editor = WindowEditor(clip, config, backbone, interpolator, control, inversions, workdir, on_step)
    return editor()
