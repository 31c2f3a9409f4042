"""Running a complete editing job from files to artifacts.

Both the CLI and the HTTP service go through :func:`run_job`; a job never
raises, it reports an exit code and writes ``error.json`` on failure.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from pathlib import Path
from typing import Any, Callable, Literal

from pydantic import BaseModel, Field

from .config import EditConfig, ensure_valid
from .control import control_for_config
from .errors import ConfigError, LongEditError, PipelineError, VideoIOError
from .masks import save_mask_overlay
from .metrics import evaluate, load_embedder
from .pipeline import InversionStore, WindowEditor, invert_all
from .smoothing import load_interpolator
from .video import VideoClip, load_video, save_frames, save_preview, save_video

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PIPELINE = 4


class JobOptions(BaseModel):
    """How to run a job; everything here is outside the edit config itself."""

    backend: Literal["toy", "diffusers"] = "toy"
    backend_options: dict[str, Any] = Field(default_factory=dict)
    interpolator: str = "midpoint"
    embedder: str | None = "toy"
    max_frames: int | None = None
    dump_frames: bool = False
    dump_masks: bool = False
    dump_controls: bool = False
    inversion_cache: str | None = None
    spill: bool = False
    preview_count: int = 8


def _error_payload(exc: BaseException, **extra: Any) -> dict[str, Any]:
    payload: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["issues"] = [{"field": f, "message": m} for f, m in exc.issues]
    if isinstance(exc, PipelineError):
        payload.update({k: v for k, v in exc.to_dict().items() if k != "message"})
    payload.update(extra)
    return payload


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str))
    return path


def _fail(output: Path, code: int, exc: BaseException, **extra: Any) -> tuple[int, dict[str, Path]]:
    log.error("job failed: %s", exc)
    try:
        path = _write_json(output / "error.json", _error_payload(exc, exit_code=code, **extra))
    except OSError:
        return code, {}
    return code, {"error": path}


def _load_input(input_path: str | Path, config: EditConfig, options: JobOptions) -> VideoClip:
    path = Path(input_path)
    if not path.exists():
        raise VideoIOError(f"input not found: {path}")
    return load_video(path, tuple(config.resolution), max_frames=options.max_frames)


def _backend(options: JobOptions):
    from .backends import load_backend

    return load_backend(options.backend, **options.backend_options)


def run_job(config: EditConfig | str | Path, input_path: str | Path, output_path: str | Path,
            options: JobOptions | None = None,
            on_step: Callable[[int, int], None] | None = None) -> tuple[int, dict[str, Path]]:
    """Edit one video and write its artifacts into the ``output_path`` directory.

    Returns ``(exit_code, artifacts)``. Artifacts: ``edited.mp4``,
    ``preview.png``, ``provenance.json``, ``metrics.json`` (when an embedder
    is set) and optionally ``frames/``, ``masks/``, ``controls/``.
    """
    options = options or JobOptions()
    output = Path(output_path)
    started = time.perf_counter()
    try:
        output.mkdir(parents=True, exist_ok=True)
    except OSError:
        return EXIT_INPUT, {}
    try:
        if not isinstance(config, EditConfig):
            from .config import load_config

            config = load_config(config)
        ensure_valid(config)
        backbone = _backend(options)
    except ConfigError as exc:
        return _fail(output, EXIT_CONFIG, exc)
    try:
        clip = _load_input(input_path, config, options)
    except VideoIOError as exc:
        return _fail(output, EXIT_INPUT, exc, path=str(input_path))

    try:
        interpolator = load_interpolator(options.interpolator)
        inversions = InversionStore.open(options.inversion_cache) if options.inversion_cache else None
        workdir = output / "work" if options.spill else None
        editor = WindowEditor(clip, config, backbone, interpolator, inversions=inversions,
                              workdir=workdir, on_step=on_step)
        edited, run = editor()
    except LongEditError as exc:
        return _fail(output, EXIT_PIPELINE, exc)
    except Exception as exc:  # adapters are third-party code
        return _fail(output, EXIT_FAILURE, exc)

    artifacts: dict[str, Path] = {}
    artifacts["video"] = save_video(edited, output / "edited.mp4")
    artifacts["preview"] = save_preview(edited, output / "preview.png", options.preview_count)
    artifacts["source_preview"] = save_preview(clip, output / "preview_source.png", options.preview_count)
    if options.dump_frames:
        save_frames(edited.frames, output / "frames")
        artifacts["frames"] = output / "frames"
    if options.dump_masks and run.masks:
        for g, mask in sorted(run.masks.items()):
            if g < clip.num_frames:
                save_mask_overlay(clip.frames[g], mask, output / "masks" / f"mask_{g:05d}.png")
        artifacts["masks"] = output / "masks"
    if options.dump_controls and run.control is not None:
        save_frames(run.control.maps, output / "controls", prefix=run.control.control_type)
        artifacts["controls"] = output / "controls"
    if options.embedder:
        try:
            report = evaluate(clip, edited, config.target_prompt, load_embedder(options.embedder))
        except LongEditError as exc:
            return _fail(output, EXIT_PIPELINE, exc)
        run.metrics = report
        artifacts["metrics"] = report.save(output / "metrics.json")

    provenance = dict(run.provenance)
    provenance.update({
        "config": config.to_dict(),
        "input": str(input_path),
        "options": options.model_dump(),
        "wall_time": time.perf_counter() - started,
    })
    artifacts["provenance"] = _write_json(output / "provenance.json", provenance)
    if options.spill:
        shutil.rmtree(output / "work", ignore_errors=True)
    return EXIT_OK, artifacts


def run_invert(config: EditConfig | str | Path, input_path: str | Path, cache_dir: str | Path,
               options: JobOptions | None = None) -> tuple[int, dict[str, Path]]:
    """Precompute inversion records for ``input_path`` into ``cache_dir``."""
    options = options or JobOptions()
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    try:
        if not isinstance(config, EditConfig):
            from .config import load_config

            config = load_config(config)
        ensure_valid(config)
        backbone = _backend(options)
    except ConfigError as exc:
        return _fail(cache, EXIT_CONFIG, exc)
    try:
        clip = _load_input(input_path, config, options)
    except VideoIOError as exc:
        return _fail(cache, EXIT_INPUT, exc, path=str(input_path))
    try:
        control = control_for_config(clip, config)
        store = invert_all(clip, config, backbone, control, InversionStore(cache))
    except LongEditError as exc:
        return _fail(cache, EXIT_PIPELINE, exc)
    except Exception as exc:
        return _fail(cache, EXIT_FAILURE, exc)
    return EXIT_OK, {"cache": cache, "meta": store.directory / "meta.json"}


def run_evaluate(source_path: str | Path, edited_path: str | Path, prompt: str,
                 output_path: str | Path, embedder: str = "toy",
                 resolution: tuple[int, int] | None = None) -> tuple[int, dict[str, Path]]:
    """Metrics only, on two existing videos; writes ``metrics.json`` into ``output_path``."""
    output = Path(output_path)
    output.mkdir(parents=True, exist_ok=True)
    for p in (source_path, edited_path):
        if not Path(p).exists():
            return _fail(output, EXIT_INPUT, VideoIOError(f"input not found: {p}"), path=str(p))
    try:
        source = load_video(source_path, resolution)
        edited = load_video(edited_path, resolution or source.resolution)
        n = min(source.num_frames, edited.num_frames)
        source = VideoClip(source.frames[:n], source.frame_rate)
        edited = VideoClip(edited.frames[:n], edited.frame_rate)
        report = evaluate(source, edited, prompt, load_embedder(embedder))
    except VideoIOError as exc:
        return _fail(output, EXIT_INPUT, exc)
    except LongEditError as exc:
        return _fail(output, EXIT_PIPELINE, exc)
    return EXIT_OK, {"metrics": report.save(output / "metrics.json")}
