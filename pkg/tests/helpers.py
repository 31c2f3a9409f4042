"""Files on disk for the service and command-line tests."""

from __future__ import annotations

from pathlib import Path

import yaml

from longedit.video import save_frames

from conftest import moving_square

SMALL_CONFIG = {
    "task_kind": "attribute",
    "source_prompt": "a red car on a road",
    "target_prompt": "a blue car on a road",
    "object_tokens": ["car"],
    "resolution": [16, 16],
    "num_steps": 6,
    "gamma_cutoff_step": 3,
    "fusion_cutoff_step": 4,
    "window_size": 4,
}


def write_inputs(root: Path, frames: int = 6, **config) -> tuple[Path, Path]:
    """Write a frame directory and a YAML config under ``root``; return both paths."""
    frame_dir = root / "frames"
    save_frames(moving_square(frames, 16), frame_dir)
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump({**SMALL_CONFIG, **config}))
    return frame_dir, cfg
