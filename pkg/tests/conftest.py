from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from longedit.backends.toy import ToyBackbone
from longedit.config import make_config
from longedit.video import VideoClip

sys.path.insert(0, str(Path(__file__).parent))  # for tiny_sd

settings.register_profile("repo", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def moving_square(m: int, size: int = 16, seed: int = 0) -> np.ndarray:
    """A coloured square drifting right over a textured background."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.1, 0.3, (size, size, 3))
    frames = np.repeat(base[None], m, axis=0)
    s = size // 2
    for n in range(m):
        x = (n % (size - s))
        frames[n, 4:4 + s, x:x + s] = (0.9, 0.2, 0.1)
    return frames


@pytest.fixture
def toy():
    return ToyBackbone()


@pytest.fixture
def clip_factory():
    def make(m: int = 8, size: int = 16, seed: int = 0) -> VideoClip:
        return VideoClip(moving_square(m, size, seed))

    return make


@pytest.fixture
def small_config():
    def make(task: str = "attribute", **overrides):
        base = dict(object_tokens=("car",), resolution=(16, 16), num_steps=10,
                    gamma_cutoff_step=6, fusion_cutoff_step=8, window_size=4)
        if task == "style":
            base.update(object_tokens=(), gamma_cutoff_step=0, fusion_cutoff_step=2)
        elif task == "background":
            base.update(gamma_cutoff_step=0, fusion_cutoff_step=4)
        base.update(overrides)
        return make_config(task, "a red car on a road", "a blue car on a road", **base)

    return make


# -- acceptance report ----------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/SKIP line per acceptance criterion; printed in the summary."""

    def record(number: int, verdict: str, text: str) -> None:
        line = f"criterion {number:>2}: {verdict:<4} {text}"
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
