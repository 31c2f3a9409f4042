"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL/SKIP line (shown in the terminal summary)
and then asserts, so a failing criterion also fails the suite.
"""

import gc
import os
import time
import tracemalloc
from fractions import Fraction

import numpy as np
import pytest

from longedit.attention import AttentionProjection, attention_with_context
from longedit.backends.toy import ToyBackbone
from longedit.config import make_config
from longedit.diffusion import NoiseSchedule, ddim_invert_step, ddim_sample_step, guided_noise
from longedit.errors import InterpolationBudgetError
from longedit.fusion import FusionSchedule, fuse
from longedit.masks import estimate_mask
from longedit.metrics import con_l2
from longedit.pipeline import WindowEditor, edit_video
from longedit.smoothing import WHOLE_VIDEO, WINDOW, SmoothingGuard, midpoint, smooth_window
from longedit.video import VideoClip, make_plan, plan_windows, merge_windows, split_windows

from conftest import moving_square
from test_attention import naive_attention
from test_metrics import brute_force_con_l2


def verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def config(task="attribute", **kw):
    base = dict(object_tokens=("car",), resolution=(16, 16), num_steps=50, gamma_cutoff_step=30,
                fusion_cutoff_step=40, window_size=8)
    base.update(kw)
    return make_config(task, "a red car on a road", "a blue car on a road", **base)


def test_1_ddim_inverse_pair(acceptance):
    rng = np.random.default_rng(1)
    sampler = NoiseSchedule.linear().sampler(50)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        z, eps = rng.normal(size=(2, 4, 8, 8))
        t = int(rng.integers(0, 50))
        back = ddim_sample_step(ddim_invert_step(z, t, eps, sampler), t + 1, eps, sampler)
        worst = max(worst, float(np.abs(back - z).max() / np.abs(z).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 5
    acceptance(1, verdict(ok), f"DDIM inverse pair: max rel err {worst:.2e} (<=1e-6), {elapsed:.2f}s (<5s)")
    assert ok


def test_2_toy_round_trip(acceptance):
    bb = ToyBackbone()
    sampler = bb.noise_schedule().sampler(50)
    prompt = bb.encode_prompt("a red car on a road")
    z0 = np.random.default_rng(2).normal(size=(16, 12, 8, 8))
    start = time.perf_counter()
    z = z0
    for t in range(50):
        z = ddim_invert_step(z, t, guided_noise(bb, z, t, sampler, prompt, None, 1.0), sampler)
    for t in range(50, 0, -1):
        z = ddim_sample_step(z, t, guided_noise(bb, z, t, sampler, prompt, None, 1.0), sampler)
    elapsed = time.perf_counter() - start
    err = float(np.abs(z - z0).max())
    ok = err <= 1e-4 and elapsed < 10
    acceptance(2, verdict(ok), f"toy invert+sample round trip: max abs err {err:.2e} (<=1e-4), "
                               f"{elapsed:.2f}s (<10s)")
    assert ok


def test_3_fusion_equivalence(acceptance):
    rng = np.random.default_rng(3)
    sched = FusionSchedule(0.97, 30, 40)
    exact = True
    for _ in range(1000):
        z, s = rng.normal(size=(2, 4, 6, 6))
        m = rng.integers(0, 2, size=(6, 6)).astype(np.uint8)
        step = int(rng.integers(31, 41))  # gamma is off, fusion on
        exact &= bool(np.array_equal(fuse(z, s, m, step, sched), m * z + (1 - m) * s))
    example = fuse(np.full((1, 2, 2), 2.0), np.ones((1, 2, 2)), np.ones((2, 2)), 1, sched)
    dev = float(np.abs(example - 1.97).max())
    ok = exact and dev <= 1e-12
    acceptance(3, verdict(ok), f"plain fusion == masked blend on 1000 tensors: {exact}; "
                               f"gamma example |x-1.97| = {dev:.1e} (<=1e-12)")
    assert ok


def test_4_duplication_invariance(acceptance):
    rng = np.random.default_rng(4)
    dup = oracle = 0.0
    for _ in range(100):
        length, dim = int(rng.integers(1, 65)), int(rng.choice([8, 16, 32, 64, 128]))
        heads = int(rng.choice([h for h in (1, 2, 4, 8) if dim % h == 0]))
        proj = AttentionProjection.random(dim, heads=heads, rng=rng)
        h = rng.normal(size=(length, dim))
        plain = attention_with_context(h, h, proj)
        dup = max(dup, float(np.abs(attention_with_context(h, np.concatenate([h] * 4), proj) - plain).max()))
        oracle = max(oracle, float(np.abs(plain - naive_attention(h, h, proj)).max()))
    ok = dup <= 1e-5 and oracle <= 1e-5
    acceptance(4, verdict(ok), f"[h,h,h,h] vs self-attention max diff {dup:.1e}; "
                               f"naive oracle max diff {oracle:.1e} (both <=1e-5)")
    assert ok


def test_5_mask_pipeline(acceptance):
    rng = np.random.default_rng(5)
    monotone = invariant = True
    for _ in range(100):
        maps = rng.random((int(rng.integers(1, 5)), 6, 6)) ** 3
        lo, hi = np.sort(rng.uniform(0.05, 0.95, 2))
        monotone &= bool(np.all(estimate_mask(maps, hi, (6, 6)) <= estimate_mask(maps, lo, (6, 6))))
        scale = float(rng.uniform(0.01, 100.0))
        invariant &= bool(np.array_equal(estimate_mask(maps, lo, (6, 6)),
                                         estimate_mask(maps * scale, lo, (6, 6))))
    example = estimate_mask(np.array([[[0.1, 0.6], [0.4, 0.9]]]), 0.5, (2, 2)).tolist()
    ok = monotone and invariant and example == [[0, 1], [0, 1]]
    acceptance(5, verdict(ok), f"threshold monotone: {monotone}; worked example {example}; "
                               f"rescaling invariant: {invariant}")
    assert ok


def test_6_interpolation_recursion(acceptance):
    unrolled = smooth_window(np.array([0.0, 1.0, 0.0, 1.0]), midpoint).tolist()
    rng = np.random.default_rng(6)
    endpoints = True
    for _ in range(100):
        w = rng.random((int(rng.integers(2, 12)), 4, 4, 3))
        out = smooth_window(w, midpoint)
        endpoints &= np.array_equal(out[0], w[0]) and np.array_equal(out[-1], w[-1])
    guard = SmoothingGuard()
    guard.claim(WINDOW, range(8))
    guard.claim(WHOLE_VIDEO, range(8))
    try:
        guard.claim(WINDOW, range(8))
        tripped = False
    except InterpolationBudgetError:
        tripped = True
    ok = unrolled == [0.0, 0.0, 0.5, 1.0] and endpoints and tripped
    acceptance(6, verdict(ok), f"midpoint [0,1,0,1] -> {unrolled}; endpoints bit-identical: {endpoints}; "
                               f"third pass trips guard: {tripped}")
    assert ok


def test_7_con_l2_oracle(acceptance):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        frames = rng.random((int(rng.integers(2, 9)), 16, 16, 3))
        worst = max(worst, abs(con_l2(VideoClip(frames)) - brute_force_con_l2(frames)))
    pair = np.stack([np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)])
    value = con_l2(VideoClip(pair))
    # 0.1 is not a binary fraction; the exact square of the stored value, rounded once
    exact_rounded = float(Fraction(0.1) ** 2)
    dev = abs(value - 0.01)
    ok = worst <= 1e-10 and value == exact_rounded and dev <= 1e-15
    acceptance(7, verdict(ok), f"vs triple loop max diff {worst:.1e} (<=1e-10); zeros-vs-0.1 = {value!r}, "
                               f"bit-equal to correctly rounded fl(0.1)^2, |x-0.01| = {dev:.1e}")
    assert ok


def test_8_source_recovery(acceptance):
    clip = VideoClip(moving_square(16, 16, seed=8))
    bb = ToyBackbone(uniform_cross_attention=True, attention_gain=0.5)
    cfg = config("background", gamma_cutoff_step=50, fusion_cutoff_step=50)
    start = time.perf_counter()
    out, run = edit_video(clip, cfg, bb, interpolator=None)
    elapsed = time.perf_counter() - start
    empty = all(m.all() for m in run.masks.values())  # inverted object mask, so m == 0
    err = float(np.abs(out.frames - clip.frames).max())
    ok = empty and err <= bb.reconstruction_tolerance and elapsed < 60
    acceptance(8, verdict(ok), f"mask==0 run recovers source: max abs err {err:.1e} "
                               f"(<= codec tol {bb.reconstruction_tolerance:.0e}), {elapsed:.1f}s (<60s)")
    assert ok


def _peak_editing_bytes(m, workdir):
    clip = VideoClip(moving_square(m, 16))
    cfg = config(num_steps=2, gamma_cutoff_step=1, fusion_cutoff_step=2)
    editor = WindowEditor(clip, cfg, ToyBackbone(), interpolator=midpoint, workdir=workdir)
    editor.prepare()
    editor.cache.access_log = _Discard()
    gc.collect()
    tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    editor.edit_windows()
    editor.smooth_video()
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return peak - base


class _Discard(list):
    def append(self, item):
        pass


def test_9_windowing(acceptance, tmp_path):
    exact = True
    for m in range(1, 41):
        for k in range(2, 11):
            frames = np.random.default_rng(m * 11 + k).random((m, 2, 2, 3))
            padded, plan = plan_windows(VideoClip(frames), k)
            exact &= bool(np.array_equal(merge_windows(split_windows(padded, plan), plan).frames, frames))
    windows = make_plan(128, 8).window_count
    small = _peak_editing_bytes(16, tmp_path / "m16")
    large = _peak_editing_bytes(128, tmp_path / "m128")
    ratio = large / small
    ok = exact and windows == 16 and abs(ratio - 1) <= 0.10
    acceptance(9, verdict(ok), f"split/merge exact for M<=40, K<=10: {exact}; M=128,K=8 -> {windows} windows; "
                               f"peak editing memory M=128/M=16 = {ratio:.3f} (within 10%)")
    assert ok


def test_10_determinism(acceptance):
    clip = VideoClip(moving_square(16, 16))
    cfg = config(num_steps=10, gamma_cutoff_step=6, fusion_cutoff_step=8, seed=11)
    a, _ = edit_video(clip, cfg, ToyBackbone(attention_gain=0.3, noise_scale=0.01), interpolator=midpoint)
    b, _ = edit_video(clip, cfg, ToyBackbone(attention_gain=0.3, noise_scale=0.01), interpolator=midpoint)
    same = bool(np.array_equal(a.frames, b.frames))
    acceptance(10, verdict(same), f"two identical toy runs bit-identical: {same}")
    assert same


MODEL = os.environ.get("LONGEDIT_SD_MODEL")


def test_11_real_backbone_smoothing_direction(acceptance):
    if not MODEL:
        acceptance(11, "SKIP", "needs pretrained weights: set LONGEDIT_SD_MODEL (and optionally "
                               "LONGEDIT_CONTROLNET) to run the 16-frame edit")
        pytest.skip("LONGEDIT_SD_MODEL not set; pretrained weights unavailable")
    from longedit.backends.diffusers_sd import DiffusersBackbone

    bb = DiffusersBackbone(MODEL, os.environ.get("LONGEDIT_CONTROLNET", "lllyasviel/sd-controlnet-canny"))
    clip = VideoClip(moving_square(16, 512))
    cfg = config(resolution=(512, 512))
    smoothed, _ = edit_video(clip, cfg, bb, interpolator=midpoint)
    plain, _ = edit_video(clip, cfg, bb, interpolator=None)
    with_s, without = con_l2(smoothed), con_l2(plain)
    ok = with_s <= without
    acceptance(11, verdict(ok), f"16-frame attribute edit: Con-L2 smoothed {with_s:.5f} <= "
                                f"unsmoothed {without:.5f}")
    assert ok
