import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from longedit.backends.toy import ToyBackbone
from longedit.diffusion import NoiseSchedule, project_to_x0
from longedit.errors import InterpolationBudgetError, InterpolationError
from longedit.smoothing import (WHOLE_VIDEO, WINDOW, SmoothingGuard, load_interpolator, midpoint,
                                smooth_and_reencode, smooth_stream, smooth_window)


def test_unrolled_midpoint_example():
    out = smooth_window(np.array([0.0, 1.0, 0.0, 1.0]), midpoint)
    assert out.tolist() == [0.0, 0.0, 0.5, 1.0]


def test_two_frames_are_untouched():
    x = np.array([[0.2], [0.7]])
    assert np.array_equal(smooth_window(x, midpoint), x)


def test_constant_clip_is_a_fixed_point():
    x = np.full((6, 4, 4, 3), 0.3)
    assert np.array_equal(smooth_window(x, midpoint), x)


def test_recursion_uses_smoothed_previous_and_original_next():
    seen = []

    def psi(a, b):
        seen.append((float(a), float(b)))
        return a + 0.0 * b

    smooth_window(np.array([1.0, 5.0, 7.0, 9.0, 2.0]), psi)
    assert seen == [(1.0, 7.0), (1.0, 9.0), (1.0, 2.0)]


@given(arrays(np.float64, st.tuples(st.integers(2, 10), st.just(3)), elements=st.floats(0, 1)))
def test_endpoints_are_bit_identical(frames):
    out = smooth_window(frames, midpoint)
    assert np.array_equal(out[0], frames[0]) and np.array_equal(out[-1], frames[-1])


@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(0, 1)))
def test_midpoint_smoothing_does_not_increase_the_largest_jump(seq):
    def largest_jump(x):
        return np.abs(np.diff(x)).max()

    assert largest_jump(smooth_window(seq, midpoint)) <= largest_jump(seq) + 1e-15


def test_stream_matches_window_and_is_lazy():
    frames = np.random.default_rng(0).random((7, 2))
    pulled = []

    def source():
        for f in frames:
            pulled.append(1)
            yield f

    it = smooth_stream(source(), midpoint)
    next(it)
    assert len(pulled) == 1
    rest = list(it)
    assert np.array_equal(np.stack([frames[0]] + rest), smooth_window(frames, midpoint))
    assert list(smooth_stream(iter([]), midpoint)) == []
    assert len(list(smooth_stream(iter([frames[0]]), midpoint))) == 1


def test_interpolator_contract_errors():
    with pytest.raises(InterpolationError):
        smooth_window(np.zeros((1, 2)), midpoint)
    with pytest.raises(InterpolationError, match="frame 1"):
        smooth_window(np.zeros((3, 2)), lambda a, b: np.zeros(5))
    with pytest.raises(InterpolationError, match="frame 1"):
        smooth_window(np.zeros((3, 2)), lambda a, b: 1 / 0)
    assert smooth_window(np.zeros((3, 2)), lambda a, b: a + 7)[1].tolist() == [1.0, 1.0]


def test_guard_allows_window_then_whole_video_only():
    g = SmoothingGuard()
    g.claim(WINDOW, range(0, 4))
    g.claim(WINDOW, range(4, 8))
    with pytest.raises(InterpolationBudgetError):
        g.claim(WINDOW, [3])
    g.claim(WHOLE_VIDEO, range(8))
    with pytest.raises(InterpolationBudgetError):
        g.claim(WHOLE_VIDEO, range(8))
    with pytest.raises(InterpolationBudgetError):
        g.claim(WINDOW, [9])
    assert g.stages_used == 2 and max(g.counts.values()) == 2


def test_guard_caps_each_frame_at_two_passes():
    g = SmoothingGuard(limit=1)
    g.claim(WINDOW, [0])
    with pytest.raises(InterpolationBudgetError):
        g.claim(WHOLE_VIDEO, [0])
    with pytest.raises(ValueError):
        SmoothingGuard().claim("other", [0])


def test_reencode_on_the_toy_codec_is_exact():
    bb = ToyBackbone()
    s = NoiseSchedule.linear().sampler(10)
    rng = np.random.default_rng(0)
    frames = rng.uniform(0.2, 0.8, (5, 8, 8, 3))
    z = bb.encode(frames)
    eps = 1e-3 * rng.normal(size=z.shape)
    out = smooth_and_reencode(z, 4, eps, s, bb, midpoint, SmoothingGuard(), range(5))
    x0 = project_to_x0(z, 4, eps, s)
    expected = bb.encode(smooth_window(np.clip(bb.decode(x0), 0, 1), midpoint))
    assert np.abs(out[1:-1] - expected[1:-1]).max() < 1e-14
    assert np.array_equal(out[0], x0[0]) and np.array_equal(out[-1], x0[-1])


def test_identity_like_psi_on_constant_frames_keeps_latents():
    bb = ToyBackbone()
    s = NoiseSchedule.linear().sampler(10)
    z = bb.encode(np.full((4, 8, 8, 3), 0.4))
    out = smooth_and_reencode(z, 0, np.zeros_like(z), s, bb, lambda a, b: a, SmoothingGuard(), range(4))
    assert np.abs(out - z).max() <= bb.reconstruction_tolerance


def test_reencode_checks_frame_ids_and_budget():
    bb = ToyBackbone()
    s = NoiseSchedule.linear().sampler(10)
    z = bb.encode(np.full((3, 4, 4, 3), 0.5))
    with pytest.raises(InterpolationError):
        smooth_and_reencode(z, 0, z * 0, s, bb, midpoint, SmoothingGuard(), range(2))
    g = SmoothingGuard()
    smooth_and_reencode(z, 0, z * 0, s, bb, midpoint, g, range(3), WINDOW)
    smooth_and_reencode(z, 0, z * 0, s, bb, midpoint, g, range(3), WHOLE_VIDEO)
    with pytest.raises(InterpolationBudgetError):
        smooth_and_reencode(z, 0, z * 0, s, bb, midpoint, g, range(3), WINDOW)


def half_of(a, b):
    return a


def make_half():
    return half_of


def test_load_interpolator():
    assert load_interpolator("none") is None and load_interpolator(None) is None
    assert load_interpolator("midpoint") is midpoint
    assert load_interpolator("test_smoothing:half_of") is half_of
    assert load_interpolator("test_smoothing:make_half()") is half_of
    with pytest.raises(InterpolationError):
        load_interpolator("no_colon")
