import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longedit.control import (canny_frame, canny_maps, control_for_config, external_control, luminance,
                              luminance_adapter)
from longedit.errors import ControlError
from longedit.video import VideoClip


def step_image(h=20, w=20, col=10, lo=0.1, hi=0.9):
    img = np.full((h, w, 3), lo)
    img[:, col:] = hi
    return img


def test_constant_frame_has_no_edges():
    assert not canny_frame(np.full((16, 16, 3), 0.4)).any()


def _brute_force_step_column(img, sigma):
    """Column of the gradient ridge, found by a direct loop over the blurred row."""
    from scipy.ndimage import gaussian_filter1d

    gray = img[0] @ np.array([0.299, 0.587, 0.114])
    row = gaussian_filter1d(gray, sigma, mode="nearest")
    grads = [abs(row[min(x + 1, len(row) - 1)] - row[max(x - 1, 0)]) for x in range(len(row))]
    best = max(grads)
    return [x for x, g in enumerate(grads) if g == best]


@pytest.mark.parametrize("col", [5, 10, 14])
def test_vertical_step_gives_a_single_column(col):
    img = step_image(col=col)
    edges = canny_frame(img)
    cols = np.flatnonzero(edges.any(axis=0))
    assert len(cols) == 1
    assert edges[:, cols[0]].all()
    # the ridge of a symmetric step straddles two columns; ties resolve to one of them
    assert cols[0] in _brute_force_step_column(img, 1.4)
    assert cols[0] in (col - 1, col)


def test_threshold_ordering_is_checked():
    clip = VideoClip(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ControlError):
        canny_maps(clip, 100, 50)
    with pytest.raises(ControlError):
        canny_frame(np.zeros((4, 4, 3)), 0.2, 0.2)


def test_hysteresis_keeps_weak_edges_connected_to_strong_ones():
    img = np.full((20, 20, 3), 0.05)
    img[:, 10:] = 0.05 + np.linspace(0.05, 0.9, 20)[:, None, None]  # contrast grows down the edge
    strong_only = canny_frame(img, 0.14, 0.15)
    linked = canny_frame(img, 0.02, 0.15)
    assert linked.sum() > strong_only.sum() > 0
    assert np.all(linked >= strong_only)
    # the same weak edge with no strong segment anywhere is dropped entirely
    faint = np.full((20, 20, 3), 0.05)
    faint[:, 10:] = 0.15
    assert not canny_frame(faint, 0.02, 0.15).any()


@given(st.integers(3, 14), st.integers(1, 3))
def test_canny_is_translation_equivariant(col, shift):
    a = canny_frame(step_image(w=24, col=col))
    b = canny_frame(step_image(w=24, col=col + shift))
    assert np.array_equal(np.roll(a, shift, axis=1)[:, 3:-3], b[:, 3:-3])


def test_canny_maps_shape_and_range(clip_factory):
    clip = clip_factory(3)
    sig = canny_maps(clip, channels=3)
    assert sig.maps.shape == (3, 16, 16, 3) and sig.control_type == "canny"
    assert set(np.unique(sig.maps)) <= {0.0, 1.0}
    assert np.array_equal(sig.maps[..., 0], sig.maps[..., 2])


def test_identity_adapter_passes_luminance_through(clip_factory):
    clip = clip_factory(2)
    sig = external_control(clip, luminance_adapter, "luma")
    assert np.array_equal(sig.maps[..., 0], np.stack([luminance(f) for f in clip.frames]))


def test_adapter_output_is_clipped_and_checked(clip_factory):
    clip = clip_factory(2)
    sig = external_control(clip, lambda f: f * 3 - 1)
    assert sig.maps.min() == 0.0 and sig.maps.max() == 1.0
    with pytest.raises(ControlError, match="frame 0"):
        external_control(clip, lambda f: f[:8])


def test_adapter_failure_names_the_frame(clip_factory):
    clip = clip_factory(3)
    calls = []

    def flaky(frame):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("model crashed")
        return luminance(frame)

    with pytest.raises(ControlError, match="frame 1"):
        external_control(clip, flaky, "depth")


def _toy_depth(frame):
    """Depth from a known brightness-to-distance rule (a stand-in for a depth model)."""
    return 1.0 - luminance(frame)


def test_depth_adapter_on_two_plane_scene():
    scene = np.full((1, 16, 16, 3), 0.8)  # near plane: bright
    scene[0, :, 8:] = 0.2                  # far plane: dark
    maps = external_control(VideoClip(scene), _toy_depth, "depth").maps[0, ..., 0]
    left, right = maps[:, :8], maps[:, 8:]
    assert np.ptp(left) == 0 and np.ptp(right) == 0
    assert right.mean() > left.mean()


def test_control_for_config_selects_canny(small_config, clip_factory):
    sig = control_for_config(clip_factory(2), small_config())
    assert sig.control_type == "canny"
    depth = control_for_config(clip_factory(2), small_config(control_type="depth"), adapter=_toy_depth)
    assert depth.control_type == "depth"
