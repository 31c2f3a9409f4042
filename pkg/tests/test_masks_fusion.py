import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from longedit.attention import CrossAttnMapStack
from longedit.errors import ConfigError, MaskError, ShapeError
from longedit.fusion import FusionSchedule, effective_mask, fuse
from longedit.masks import estimate_mask, save_mask_overlay

# -- masks ----------------------------------------------------------------------


def test_direct_threshold_example():
    m = estimate_mask(np.array([[[0.1, 0.6], [0.4, 0.9]]]), 0.5, (2, 2))
    assert m.tolist() == [[0, 1], [0, 1]]
    assert m.dtype == np.uint8


def test_max_pooling_across_timesteps():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    q = np.array([[0.0, 0.0], [0.0, 1.0]])
    assert estimate_mask(np.stack([p, q]), 0.5, (2, 2)).tolist() == [[1, 0], [0, 1]]


def test_all_zero_maps_give_empty_mask():
    assert not estimate_mask(np.zeros((3, 4, 4)), 0.3, (4, 4)).any()


def test_layers_at_different_resolutions_are_resized_to_the_largest():
    fine = np.zeros((1, 4, 4))
    fine[0, 0, 0] = 1.0
    coarse = np.zeros((1, 2, 2))
    coarse[0, 1, 1] = 1.0
    mask = estimate_mask(CrossAttnMapStack({"a": fine, "b": coarse}), 0.5, (8, 8))
    assert mask.shape == (8, 8)
    assert mask[0, 0] == 1 and mask[7, 7] == 1 and mask[0, 7] == 0


def test_mask_errors():
    with pytest.raises(MaskError):
        estimate_mask(np.zeros((0, 2, 2)), 0.3, (2, 2))
    with pytest.raises(MaskError):
        estimate_mask(np.zeros((1, 2, 2)), 1.0, (2, 2))
    with pytest.raises(MaskError):
        estimate_mask(-np.ones((1, 2, 2)), 0.3, (2, 2))
    with pytest.raises(MaskError):
        estimate_mask({}, 0.3, (2, 2))


stacks = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
                elements=st.floats(0, 1))


@given(stacks, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_mask_shrinks_as_threshold_grows(maps, a, b):
    lo, hi = sorted((a, b))
    big, small = estimate_mask(maps, lo, (6, 6)), estimate_mask(maps, hi, (6, 6))
    assert np.all(small <= big)


# zero or comfortably normal values, so a power-of-two rescale cannot underflow
normal_stacks = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
                       elements=st.one_of(st.just(0.0), st.floats(1e-300, 1)))


@given(normal_stacks, st.floats(0.01, 0.99), st.sampled_from([0.5, 2.0, 4.0, 1024.0, 0.125]))
def test_mask_ignores_positive_rescaling(maps, tau, scale):
    # power-of-two scales keep the max-normalization bit-exact
    assert np.array_equal(estimate_mask(maps, tau, (5, 5)), estimate_mask(maps * scale, tau, (5, 5)))


def test_overlay_is_written(tmp_path):
    p = save_mask_overlay(np.zeros((8, 8, 3)), np.eye(4, dtype=np.uint8), tmp_path / "m.png")
    assert p.exists()


# -- fusion ---------------------------------------------------------------------

def test_published_gamma_example():
    s = FusionSchedule(0.97, 30, 40)
    out = fuse(np.full((1, 2, 2), 2.0), np.ones((1, 2, 2)), np.ones((2, 2)), 1, s)
    assert np.all(np.abs(out - 1.97) <= 1e-12)


def test_identity_inside_all_ones_mask_when_gamma_is_off():
    rng = np.random.default_rng(0)
    z, s = rng.normal(size=(2, 4, 3, 3))
    out = fuse(z, s, np.ones((3, 3)), 35, FusionSchedule(0.97, 30, 40))
    assert np.array_equal(out, z)


def test_all_zero_mask_restores_the_source():
    rng = np.random.default_rng(1)
    z, s = rng.normal(size=(2, 4, 3, 3))
    assert np.array_equal(fuse(z, s, np.zeros((3, 3)), 1, FusionSchedule()), s)


def test_fusion_stops_after_cutoff():
    rng = np.random.default_rng(2)
    z, s = rng.normal(size=(2, 4, 3, 3))
    out = fuse(z, s, np.zeros((3, 3)), 41, FusionSchedule(0.97, 30, 40))
    assert out is z


@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 4, 4), elements=st.floats(-5, 5)),
       arrays(np.uint8, (4, 4), elements=st.integers(0, 1)), st.integers(31, 40))
def test_plain_fusion_matches_the_masked_blend_exactly(z, s, m, step):
    out = fuse(z, s, m, step, FusionSchedule(0.97, 30, 40))
    assert np.array_equal(out, m * z + (1 - m) * s)


def test_masks_disabled_or_inverted():
    rng = np.random.default_rng(3)
    z, s = rng.normal(size=(2, 1, 2, 2))
    m = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    assert np.array_equal(fuse(z, s, None, 35, FusionSchedule(use_mask=False)), z)
    inv = fuse(z, s, m, 35, FusionSchedule(mask_inverted=True))
    assert inv[0, 0, 0] == s[0, 0, 0] and inv[0, 1, 1] == z[0, 1, 1]
    assert effective_mask(None, FusionSchedule(use_mask=False)) == 1.0


def test_batched_masks_broadcast_over_channels():
    z = np.full((2, 3, 2, 2), 5.0)
    s = np.zeros((2, 3, 2, 2))
    masks = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
    out = fuse(z, s, masks, 35, FusionSchedule())
    assert np.all(out[0] == 5.0) and np.all(out[1] == 0.0)


@given(st.floats(0.01, 1.0), st.integers(1, 50), arrays(np.uint8, (3, 3), elements=st.integers(0, 1)),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_fusion_is_affine_and_idempotent(gamma, step, m, a, b, seed):
    sched = FusionSchedule(gamma, 30, 40)
    rng = np.random.default_rng(seed)
    z1, z2, s1, s2 = rng.normal(size=(4, 2, 3, 3))
    lhs = fuse(a * z1 + b * z2, a * s1 + b * s2, m, step, sched)
    rhs = a * fuse(z1, s1, m, step, sched) + b * fuse(z2, s2, m, step, sched)
    assert np.allclose(lhs, rhs, atol=1e-9)
    assert np.allclose(fuse(s1, s1, m, step, sched), s1, rtol=1e-15, atol=1e-15)


def test_fusion_errors():
    z = np.zeros((1, 2, 2))
    with pytest.raises(ShapeError):
        fuse(z, z, np.ones((2, 2)), 0, FusionSchedule())
    with pytest.raises(ShapeError):
        fuse(z, np.zeros((1, 2, 3)), np.ones((2, 2)), 1, FusionSchedule())
    with pytest.raises(ShapeError):
        fuse(z, z, np.ones((3, 3)), 1, FusionSchedule())
    with pytest.raises(ShapeError):
        fuse(z, z, None, 1, FusionSchedule())
    with pytest.raises(ConfigError):
        FusionSchedule(1.5)
    with pytest.raises(ConfigError):
        FusionSchedule(0.9, 41, 40)
