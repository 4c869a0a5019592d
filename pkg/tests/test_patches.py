import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cloudfcn import patches, unet
from cloudfcn.errors import ShapeError
from cloudfcn.raster_io import Band, Raster
from oracles import bilinear_loop

TINY = unet.NetworkConfig(input_size=32, base_channels=2, channel_cap=64)


def test_grid_counts():
    g = patches.PatchGrid(7000, 7800)
    assert (g.rows, g.cols, len(g)) == (19, 21, 399)
    assert g.pad_bottom == 19 * 384 - 7000
    assert patches.PatchGrid(768, 384).pad_right == 0


def test_origin_and_index_of_are_inverse():
    g = patches.PatchGrid(100, 70, 32, 16)
    for i in range(len(g)):
        assert g.index_of(*g.origin(i)) == i


def test_tile_reflect_padding():
    img = np.arange(12, dtype=float).reshape(3, 4)
    tiles = patches.tile(img, patches.PatchGrid(3, 4, 4, 4))
    assert len(tiles) == 1
    np.testing.assert_array_equal(tiles[0][3], img[1])  # row 3 mirrors row 1


def test_tile_shape_mismatch():
    with pytest.raises(ShapeError):
        patches.tile(np.zeros((5, 5)), patches.PatchGrid(4, 4, 2, 2))


def test_tile_accepts_raster():
    r = Raster(np.arange(16).reshape(4, 4), Band.B2)
    tiles = patches.tile(r, patches.grid_for(r, 2, 2))
    assert len(tiles) == 4 and tiles[3].tolist() == [[10, 11], [14, 15]]


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 40).flatmap(
        lambda h: st.integers(1, 40).flatmap(
            lambda w: st.tuples(hnp.arrays(np.float64, (h, w), elements=st.floats(-5, 5)), st.integers(1, 16))
        )
    )
)
def test_stitch_tile_identity(img_n):
    img, n = img_n
    g = patches.PatchGrid(*img.shape, n, n)
    np.testing.assert_array_equal(patches.stitch(patches.tile(img, g), g), img)


def test_stitch_count_and_shape_checked():
    g = patches.PatchGrid(4, 4, 2, 2)
    with pytest.raises(ShapeError):
        patches.stitch([np.zeros((2, 2))] * 3, g)
    with pytest.raises(ShapeError):
        patches.stitch([np.zeros((2, 2))] * 3 + [np.zeros((3, 3))], g)


def test_resize_matches_loop_oracle(rng):
    img = rng.random((5, 7))
    for out_h, out_w in [(9, 3), (5, 7), (1, 1), (12, 14)]:
        np.testing.assert_allclose(patches.resize_bilinear(img, out_w, out_h), bilinear_loop(img, out_w, out_h), atol=1e-12)


def test_resize_corners_and_constants(rng):
    img = rng.random((6, 6))
    up = patches.resize_bilinear(img, 11, 11)
    assert up[0, 0] == img[0, 0] and up[-1, -1] == img[-1, -1]
    const = np.full((4, 5), 0.3)
    assert np.all(patches.resize_bilinear(const, 9, 13) == 0.3)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(0, 1)), st.integers(1, 12), st.integers(1, 12))
def test_resize_stays_within_input_range(img, w, h):
    out = patches.resize_bilinear(img, w, h)
    assert out.shape == (h, w)
    assert out.min() >= img.min() and out.max() <= img.max()


def test_resize_down_up_recovers_linear_ramp():
    ramp = np.add.outer(np.arange(9.0), 2 * np.arange(9.0))
    small = patches.resize_bilinear(ramp, 5, 5)
    np.testing.assert_allclose(patches.resize_bilinear(small, 9, 9), ramp, atol=1e-12)


def test_binarize_threshold_semantics():
    p = np.array([[0.0, 0.5, 0.49, 1.0]])
    assert patches.binarize(p).bits.tolist() == [[False, True, False, True]]
    assert patches.binarize(p, 0.0).bits.all()
    with pytest.raises(ValueError):
        patches.binarize(p, 1.5)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_binarize_monotone_in_threshold(p, t1, t2):
    lo, hi = sorted((t1, t2))
    assert not (patches.binarize(p, hi).bits & ~patches.binarize(p, lo).bits).any()


def test_training_pairs_shapes_and_binary_mask(rng):
    scene = rng.random((4, 50, 70))
    gt = rng.random((50, 70)) > 0.5
    pairs = patches.training_pairs(scene, gt, patches.PatchGrid(50, 70, 64, 32))
    assert len(pairs) == 2
    x, h = pairs[0]
    assert x.shape == (4, 32, 32) and x.dtype == np.float32
    assert h.shape == (32, 32) and set(np.unique(h)) <= {0, 1}
    with pytest.raises(ShapeError):
        patches.training_pairs(scene, gt[:10], patches.PatchGrid(50, 70, 64, 32))


@pytest.mark.parametrize("shape", [(64, 64), (70, 45), (20, 100)])
def test_predict_scene_matches_input_dims(rng, shape):
    params = unet.init_params(TINY, seed=0)
    prob, mask = patches.predict_scene(params, rng.random((4, *shape)), patch_native=64)
    assert prob.shape == shape and mask.shape == shape
    assert prob.min() >= 0 and prob.max() <= 1


def test_predict_scene_from_rasters(rng):
    params = unet.init_params(TINY, seed=0)
    rasters = [Raster(rng.integers(0, 65535, (40, 40)), b) for b in (Band.B4, Band.B3, Band.B2, Band.B5)]
    prob, mask = patches.predict_scene(params, rasters, patch_native=32)
    assert prob.shape == (40, 40)


def test_patch_order_does_not_matter(rng):
    params = unet.init_params(TINY, seed=1)
    scene = rng.random((4, 96, 80))
    grid = patches.PatchGrid(96, 80, 32, 32)
    base, mask = patches.predict_scene(params, scene, patch_native=32)
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(len(grid))
        prob, m = patches.predict_scene(params, scene, patch_native=32, order=order)
        assert prob.tobytes() == base.tobytes() and m == mask


def test_incomplete_order_rejected(rng):
    params = unet.init_params(TINY, seed=1)
    with pytest.raises(ShapeError):
        patches.predict_scene(params, rng.random((4, 64, 64)), patch_native=32, order=[0, 1, 2])


def test_prob_to_raster_scales_to_uint16():
    r = patches.prob_to_raster(np.array([[0.0, 1.0, 0.5]]), "s")
    assert r.samples.tolist() == [[0, 65535, 32768]] and r.band_id is Band.PROB
