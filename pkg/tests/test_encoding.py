import math

import numpy as np
import pytest

from oracles import fourier_direct, pixel_sum_loop, reference_pe_direct, width_sum_loop
from widthformer import encoding, numeric
from widthformer.checks import query_pixel_gap, run_checks
from widthformer.decoder import make_grid
from widthformer.encoding import (
    FourierEncoder, bev_query_pe, fourier, height_distribution, pixel_reference_sum, pixel_refpe, query_refpe,
    reference_coefficients, reference_pe, width_reference_sum, width_refpe,
)
from widthformer.geometry import DepthBins, to_polar
from widthformer.numeric import Mlp, ShapeError, make_rng
from widthformer.scene import toy_scene


def _dirichlet(rng, shape):
    x = rng.random(shape)
    return x / x.sum(axis=-1, keepdims=True)


def test_fourier_examples():
    enc = FourierEncoder(bands=3)
    np.testing.assert_array_equal(fourier(0.0, enc), [0, 1, 0, 1, 0, 1])
    assert np.max(np.abs(fourier(0.37, enc) - fourier_direct(0.37, 3))) <= 1e-12
    assert enc.encode_width(False) == 18 and enc.encode_width(True) == 24


def test_reference_pe_matches_direct():
    enc = FourierEncoder(bands=4)
    for p in make_rng(1).uniform(-60, 60, size=(30, 3)):
        got = reference_pe(to_polar(p), True, enc)
        assert np.max(np.abs(got - reference_pe_direct(p, True, 4))) <= 1e-12


def test_heads_are_normalized():
    rng = make_rng(2)
    feat = rng.normal(size=(2, 4, 6, 8))
    s = reference_coefficients(feat, Mlp.init(rng, [8, 8, 3]))
    t = height_distribution(feat, Mlp.init(rng, [8, 8, 1]))
    assert s.shape == (2, 4, 6, 3) and t.shape == (2, 6, 4)
    assert np.max(np.abs(s.sum(-1) - 1)) <= 1e-6 and np.max(np.abs(t.sum(-1) - 1)) <= 1e-6


def test_pixel_sum_matches_loop():
    rig, _ = toy_scene()
    rng = make_rng(3)
    bins = DepthBins.uniform(1, 60, 3)
    coeffs = _dirichlet(rng, (2, 4, 6, 3))
    enc = FourierEncoder(2)
    got = pixel_reference_sum(rig, (4, 6), bins, coeffs, True, enc)
    assert np.max(np.abs(got - pixel_sum_loop(rig, 4, 6, bins, coeffs, True, 2))) <= 1e-9


def test_width_sum_matches_loop():
    rig, _ = toy_scene()
    rng = make_rng(4)
    bins = DepthBins.uniform(1, 60, 3)
    coeffs = _dirichlet(rng, (2, 4, 6, 3))
    heights = _dirichlet(rng, (2, 6, 4))
    got = width_reference_sum(rig, (4, 6), bins, coeffs, heights, FourierEncoder(2))
    assert np.max(np.abs(got - width_sum_loop(rig, 4, 6, bins, coeffs, heights, 2))) <= 1e-9


def test_one_hot_height_picks_a_row():
    rig, _ = toy_scene()
    rng = make_rng(5)
    bins = DepthBins.uniform(1, 60, 3)
    coeffs = _dirichlet(rng, (2, 4, 6, 3))
    heights = np.zeros((2, 6, 4))
    heights[..., 2] = 1.0
    enc = FourierEncoder(2)
    pixel = pixel_reference_sum(rig, (4, 6), bins, coeffs, False, enc)
    width = width_reference_sum(rig, (4, 6), bins, coeffs, heights, enc)
    np.testing.assert_array_equal(width, pixel[:, 2])


def test_refpe_shapes_and_validation():
    rig, feat = toy_scene()
    rng = make_rng(6)
    enc = FourierEncoder(2)
    bins = DepthBins.uniform(1, 60, 3)
    coeffs = _dirichlet(rng, (2, 4, 6, 3))
    heights = _dirichlet(rng, (2, 6, 4))
    pix = pixel_refpe(feat, rig, bins, coeffs, Mlp.init(rng, [enc.encode_width(True), 8, 8]), True, enc)
    wid = width_refpe(feat, rig, bins, coeffs, heights, Mlp.init(rng, [enc.encode_width(False), 8, 8]), enc)
    assert pix.values.shape == (2, 4, 6, 8) and wid.values.shape == (2, 6, 8)
    with pytest.raises(ValueError):
        pixel_refpe(feat, rig, bins, coeffs * 2, Mlp.init(rng, [16, 8]), True, enc)
    with pytest.raises(ShapeError):
        pixel_refpe(feat[:1], rig, bins, coeffs, Mlp.init(rng, [16, 8]), True, enc)


def test_query_matches_pixel_construction():
    assert query_pixel_gap(make_rng(7), 10) <= 1e-12


def test_query_refpe_at_origin():
    enc = FourierEncoder(2)
    mlp = Mlp([numeric.Linear.identity(enc.encode_width(True))])
    expected = fourier_direct(0.0, 2) + fourier_direct(0.0, 2) + fourier_direct(1.0, 2) + fourier_direct(0.0, 2)
    assert np.max(np.abs(query_refpe([0, 0, 0], mlp, enc) - expected)) <= 1e-12


def test_bev_query_pe_uses_cell_centers():
    enc = FourierEncoder(2)
    grid = make_grid(3, 3, 51.2)
    mlp = Mlp([numeric.Linear.identity(enc.encode_width(False))])
    q = bev_query_pe(grid, mlp, enc).values
    x, y = grid.centers[0, 2]
    expected = reference_pe_direct([x, y, 0.0], False, 2)
    assert np.max(np.abs(q[0, 2] - expected)) <= 1e-12
    assert np.array_equal(bev_query_pe(grid.centers, mlp, enc).values, q)


def test_unnormalized_softmax_is_caught(monkeypatch):
    """A softmax that forgets to divide must trip the normalization checks."""
    monkeypatch.setattr(numeric, "softmax", lambda x, axis=-1: np.exp(x))
    results = run_checks("normalization.*")
    failed = {r.name for r in results if not r.passed}
    assert {"normalization.reference_coefficients", "normalization.height_distribution"} <= failed
    rig, feat = toy_scene()
    rng = make_rng(8)
    coeffs = encoding.reference_coefficients(feat, Mlp.init(rng, [8, 8, 3]))
    with pytest.raises(ValueError):
        encoding.check_normalized(coeffs, -1, "reference coefficients")


def test_filter_runs_only_matching_checks():
    results = run_checks("polar*")
    assert results and all(r.name.startswith("polar") for r in results)
    assert all(r.passed for r in results)
    assert math.isfinite(len(results))


def test_fourier_band_zero_period_two():
    enc = FourierEncoder(bands=3)
    a, b = fourier(0.3, enc), fourier(2.3, enc)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_reference_pe_lengths_and_composition():
    enc = FourierEncoder(bands=3)
    pc = to_polar(np.array([3.0, 4.0, 1.0]))
    assert reference_pe(pc, False, enc).shape == (18,) and reference_pe(pc, True, enc).shape == (24,)
    manual = np.concatenate([fourier(5 / 60, enc), fourier(0.8, enc), fourier(0.6, enc), fourier(1 / 10, enc)])
    assert np.max(np.abs(reference_pe(pc, True, enc) - manual)) <= 1e-12
    origin = reference_pe(to_polar(np.array([0.0, 0.0, 1.0])), True, enc)
    expected = np.concatenate([fourier(0.0, enc), fourier(0.0, enc), fourier(1.0, enc), fourier(0.1, enc)])
    np.testing.assert_array_equal(origin, expected)


def test_pixel_refpe_single_bin_ignores_coefficients():
    rig, feat = toy_scene()
    enc = FourierEncoder(2)
    bins = DepthBins([7.0])
    mlp = Mlp.init(make_rng(10), [enc.encode_width(True), 8, 8])
    ones = np.ones((2, 4, 6, 1))
    got = pixel_refpe(feat, rig, bins, ones, mlp, True, enc).values
    direct = mlp(reference_pe(to_polar(np.stack([np.stack([np.stack(
        [reference_points_single(cam, i, j, 7.0) for j in range(6)]) for i in range(4)]) for cam in rig.cameras])),
        True, enc))
    np.testing.assert_allclose(got, direct, rtol=0, atol=1e-12)


def reference_points_single(cam, i, j, depth):
    from oracles import ego_point_direct
    return np.array(ego_point_direct(cam, j + 0.5, i + 0.5, depth))


def test_identical_reference_points_sum_to_that_encoding():
    from widthformer.geometry import CameraModel, CameraRig
    # principal point on the pixel centre: the ray runs along ego z, so (d, theta) never change with depth
    cam = CameraModel(np.array([[1.0, 0, 0.5], [0, 1.0, 0.5], [0, 0, 1.0]]), np.eye(3), np.array([3.0, 4.0, 1.0]))
    rig = CameraRig((cam,))
    enc = FourierEncoder(2)
    coeffs = _dirichlet(make_rng(11), (1, 1, 1, 4))
    got = pixel_reference_sum(rig, (1, 1), DepthBins.uniform(1, 4, 4), coeffs, False, enc)[0, 0, 0]
    assert np.max(np.abs(got - reference_pe_direct([3.0, 4.0, 0.0], False, 2))) <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_pixel_sum_four_bins_matches_loop(seed):
    rig, _ = toy_scene()
    bins = DepthBins.uniform(1, 60, 4)
    coeffs = _dirichlet(make_rng(seed, 12), (2, 4, 6, 4))
    got = pixel_reference_sum(rig, (4, 6), bins, coeffs, True, FourierEncoder(2))
    assert np.max(np.abs(got - pixel_sum_loop(rig, 4, 6, bins, coeffs, True, 2))) <= 1e-12


def test_query_refpe_three_four_five():
    enc = FourierEncoder(2)
    mlp = Mlp([numeric.Linear.identity(enc.encode_width(True))])
    expected = fourier_direct(5 / 60, 2) + fourier_direct(0.8, 2) + fourier_direct(0.6, 2) + fourier_direct(0.1, 2)
    assert np.max(np.abs(query_refpe([3, 4, 1], mlp, enc) - expected)) <= 1e-12


def test_bev_queries_match_per_cell_oracle():
    from oracles import mlp_loop
    enc = FourierEncoder(2)
    grid = make_grid(4, 4, 51.2)
    mlp = Mlp.init(make_rng(13), [enc.encode_width(False), 8, 8])
    q = bev_query_pe(grid, mlp, enc).values
    for a in range(4):
        for b in range(4):
            x, y = grid.centers[a, b]
            expected = mlp_loop(mlp, reference_pe_direct([x, y, 0.0], False, 2))
            assert np.max(np.abs(q[a, b] - expected)) <= 1e-12


def _width_case(h, seed):
    from widthformer.scene import SceneSpec, gen_scene
    rig, feat = gen_scene(SceneSpec(2, h, 6, 8, seed))
    rng = make_rng(seed, 14)
    bins = DepthBins.uniform(1, 60, 3)
    return rig, feat, bins, _dirichlet(rng, (2, h, 6, 3)), rng


def test_width_refpe_single_row():
    rig, feat, bins, coeffs, rng = _width_case(1, 0)
    enc = FourierEncoder(2)
    mlp = Mlp.init(rng, [enc.encode_width(False), 8, 8])
    got = width_refpe(feat, rig, bins, coeffs, np.ones((2, 6, 1)), mlp, enc).values
    pre = pixel_reference_sum(rig, (1, 6), bins, coeffs, False, enc)[:, 0]
    np.testing.assert_allclose(got, mlp(pre), rtol=0, atol=1e-12)


def test_width_refpe_uniform_heights_take_column_mean():
    rig, feat, bins, coeffs, rng = _width_case(4, 1)
    enc = FourierEncoder(2)
    got = width_reference_sum(rig, (4, 6), bins, coeffs, np.full((2, 6, 4), 0.25), enc)
    pre = pixel_reference_sum(rig, (4, 6), bins, coeffs, False, enc)
    assert np.max(np.abs(got - pre.mean(axis=1))) <= 1e-12


def test_width_sum_eight_rows_matches_loop():
    rig, feat, bins, coeffs, rng = _width_case(8, 2)
    heights = _dirichlet(rng, (2, 6, 8))
    got = width_reference_sum(rig, (8, 6), bins, coeffs, heights, FourierEncoder(2))
    assert np.max(np.abs(got - width_sum_loop(rig, 8, 6, bins, coeffs, heights, 2))) <= 1e-12
