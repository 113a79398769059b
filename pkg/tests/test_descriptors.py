import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasalbio.descriptors import (DescriptorSet, KeypointGrid, SubdivisionSpec, build_keypoint_grid,
                                  curve_plane_normal, extract_features, histogram_edges,
                                  nasal_curves, spherical_patches)
from nasalbio.gabor import GaborNormalStack, gabor_normal_stack
from nasalbio.geometry import DepthGrid
from nasalbio.landmarks import LANDMARK_NAMES, detect_landmarks
from nasalbio.synthetic import NoseShape, SyntheticFace, random_shape

from oracles import histogram_features

SEVEN_ONES = SubdivisionSpec(counts=(1,) * 6)


@pytest.fixture(scope="module")
def detected(nose0):
    nose, _, tip0, root0 = nose0
    return nose, detect_landmarks(nose, tip0, root0).landmarks


@pytest.fixture(scope="module")
def stack0(detected):
    return gabor_normal_stack(detected[0])


def _flat_grid(half=30.0, res=0.5, z=None):
    x = np.arange(-half, half + 1e-9, res)
    X, Y = np.meshgrid(x, x)
    Z = np.zeros_like(X) if z is None else z(X, Y)
    return DepthGrid(x, x.copy(), Z, np.ones(X.shape, bool))


def _uniform_stack(grid, normal, s_n=2):
    ny, nx = grid.shape
    normals = np.broadcast_to(np.asarray(normal, float)[None, :, None, None], (s_n, 3, ny, nx)).copy()
    return GaborNormalStack(np.zeros((s_n, ny, nx)), normals, grid.mask.copy(),
                            np.ones((s_n, ny, nx), bool))


# ---------------------------------------------------------------- keypoints

def test_unit_counts_give_the_seven_landmarks(detected):
    nose, lms = detected
    kp = build_keypoint_grid(lms, nose, SEVEN_ONES)
    assert kp.ids == LANDMARK_NAMES
    assert np.allclose(kp.points[:, :2], lms.as_array()[:, :2])


def test_default_grid_has_nineteen_points_on_the_surface(detected):
    nose, lms = detected
    kp = build_keypoint_grid(lms, nose)
    assert len(kp) == 19 and kp.on_surface.all()
    face = SyntheticFace(random_shape(0))
    analytic = face.surface(kp.points[:, 0], kp.points[:, 1])
    assert np.abs(kp.points[:, 2] - analytic).max() < 0.5


def test_grid_is_deterministic(detected):
    nose, lms = detected
    a, b = build_keypoint_grid(lms, nose), build_keypoint_grid(lms, nose)
    assert a.ids == b.ids and np.array_equal(a.points, b.points)


def test_ridge_midpoint_on_symmetry_plane(mirror_grid):
    nose, truth, _, _ = mirror_grid
    kp = build_keypoint_grid(truth, nose, SubdivisionSpec(counts=(1, 1, 1, 1, 2, 1)))
    assert abs(kp.point("L1-L4:1")[0]) < 1e-12


def test_keypoint_in_hole_is_dropped_and_flagged(detected):
    nose, lms = detected
    mask = nose.mask.copy()
    iy, ix = nose.nearest_index(np.array([lms.L5[0]]), np.array([lms.L5[1]]))
    mask[iy[0] - 3:iy[0] + 4, ix[0] - 3:ix[0] + 4] = False
    holed = nose.with_depth(nose.z, mask)
    kp = build_keypoint_grid(lms, holed, SEVEN_ONES)
    assert kp.on_surface.tolist() == [n != "L5" for n in LANDMARK_NAMES]
    patches = spherical_patches(kp, holed)
    assert patches.empty.tolist() == [n == "L5" for n in LANDMARK_NAMES]


def test_bad_subdivision_rejected():
    with pytest.raises(ValueError):
        SubdivisionSpec(counts=(0, 1, 1, 1, 1, 1))
    with pytest.raises(ValueError):
        SubdivisionSpec(counts=(1, 1))


# ---------------------------------------------------------------- patches

def _single_keypoint(grid, x, y):
    z, ok = grid.sample(np.array([x]), np.array([y]))
    return KeypointGrid(np.array([[x, y, z[0]]]), ("c",), ok)


def test_infinite_radius_takes_every_valid_pixel(detected):
    nose, lms = detected
    d = spherical_patches(build_keypoint_grid(lms, nose), nose, math.inf)
    for region in d.regions:
        assert len(region) == nose.n_valid


def test_flat_plane_patch_is_a_disc():
    grid = _flat_grid()
    d = spherical_patches(_single_keypoint(grid, 0.0, 0.0), grid, 11.0)
    area = len(d.regions[0]) * grid.resolution ** 2
    assert abs(area - math.pi * 121) / (math.pi * 121) < 0.05


def test_steep_ridge_patch_is_smaller_than_disc():
    grid = _flat_grid(z=lambda X, Y: -2.0 * np.sqrt(X * X + 1.0))
    flat = _flat_grid()
    on_ridge = spherical_patches(_single_keypoint(grid, 0.0, 0.0), grid, 11.0)
    on_plane = spherical_patches(_single_keypoint(flat, 0.0, 0.0), flat, 11.0)
    assert len(on_ridge.regions[0]) < len(on_plane.regions[0])


def test_non_positive_radius_rejected(detected):
    nose, lms = detected
    with pytest.raises(ValueError):
        spherical_patches(build_keypoint_grid(lms, nose), nose, 0.0)


# ---------------------------------------------------------------- curves

@given(st.tuples(*[st.floats(-50, 50)] * 3), st.tuples(*[st.floats(-50, 50)] * 3))
@settings(max_examples=200, deadline=None)
def test_curve_plane_normal_unit_and_orthogonal(a, b):
    a, b = np.array(a), np.array(b)
    d = a - b
    if np.hypot(d[0], d[1]) < 1e-6:
        return
    n = curve_plane_normal(a, b)
    assert abs(np.linalg.norm(n) - 1) < 1e-12
    assert abs(n[2]) < 1e-12
    assert abs(n[:2] @ d[:2]) < 1e-9 * np.hypot(d[0], d[1])


def test_coincident_pair_rejected():
    with pytest.raises(ValueError):
        curve_plane_normal([1.0, 2.0, 0.0], [1.0, 2.0, 5.0])


def test_root_to_subnasale_curve_is_the_ridge_profile(mirror_grid):
    nose, truth, _, _ = mirror_grid
    kp = build_keypoint_grid(truth, nose, SEVEN_ONES)
    d = nasal_curves(kp, nose, pairs=(("L1", "L5"),))
    c = d.curves[0]
    assert np.abs(c[:, 0]).max() < 1e-12
    face = SyntheticFace(NoseShape())
    # away from the tip the bilinear profile sits close to the analytic one
    away = np.abs(c[:, 1]) > 2.0
    assert np.abs(c[away, 2] - face.surface(0.0, c[away, 1])).max() < 0.2
    # and the region is the centre column of pixels
    iy, ix = np.unravel_index(d.regions[0], nose.shape)
    assert np.all(nose.x[ix] == 0.0)


def test_arc_length_at_least_chord(detected):
    nose, lms = detected
    d = nasal_curves(build_keypoint_grid(lms, nose), nose)
    assert d.K == 15
    for c in d.curves:
        arc = np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1))
        assert arc >= np.linalg.norm(c[-1] - c[0]) - 1e-9
        assert len(c) >= 2


# ---------------------------------------------------------------- features

@pytest.mark.parametrize("h_l", [21, 15, 8])
def test_flat_field_fills_single_bins(h_l):
    grid = _flat_grid(half=10.0)
    stack = _uniform_stack(grid, (0.0, 0.0, 1.0))
    d = spherical_patches(_single_keypoint(grid, 0.0, 0.0), grid, 5.0)
    f = extract_features(stack, d, h_l).as_tensor()
    edges = histogram_edges(h_l)
    zero_bin = int(np.searchsorted(edges, 0.0, side="right") - 1)
    for s in range(2):
        assert f[s, 2, 0, -1] == 1.0 and f[s, 2, 0].sum() == 1.0
        assert f[s, 0, 0, zero_bin] == 1.0 and f[s, 1, 0, zero_bin] == 1.0


def test_default_lengths(detected, stack0):
    nose, lms = detected
    kp = build_keypoint_grid(lms, nose)
    f = extract_features(stack0, spherical_patches(kp, nose), 21)
    assert len(f.values) == 4 * 3 * 19 * 21 == 4788
    g = extract_features(stack0, nasal_curves(kp, nose), 15)
    assert len(g.values) == 4 * 3 * 15 * 15


def test_histograms_normalised_or_flagged(detected, stack0):
    nose, lms = detected
    f = extract_features(stack0, spherical_patches(build_keypoint_grid(lms, nose), nose), 21)
    t = f.as_tensor()
    assert t.min() >= 0
    sums = t.sum(axis=3)                       # (s_n, 3, K)
    for s in range(f.s_n):
        for i in range(f.K):
            if f.flags[s, i]:
                assert np.all(t[s, :, i] == 0)
            else:
                assert np.abs(sums[s, :, i] - 1).max() < 1e-9


def test_permuting_region_pixels_changes_nothing(detected, stack0, rng):
    nose, lms = detected
    d = spherical_patches(build_keypoint_grid(lms, nose), nose)
    shuffled = DescriptorSet(d.kind, tuple(rng.permutation(r) for r in d.regions), d.grid_shape)
    a = extract_features(stack0, d, 21)
    b = extract_features(stack0, shuffled, 21)
    assert np.array_equal(a.values, b.values)


@given(st.integers(0, 10_000))
@settings(max_examples=10, deadline=None)
def test_random_configs_match_histogram_oracle(seed):
    rng = np.random.default_rng(seed)
    s_n, K, h_l = int(rng.integers(1, 5)), int(rng.integers(1, 8)), int(rng.integers(2, 25))
    ny, nx = 12, 15
    v = rng.normal(size=(s_n, 3, ny, nx))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    stack = GaborNormalStack(np.zeros((s_n, ny, nx)), v, np.ones((ny, nx), bool),
                             np.ones((s_n, ny, nx), bool))
    regions = tuple(rng.choice(ny * nx, size=int(rng.integers(1, 60)), replace=False)
                    for _ in range(K))
    f = extract_features(stack, DescriptorSet("spherical_patches", regions, (ny, nx)), h_l)
    ref = histogram_features(v.reshape(s_n, 3, -1), list(regions), h_l)
    assert len(f.values) == s_n * 3 * K * h_l
    assert np.abs(f.values - ref).max() < 1e-12


def test_translation_leaves_features_unchanged(detected, stack0):
    nose, lms = detected
    moved_nose = nose.translated(12.5, -7.0)
    moved_lms = lms.translated([12.5, -7.0, 0.0])
    a = extract_features(stack0, spherical_patches(build_keypoint_grid(lms, nose), nose), 21)
    moved_stack = gabor_normal_stack(moved_nose)
    b = extract_features(moved_stack, spherical_patches(build_keypoint_grid(moved_lms, moved_nose),
                                                        moved_nose), 21)
    assert np.array_equal(a.values, b.values)


def test_features_bit_identical_across_runs(detected):
    nose, lms = detected
    runs = [extract_features(gabor_normal_stack(nose),
                             spherical_patches(build_keypoint_grid(lms, nose), nose), 21)
            for _ in range(2)]
    assert runs[0].values.tobytes() == runs[1].values.tobytes()


def test_low_confidence_region_gives_flagged_zero_histogram():
    grid = _flat_grid(half=10.0)
    stack = _uniform_stack(grid, (0.0, 0.0, 1.0))
    conf = stack.confident.copy()
    conf[1] = False
    stack = GaborNormalStack(stack.ngm, stack.normals, stack.valid, conf)
    d = spherical_patches(_single_keypoint(grid, 0.0, 0.0), grid, 5.0)
    f = extract_features(stack, d, 10)
    assert f.flags.tolist() == [[False], [True]]
    assert np.all(f.as_tensor()[1] == 0) and f.as_tensor()[0].sum() == 3.0


def test_feature_errors():
    grid = _flat_grid(half=5.0)
    stack = _uniform_stack(grid, (0.0, 0.0, 1.0))
    d = spherical_patches(_single_keypoint(grid, 0.0, 0.0), grid, 2.0)
    with pytest.raises(ValueError):
        extract_features(stack, d, 1)
    with pytest.raises(ValueError):
        extract_features(stack, DescriptorSet("spherical_patches", d.regions, (3, 3)), 5)
