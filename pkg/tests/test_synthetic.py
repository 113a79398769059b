import math

import numpy as np
import pytest

from nasalbio.synthetic import (Expression, NoseShape, SyntheticFace, SyntheticNoseSpec,
                                generate_synthetic, random_expression, random_shape,
                                signal_noise_features)


def test_same_seed_gives_identical_clouds():
    a, la = generate_synthetic(SyntheticNoseSpec(subject_seed=3, noise_sigma=0.1))
    b, lb = generate_synthetic(SyntheticNoseSpec(subject_seed=3, noise_sigma=0.1))
    assert a.points.tobytes() == b.points.tobytes()
    assert np.array_equal(la.as_array(), lb.as_array())


def test_zero_expression_is_the_neutral_surface():
    a, _ = generate_synthetic(SyntheticNoseSpec(subject_seed=5))
    b, _ = generate_synthetic(SyntheticNoseSpec(subject_seed=5, expression=Expression(0.0, 0.0, 0.0)))
    assert a.points.tobytes() == b.points.tobytes()


def test_noise_free_samples_lie_on_the_analytic_surface():
    cloud, _ = generate_synthetic(SyntheticNoseSpec(subject_seed=8))
    face = SyntheticFace(random_shape(8))
    p = cloud.points
    assert np.abs(p[:, 2] - face.surface(p[:, 0], p[:, 1])).max() <= 1e-12


def test_roll_rotates_cloud_and_truth_together():
    spec = SyntheticNoseSpec(subject_seed=2)
    flat, truth = generate_synthetic(spec)
    rolled, rtruth = generate_synthetic(SyntheticNoseSpec(subject_seed=2, roll=math.radians(7)))
    c, s = math.cos(math.radians(7)), math.sin(math.radians(7))
    R = np.array([[c, -s], [s, c]])
    assert np.allclose(rolled.points[:, :2], flat.points[:, :2] @ R.T)
    assert np.allclose(rtruth.as_array()[:, :2], truth.as_array()[:, :2] @ R.T)
    assert np.allclose(rtruth.as_array()[:, 2], truth.as_array()[:, 2])


def test_truth_landmarks_are_on_the_surface_and_ordered():
    for seed in range(5):
        face = SyntheticFace(random_shape(seed))
        lms = face.landmarks()
        pts = lms.as_array()
        assert np.abs(pts[:, 2] - face.surface(pts[:, 0], pts[:, 1])).max() < 1e-9
        assert lms.ordering_ok()
        assert np.allclose(lms.L4, [0.0, 0.0, face.surface(0.0, 0.0)])


def test_symmetric_shape_gives_mirrored_landmarks():
    lms = SyntheticFace(NoseShape()).landmarks()
    assert lms.L1[0] == 0.0 and lms.L5[0] == 0.0
    assert np.allclose(lms.L3 * [-1, 1, 1], lms.L6, atol=1e-9)
    assert np.allclose(lms.L2 * [-1, 1, 1], lms.L7, atol=1e-6)


def test_tip_is_the_highest_point():
    face = SyntheticFace(random_shape(1))
    x = np.arange(-40, 40.01, 0.25)
    X, Y = np.meshgrid(x, x)
    Z = face.surface(X, Y)
    iy, ix = np.unravel_index(np.argmax(Z), Z.shape)
    assert abs(X[iy, ix]) < 0.3 and abs(Y[iy, ix]) < 0.3


@pytest.mark.parametrize("kw", [dict(ridge_height=-1.0), dict(tip_curvature=0.0),
                                dict(cheek_curvature=-0.1)])
def test_degenerate_shapes_rejected(kw):
    with pytest.raises(ValueError):
        SyntheticFace(NoseShape(**kw))


def test_subjects_differ_more_than_expressions():
    x = np.arange(-25, 25.01, 0.5)
    X, Y = np.meshgrid(x, np.arange(-20, 40.01, 0.5))
    inter, intra = [], []
    for s in range(50):
        a = SyntheticFace(random_shape(s)).surface(X, Y)
        b = SyntheticFace(random_shape(s + 1)).surface(X, Y)
        e = SyntheticFace(random_shape(s), random_expression(np.random.default_rng(s))).surface(X, Y)
        inter.append(np.abs(a - b).mean())
        intra.append(np.abs(a - e).mean())
    assert np.mean(inter) > np.mean(intra)
    assert min(inter) > max(intra)


def test_signal_noise_layout():
    d = signal_noise_features(K=10, n_informative=4, n_subjects=6, s_n=2, h_l=3)
    assert d.gallery.shape == (12, 2 * 3 * 10 * 3)
    assert d.informative.sum() == 4 and d.layout == (2, 10, 3)
    assert d.probes.shape[0] == 18 and d.heldout.shape[0] == 18


def test_only_informative_blocks_vary_between_subjects():
    d = signal_noise_features(K=6, n_informative=3, n_subjects=300, signal=1.0, noise=1.0)
    g = d.gallery.reshape(300, 2, 3, 6, 4)          # subject, capture, component, descriptor, bin
    spread = g.mean(axis=1).var(axis=0).mean(axis=(0, 2))   # per descriptor
    # subject means: signal^2 + noise^2 / 2 for informative blocks, noise^2 / 2 otherwise
    assert np.allclose(spread[:3], 1.5, rtol=0.15) and np.allclose(spread[3:], 0.5, rtol=0.15)
