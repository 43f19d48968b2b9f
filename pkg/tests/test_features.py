import numpy as np
import pytest

from conftest import random_transform
from pcrpolicy.errors import InsufficientPointsError, PreconditionError
from pcrpolicy.features import N_FEATURES, FeatureSet, compute_fpfh, match_features, pair_features
from pcrpolicy.geometry import PointCloud, SpatialIndex, transform_cloud
from pcrpolicy.synth import SceneSpec, make_cloud


@pytest.fixture(scope="module")
def box():
    return make_cloud(SceneSpec("box", (0.06, 0.04, 0.03), density=60000, seed=2))


def test_descriptor_shape_and_sign(box):
    f = compute_fpfh(box, 0.02)
    assert f.descriptors.shape == (len(box), N_FEATURES) == (len(box), 33)
    assert np.all(np.isfinite(f.descriptors)) and f.descriptors.min() >= 0


def test_rigid_invariance(box, rng):
    g = random_transform(rng)
    a = compute_fpfh(box, 0.02).descriptors
    b = compute_fpfh(transform_cloud(g, box), 0.02).descriptors
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_plane_descriptors_all_equal():
    g = np.stack(np.meshgrid(np.arange(15), np.arange(15), indexing="ij"), -1).reshape(-1, 2) * 0.004
    pts = np.column_stack([g, np.zeros(len(g))])
    f = compute_fpfh(PointCloud(pts, normals=np.tile([0, 0, 1.0], (len(pts), 1))), 0.012).descriptors
    np.testing.assert_allclose(f, np.tile(f[0], (len(f), 1)), atol=1e-6)


def test_edge_differs_from_plane():
    spec = SceneSpec("l_shape", density=60000, seed=4)
    p = make_cloud(spec)
    f = compute_fpfh(p, 0.02).descriptors
    a, b, w, h = spec.dimensions
    # Middle of the long arm's top face vs. a point on its outer top edge.
    plane_pt = np.array([0.0, -b / 2 + w / 2, h / 2])
    edge_pt = np.array([0.0, -b / 2, h / 2])
    d_plane = np.linalg.norm(p.points - plane_pt, axis=1).argmin()
    d_edge = np.linalg.norm(p.points - edge_pt, axis=1).argmin()
    assert np.abs(f[d_plane] - f[d_edge]).sum() > 0.1


def test_pair_features_symmetric_in_argument_order(rng):
    p, q = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    n = rng.normal(size=(50, 3))
    m = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    for a, b in zip(pair_features(p, n, q, m), pair_features(q, m, p, n)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_fpfh_preconditions(box):
    with pytest.raises(PreconditionError):
        compute_fpfh(box.without_normals(), 0.02)
    with pytest.raises(InsufficientPointsError):
        compute_fpfh(box.select(np.arange(4)), 0.02)


def test_fpfh_accepts_prebuilt_index(box):
    a = compute_fpfh(box, 0.02)
    b = compute_fpfh(box, 0.02, SpatialIndex(box))
    np.testing.assert_array_equal(a.descriptors, b.descriptors)


# --- matching ----------------------------------------------------------------


def test_identical_sets_match_identity(rng):
    f = FeatureSet(rng.uniform(size=(60, 33)), 1.0)
    np.testing.assert_array_equal(match_features(f, f, mutual=True), np.column_stack([np.arange(60)] * 2))


def test_subset_matches_its_copy(rng):
    dst = FeatureSet(rng.uniform(size=(80, 33)), 1.0)
    pick = rng.permutation(80)[:30]
    src = FeatureSet(dst.descriptors[pick], 1.0)
    m = match_features(src, dst, mutual=False)
    np.testing.assert_array_equal(m[:, 1], pick)


def test_matches_brute_force(rng):
    a = FeatureSet(rng.uniform(size=(100, 33)), 1.0)
    b = FeatureSet(rng.uniform(size=(100, 33)), 1.0)
    d = np.linalg.norm(a.descriptors[:, None] - b.descriptors[None], axis=2)
    fwd = d.argmin(axis=1)
    np.testing.assert_array_equal(match_features(a, b, mutual=False)[:, 1], fwd)
    back = d.argmin(axis=0)
    keep = back[fwd] == np.arange(100)
    np.testing.assert_array_equal(match_features(a, b, mutual=True), np.column_stack([np.arange(100), fwd])[keep])


def test_mutual_is_partial_injection(rng):
    a = FeatureSet(rng.integers(0, 3, size=(200, 33)).astype(float), 1.0)
    b = FeatureSet(rng.integers(0, 3, size=(150, 33)).astype(float), 1.0)
    m = match_features(a, b, mutual=True)
    assert len(set(m[:, 0])) == len(m) and len(set(m[:, 1])) == len(m)


def test_empty_sets_rejected():
    with pytest.raises(InsufficientPointsError):
        match_features(FeatureSet(np.zeros((0, 33)), 1.0), FeatureSet(np.zeros((3, 33)), 1.0))
