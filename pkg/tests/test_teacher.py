import numpy as np
import pytest

from topalign.data import make_sample, mating_labels, write_features
from topalign.errors import DegenerateFeature, InvalidArgument
from topalign.geometry import random_rotation
from oracles import knn_loop
from topalign.teacher import (TeacherConfig, geometric_descriptors, geometric_teacher,
                              idw_propagate, load_teacher_features, normalize_rows)


@pytest.fixture(scope="module")
def sample():
    return make_sample(np.random.default_rng(21), "cube", 3)


def test_rows_unit_norm_and_width(sample):
    y = geometric_teacher(sample)
    assert y.shape == (sample.num_points, TeacherConfig().output_dim)
    assert y.shape[1] == 16
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)


def test_contact_channel_peaks_exactly_on_mating_points(sample):
    groups = geometric_descriptors(sample.assembled(), sample.part_labels, sample.surface_area)
    first_scale = groups["contact"][:, 0]  # exp(-d_other / tau)
    positives = mating_labels(sample.assembled(), sample.part_labels, sample.surface_area)
    assert np.array_equal(first_scale > np.exp(-1.0), positives.astype(bool))
    assert first_scale[positives == 1].min() > first_scale[positives == 0].max()


def test_planar_patch_eigenvalues():
    # evenly sampled square patch with a small in-plane jitter
    rng = np.random.default_rng(0)
    g = np.stack(np.meshgrid(np.arange(20.0), np.arange(20.0), indexing="ij"), -1).reshape(-1, 2)
    g += rng.uniform(-0.05, 0.05, g.shape)
    plane = np.column_stack([g, np.zeros(400)])
    labels = np.repeat([0, 1], 200)  # rows 0-9 and 10-19
    # 13 neighbours = self plus the full rings at 1, sqrt(2) and 2: an isotropic stencil
    cfg = TeacherConfig(contact=False, k_desc=13, eigen_scales=(1,))
    ev = geometric_descriptors(plane, labels, config=cfg)["eigen"]
    row, col = np.round(g[:, 0]) % 10, np.round(g[:, 1])
    interior = (row >= 2) & (row <= 7) & (col >= 2) & (col <= 17)
    assert np.abs(ev[interior] - [0.5, 0.5, 0.0]).max() < 0.05
    assert np.all(ev[:, 2] < 1e-12)
    # every point, edges included, against a per-point covariance built from a loop scan
    for i in rng.choice(400, 25, replace=False):
        same = np.flatnonzero(labels == labels[i])
        nb = same[knn_loop(plane[same], plane[[i]], 13)[0]]
        patch = plane[nb] - plane[nb].mean(axis=0)
        lam = np.sort(np.linalg.eigvalsh(patch.T @ patch / 13))[::-1]
        assert np.allclose(ev[i], lam / lam.sum(), atol=1e-10)


def test_normals_point_away_from_part_centroid(sample):
    pts = sample.assembled()
    groups = geometric_descriptors(pts, sample.part_labels, sample.surface_area)
    for k in range(sample.num_parts):
        m = sample.part_labels == k
        rel = pts[m] - pts[m].mean(axis=0)
        assert np.all(np.einsum("ij,ij->i", groups["normal"][m], rel) >= 0)


def test_rigid_motion_invariance_channelwise(sample):
    rng = np.random.default_rng(1)
    r = random_rotation(rng).rotation
    pts = sample.assembled()
    moved = pts @ r.T + rng.standard_normal(3)
    a = geometric_descriptors(pts, sample.part_labels, sample.surface_area)
    b = geometric_descriptors(moved, sample.part_labels, sample.surface_area)
    for name in ("eigen", "contact", "radial"):
        assert np.allclose(a[name], b[name], atol=1e-7), name
    assert np.allclose(a["normal"] @ r.T, b["normal"], atol=1e-6)


def test_missing_area_rejected(sample):
    with pytest.raises(InvalidArgument):
        geometric_descriptors(sample.assembled(), sample.part_labels, None)


def test_teacher_is_deterministic(sample):
    assert np.array_equal(geometric_teacher(sample), geometric_teacher(sample))


# -------------------------------------------------------------------- IDW

def test_idw_coincident_point_copies_exactly():
    rng = np.random.default_rng(2)
    coarse = rng.standard_normal((10, 3))
    feats = rng.standard_normal((10, 4))
    out = idw_propagate(coarse, feats, coarse[[3, 7]])
    assert np.array_equal(out, feats[[3, 7]])


def test_idw_constant_and_equidistant():
    coarse = np.eye(3)
    out = idw_propagate(coarse, np.full((3, 2), 4.5), np.array([[0.2, 0.3, 0.1]]))
    assert np.allclose(out, 4.5, atol=1e-15)
    feats = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
    out = idw_propagate(coarse, feats, np.zeros((1, 3)))
    assert np.allclose(out[0], feats.mean(axis=0), atol=1e-14)


def test_idw_stays_in_convex_hull():
    rng = np.random.default_rng(3)
    coarse = rng.standard_normal((20, 3))
    feats = rng.standard_normal((20, 5))
    dense = rng.standard_normal((50, 3))
    out = idw_propagate(coarse, feats, dense, k=3)
    from topalign.geometry import knn
    nb = knn(coarse, dense, 3).indices
    sel = feats[nb]
    assert np.all(out >= sel.min(axis=1) - 1e-12)
    assert np.all(out <= sel.max(axis=1) + 1e-12)


def test_idw_errors():
    with pytest.raises(InvalidArgument):
        idw_propagate(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((1, 3)))
    with pytest.raises(InvalidArgument):
        idw_propagate(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((1, 3)), k=3)


# -------------------------------------------------------------------- external features

def test_load_round_trip_and_mismatch(tmp_path, sample):
    y = geometric_teacher(sample)
    path = tmp_path / "t.torf"
    write_features(path, y)
    loaded = load_teacher_features(path, sample.num_points)
    assert np.allclose(loaded, y, atol=1e-6)
    assert np.allclose(np.linalg.norm(loaded, axis=1), 1.0, atol=1e-12)
    with pytest.raises(InvalidArgument, match=f"N={sample.num_points}.*N=5"):
        load_teacher_features(path, 5)


def test_zero_rows_rejected(tmp_path):
    path = tmp_path / "z.torf"
    write_features(path, np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(DegenerateFeature) as exc:
        load_teacher_features(path, 2)
    assert exc.value.row == 1
    with pytest.raises(DegenerateFeature):
        normalize_rows(np.zeros((1, 3)))
