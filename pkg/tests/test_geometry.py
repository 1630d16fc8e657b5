import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topalign.errors import DegenerateConfiguration, InvalidArgument
from topalign.geometry import (RigidTransform, axis_angle, chamfer_distance, geodesic_angle_deg,
                               icp, kabsch, knn, random_rotation, translation_rmse)

from oracles import chamfer_loop, knn_loop

seeds = st.integers(0, 2 ** 31 - 1)


def ring(n=96, radius=1.0, bumps=12):
    """Planar ring with a 12-fold radial ripple plus a thin second layer (non-degenerate)."""
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = radius * (1 + 0.15 * np.cos(bumps * th))
    top = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(n)], axis=1)
    bottom = top * 0.8 + np.array([0, 0, 0.3])
    return np.concatenate([top, bottom])


# -------------------------------------------------------------------- knn

def test_knn_line_examples():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    nb = knn(line, line, 2)
    assert list(nb.indices[0]) == [0, 1]
    assert list(nb.distances[0]) == [0.0, 1.0]
    nb = knn(line, np.array([[0.4, 0, 0]]), 1)
    assert nb.indices[0, 0] == 0
    assert nb.distances[0, 0] == pytest.approx(0.4, abs=1e-15)


def test_knn_ties_go_to_lower_index():
    ref = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0]])
    nb = knn(ref, np.zeros((1, 3)), 3)
    assert list(nb.indices[0]) == [0, 1, 2]


def test_knn_rejects_k_above_n():
    with pytest.raises(InvalidArgument):
        knn(np.zeros((3, 3)), np.zeros((1, 3)), 4)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(6, 60), st.integers(1, 6))
def test_knn_matches_exhaustive_scan(seed, n, k):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((n, 3))
    q = rng.standard_normal((15, 3))
    nb = knn(ref, q, k)
    assert np.array_equal(nb.indices, knn_loop(ref, q, k))
    assert np.all(np.diff(nb.distances, axis=1) >= 0)


# -------------------------------------------------------------------- chamfer

def test_chamfer_singletons_hand_value():
    assert chamfer_distance([[0, 0, 0]], [[0.1, 0, 0]]) == pytest.approx(0.02, abs=1e-15)


def test_chamfer_identity_and_unsquared():
    a = np.random.default_rng(0).standard_normal((20, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[0.1, 0, 0]], squared=False) == pytest.approx(0.2)


def test_chamfer_rejects_empty():
    with pytest.raises(InvalidArgument):
        chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_chamfer_matches_double_loop_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((20, 3)), rng.standard_normal((17, 3))
    cd = chamfer_distance(a, b)
    assert cd == pytest.approx(chamfer_loop(a, b), abs=1e-12)
    assert cd == chamfer_distance(b, a)
    assert cd > 0


# -------------------------------------------------------------------- kabsch

def test_kabsch_identity():
    a = np.random.default_rng(1).standard_normal((10, 3))
    t = kabsch(a, a)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_kabsch_recovers_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((30, 3))
    true = RigidTransform(random_rotation(rng).rotation, rng.standard_normal(3))
    got = kabsch(src, true.apply(src))
    assert np.linalg.norm(got.rotation - true.rotation) < 1e-9
    assert np.linalg.norm(got.translation - true.translation) < 1e-9
    assert np.linalg.det(got.rotation) == pytest.approx(1.0, abs=1e-12)


def test_kabsch_excludes_reflection_on_planar_mirror():
    rng = np.random.default_rng(3)
    src = np.column_stack([rng.standard_normal((40, 2)), 0.01 * rng.standard_normal(40)])
    tgt = src * np.array([1.0, 1.0, -1.0])  # mirror image: best orthogonal map is a reflection
    got = kabsch(src, tgt)
    assert np.linalg.det(got.rotation) == pytest.approx(1.0, abs=1e-12)
    # unconstrained orthogonal Procrustes (reflection allowed)
    cs, ct = src - src.mean(0), tgt - tgt.mean(0)
    u, _, vt = np.linalg.svd(cs.T @ ct)
    q = vt.T @ u.T
    assert np.linalg.det(q) < 0
    refl = np.sum((cs @ q.T - ct) ** 2)
    resid = np.sum((got.apply(src) - tgt) ** 2)
    assert resid >= refl - 1e-12


def test_kabsch_degenerate_inputs_report_rank():
    with pytest.raises(DegenerateConfiguration):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateConfiguration) as exc:
        kabsch(line, line)
    assert exc.value.rank == 1
    with pytest.raises(DegenerateConfiguration) as exc:
        kabsch(np.ones((5, 3)), np.ones((5, 3)))
    assert exc.value.rank == 0


# -------------------------------------------------------------------- icp

def test_icp_identity_converges_immediately():
    a = np.random.default_rng(2).standard_normal((50, 3))
    res = icp(a, a, return_history=True)
    assert res.iterations == 1
    assert np.allclose(res.transform.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(res.transform.translation, 0, atol=1e-9)


def test_icp_recovers_small_perturbation():
    rng = np.random.default_rng(4)
    src = rng.uniform(-1, 1, (300, 3))
    r = axis_angle([0.3, 1.0, 0.2], 3.0)
    tgt = src @ r.T + np.array([0.01, 0, 0])
    res = icp(src, tgt, return_history=True)
    assert res.mse_history[-1] < res.mse_history[0]
    assert all(b <= a for a, b in zip(res.mse_history, res.mse_history[1:]))
    assert geodesic_angle_deg(res.transform.rotation @ r.T) < 0.5


def test_icp_symmetric_ring_residual_is_near_zero():
    src = ring()
    step = axis_angle([0, 0, 1], 30.0)
    res = icp(src, src @ step.T)
    assert geodesic_angle_deg(res.rotation) < 0.5
    assert geodesic_angle_deg(step) == pytest.approx(30.0)


# -------------------------------------------------------------------- angles, rmse, rotations

def test_geodesic_angle_examples():
    assert geodesic_angle_deg(np.eye(3)) == 0.0
    assert geodesic_angle_deg(axis_angle([0, 0, 1], 90)) == pytest.approx(90.0, abs=1e-12)
    assert geodesic_angle_deg(np.eye(3) * (1 + 4e-13)) == 0.0
    with pytest.raises(InvalidArgument):
        geodesic_angle_deg(np.eye(3) * 2)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_geodesic_angle_range_and_transpose(seed):
    r = random_rotation(np.random.default_rng(seed)).rotation
    a = geodesic_angle_deg(r)
    assert 0 <= a <= 180
    assert a == pytest.approx(geodesic_angle_deg(r.T), abs=1e-9)


def test_translation_rmse_examples():
    assert translation_rmse([0, 0, 0], 3.0) == 0.0
    assert translation_rmse([1, 1, 1], 1.0) == pytest.approx(1.0)
    assert translation_rmse([0.03, 0, 0.04], 100) == pytest.approx(math.sqrt(0.0025 / 3) * 100)
    assert translation_rmse([0.03, 0, 0.04], 100) == pytest.approx(2.8868, abs=1e-4)
    with pytest.raises(InvalidArgument):
        translation_rmse([1, 0, 0], 0.0)


def test_random_rotation_deterministic_and_valid():
    a = random_rotation(np.random.default_rng(7)).rotation
    b = random_rotation(np.random.default_rng(7)).rotation
    assert np.array_equal(a, b)
    rng = np.random.default_rng(8)
    traces = []
    for _ in range(10_000):
        t = random_rotation(rng)
        assert np.array_equal(t.translation, np.zeros(3))
        traces.append(np.trace(t.rotation))
    # Haar measure: E[trace] = 0
    assert abs(np.mean(traces)) < 0.05
    r = t.rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


def test_rigid_transform_roundtrip_and_validation():
    rng = np.random.default_rng(9)
    t = RigidTransform(random_rotation(rng).rotation, rng.standard_normal(3))
    p = rng.standard_normal((5, 3))
    assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)
    assert np.allclose(t.compose(t.inverse()).rotation, np.eye(3), atol=1e-12)
    assert np.array_equal(RigidTransform.from_array(t.as_array()).as_array(), t.as_array())
    with pytest.raises(InvalidArgument):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
