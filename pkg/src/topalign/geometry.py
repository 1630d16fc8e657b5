"""Rigid-geometry kernels: neighbor search, Chamfer distance, Kabsch, ICP, pose errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, InvalidArgument

_ROW_CHUNK = 1024


def as_points(points, name="points", allow_empty=False):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise InvalidArgument(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidArgument("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_array(self):
        """12 values: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # (M, k) int64
    distances: np.ndarray  # (M, k) float64, ascending


def _sq_dists(a, b):
    # explicit differences (not the |a|^2 - 2ab + |b|^2 expansion) so exact ties stay exact
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn(reference, queries, k):
    """Exact k nearest neighbors of every query among ``reference``; ties go to the lower index."""
    ref = as_points(reference, "reference")
    qry = as_points(queries, "queries", allow_empty=True)
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidArgument(f"k must be a positive integer, got {k!r}")
    if k > ref.shape[0]:
        raise InvalidArgument(f"k={k} exceeds reference size {ref.shape[0]}")
    idx = np.empty((qry.shape[0], k), dtype=np.int64)
    dist = np.empty((qry.shape[0], k))
    for start in range(0, qry.shape[0], _ROW_CHUNK):
        d2 = _sq_dists(qry[start:start + _ROW_CHUNK], ref)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[start:start + _ROW_CHUNK] = order
        dist[start:start + _ROW_CHUNK] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(idx, dist)


def nearest_sq_dist(a, b):
    """For each point of ``a``, squared distance to its nearest point of ``b``."""
    out = np.empty(a.shape[0])
    for start in range(0, a.shape[0], _ROW_CHUNK):
        out[start:start + _ROW_CHUNK] = _sq_dists(a[start:start + _ROW_CHUNK], b).min(axis=1)
    return out


def chamfer_distance(a, b, squared=True):
    """Symmetric Chamfer distance: sum of the two directional mean nearest-neighbor distances.

    With ``squared=True`` (default) the per-point distances are squared before averaging.
    """
    a = as_points(a, "a")
    b = as_points(b, "b")
    da = nearest_sq_dist(a, b)
    db = nearest_sq_dist(b, a)
    if not squared:
        da, db = np.sqrt(da), np.sqrt(db)
    return float(da.mean() + db.mean())


def kabsch(source, target):
    """Least-squares rigid transform mapping ``source`` onto corresponded ``target`` rows."""
    src = as_points(source, "source")
    tgt = as_points(target, "target")
    if src.shape != tgt.shape:
        raise InvalidArgument(f"source {src.shape} and target {tgt.shape} differ in shape")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"kabsch needs at least 3 points, got {n}", rank=0)
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    cov = (src - mu_s).T @ (tgt - mu_t)
    u, s, vt = np.linalg.svd(cov)
    scale = max(s[0], np.finfo(float).tiny)
    rank = int(np.sum(s > 1e-12 * scale)) if s[0] > 1e-300 else 0
    if rank < 2:
        raise DegenerateConfiguration(
            f"cross-covariance has rank {rank}; rotation is not unique", rank=rank)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_t - r @ mu_s)


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    mse_history: list


def icp(source, target, max_iters=50, tol=1e-6, return_history=False):
    """Point-to-point ICP with source-to-target nearest-neighbor correspondences.

    Returns the cumulative transform moving ``source`` onto ``target``. A step that would
    raise the correspondence MSE is rejected and terminates the loop.
    """
    src = as_points(source, "source")
    tgt = as_points(target, "target")
    total = RigidTransform.identity()
    current = src
    mse = float(nearest_sq_dist(current, tgt).mean())
    history = [mse]
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        nn = knn(tgt, current, 1).indices[:, 0]
        step = kabsch(current, tgt[nn])
        moved = step.apply(current)
        new_mse = float(nearest_sq_dist(moved, tgt).mean())
        if new_mse > mse:
            break
        total = step.compose(total)
        current = moved
        improvement = mse - new_mse
        mse = new_mse
        history.append(mse)
        if improvement < tol:
            break
    if return_history:
        return IcpResult(total, iterations, history)
    return total


def geodesic_angle_deg(r):
    """Rotation angle of ``r`` in degrees, via the clamped trace formula."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidArgument("expected a finite 3x3 matrix")
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
        raise InvalidArgument("matrix is not orthonormal")
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def translation_rmse(t, scale):
    if not scale > 0:
        raise InvalidArgument(f"scale must be positive, got {scale}")
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return float(np.sqrt(np.sum(t * t) / 3.0) * scale)


def quaternion_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: np.random.Generator) -> RigidTransform:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    r = quaternion_to_matrix(q)
    # re-orthonormalize to keep the 1e-9 invariant tight
    u, _, vt = np.linalg.svd(r)
    return RigidTransform(u @ vt, np.zeros(3))


def axis_angle(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    th = np.radians(degrees)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)
