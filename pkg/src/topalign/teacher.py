"""Frozen per-point teacher features.

The procedural teacher describes the clean assembled geometry of a sample: local shape
(PCA eigenvalues), surface orientation, proximity to other parts and radial position.
External encoder features can be loaded from TORF files instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AssemblySample, mating_threshold, read_features
from .errors import DegenerateFeature, InvalidArgument
from .geometry import as_points, knn, nearest_sq_dist

IDW_EPS = 1e-8
COINCIDENT = 1e-9


@dataclass(frozen=True)
class TeacherConfig:
    eigen: bool = True
    normal: bool = True
    contact: bool = True
    radial: bool = True
    k_desc: int = 12
    eigen_scales: tuple = (1, 2)  # neighborhood sizes as multiples of k_desc
    contact_scales: tuple = (1.0, 2.0, 4.0, 8.0)  # bandwidths as multiples of the mating threshold

    @property
    def output_dim(self):
        return (3 * len(self.eigen_scales) * self.eigen + 3 * self.normal
                + len(self.contact_scales) * self.contact + 3 * self.radial)

    def channel_slices(self):
        """Column ranges of each descriptor group in the concatenated output."""
        out, start = {}, 0
        for name, width in (("eigen", 3 * len(self.eigen_scales) * self.eigen),
                            ("normal", 3 * self.normal),
                            ("contact", len(self.contact_scales) * self.contact),
                            ("radial", 3 * self.radial)):
            if width:
                out[name] = slice(start, start + width)
                start += width
        return out


def normalize_rows(features, what="features"):
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise DegenerateFeature(f"{what} row {zero[0]} is all zeros", row=int(zero[0]))
    return f / norms


def _local_pca(points, k):
    """Sorted-descending, sum-normalized covariance eigenvalues and smallest eigenvector."""
    k = min(k, points.shape[0])
    nb = knn(points, points, k).indices
    patches = points[nb]  # (N, k, 3)
    centered = patches - patches.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = np.clip(evals[:, ::-1], 0.0, None)
    total = evals.sum(axis=1, keepdims=True)
    total[total == 0] = 1.0
    return evals / total, evecs[:, :, 0]


def geometric_descriptors(points, part_labels, surface_area=None, config=TeacherConfig()):
    """Raw (un-normalized) descriptor groups keyed by name, computed per part."""
    pts = as_points(points)
    labels = np.asarray(part_labels)
    if config.contact and surface_area is None:
        raise InvalidArgument("contact descriptors need the object's surface_area")
    n = pts.shape[0]
    out = {}
    eig = np.zeros((n, 3 * len(config.eigen_scales)))
    normal = np.zeros((n, 3))
    radial = np.zeros((n, 3))
    center = pts.mean(axis=0)
    obj_r = np.linalg.norm(pts - center, axis=1)
    obj_r_max = max(obj_r.max(), 1e-12)
    for p in np.unique(labels):
        m = np.flatnonzero(labels == p)
        sub = pts[m]
        c = sub.mean(axis=0)
        for j, s in enumerate(config.eigen_scales):
            ev, vec = _local_pca(sub, int(s * config.k_desc))
            eig[m, 3 * j:3 * j + 3] = ev
            if j == 0:
                outward = np.einsum("ni,ni->n", vec, sub - c)
                vec = np.where((outward < 0)[:, None], -vec, vec)
                normal[m] = vec
        rel = sub - c
        r = np.linalg.norm(rel, axis=1)
        radial[m, 0] = r / max(r.max(), 1e-12)
        radial[m, 1] = obj_r[m] / obj_r_max
        with np.errstate(invalid="ignore", divide="ignore"):
            cosang = np.einsum("ni,ni->n", normal[m], rel) / r
        radial[m, 2] = np.nan_to_num(cosang)
    if config.eigen:
        out["eigen"] = eig
    if config.normal:
        out["normal"] = normal
    if config.contact:
        tau = mating_threshold(surface_area, n)
        d_other = np.zeros(n)
        for p in np.unique(labels):
            mine = labels == p
            if mine.all():
                raise InvalidArgument("contact descriptors need at least two parts")
            d_other[mine] = np.sqrt(nearest_sq_dist(pts[mine], pts[~mine]))
        out["contact"] = np.stack([np.exp(-d_other / (s * tau)) for s in config.contact_scales], axis=1)
    if config.radial:
        out["radial"] = radial
    return out


def geometric_teacher(sample: AssemblySample, config=TeacherConfig()):
    """Row-normalized (N, D_f) descriptors of the clean assembled geometry of ``sample``."""
    if sample.num_parts < 2:
        raise InvalidArgument("teacher needs at least two parts")
    groups = geometric_descriptors(sample.assembled(), sample.part_labels,
                                   sample.surface_area, config)
    feats = np.concatenate([groups[name] for name in config.channel_slices()], axis=1)
    return normalize_rows(feats, "teacher")


def idw_propagate(coarse_points, coarse_feats, dense_points, k=3):
    """Inverse-distance-weighted interpolation of coarse features onto dense points."""
    coarse = as_points(coarse_points, "coarse_points", allow_empty=True)
    if coarse.shape[0] == 0:
        raise InvalidArgument("coarse point set is empty")
    feats = np.asarray(coarse_feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != coarse.shape[0]:
        raise InvalidArgument("coarse_feats must have one row per coarse point")
    if k > coarse.shape[0]:
        raise InvalidArgument(f"k={k} exceeds the {coarse.shape[0]} coarse points")
    dense = as_points(dense_points, "dense_points", allow_empty=True)
    nb = knn(coarse, dense, k)
    w = 1.0 / (nb.distances + IDW_EPS)
    out = np.einsum("nk,nkd->nd", w, feats[nb.indices]) / w.sum(axis=1, keepdims=True)
    hit = nb.distances[:, 0] <= COINCIDENT
    out[hit] = feats[nb.indices[hit, 0]]
    return out


def load_teacher_features(path, expected_n):
    feats = read_features(path)
    if feats.shape[0] != expected_n:
        raise InvalidArgument(
            f"teacher file {path} has N={feats.shape[0]} rows, expected N={expected_n}")
    return normalize_rows(feats, f"teacher file {path}")
