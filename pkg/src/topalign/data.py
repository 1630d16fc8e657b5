"""Synthetic assembly samples and their binary file formats.

Pipeline for one sample: sample a primitive's surface, fracture it with random planes,
normalize the assembled object, then scatter every part into its own frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationFailure, InvalidArgument
from .geometry import RigidTransform, as_points, nearest_sq_dist, random_rotation

SHAPE_KINDS = ("sphere", "cube", "cylinder")
CATEGORY_IDS = {kind: i for i, kind in enumerate(SHAPE_KINDS)}
MIN_PART_POINTS = 8

FEATURE_MAGIC = b"TORF"
SAMPLE_MAGIC = b"TORS"
FORMAT_VERSION = 1
UNLABELED = 255


@dataclass
class AssemblySample:
    parts: list  # K arrays (N_k, 3), unposed frames
    gt_transforms: list  # K RigidTransforms, unposed -> assembled
    anchor_index: int = 0
    scale: float = 1.0
    surface_area: float | None = None
    category: int | None = None
    mating: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.parts) < 2:
            raise InvalidArgument(f"an assembly needs at least 2 parts, got {len(self.parts)}")
        if len(self.parts) != len(self.gt_transforms):
            raise InvalidArgument("parts and gt_transforms differ in length")
        if not 0 <= self.anchor_index < len(self.parts):
            raise InvalidArgument(f"anchor index {self.anchor_index} out of range")
        if not self.scale > 0:
            raise InvalidArgument("scale must be positive")

    @property
    def num_parts(self):
        return len(self.parts)

    @property
    def part_sizes(self):
        return [len(p) for p in self.parts]

    @property
    def num_points(self):
        return sum(self.part_sizes)

    @property
    def part_labels(self):
        return np.concatenate([np.full(len(p), k, dtype=np.int64) for k, p in enumerate(self.parts)])

    def unposed(self):
        return np.concatenate(self.parts, axis=0)

    def assembled_parts(self):
        return [t.apply(p) for t, p in zip(self.gt_transforms, self.parts)]

    def assembled(self):
        return np.concatenate(self.assembled_parts(), axis=0)

    def part_slices(self):
        out, start = [], 0
        for n in self.part_sizes:
            out.append(slice(start, start + n))
            start += n
        return out


# --------------------------------------------------------------------------- generation

def generate_shape(kind, n_points, rng):
    """Uniform surface sample of a unit-scale primitive; returns (points, analytic area).

    sphere: radius 0.5. cube: side 1. cylinder: radius 0.5, height 1.
    """
    if kind not in SHAPE_KINDS:
        raise InvalidArgument(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n_points < 8:
        raise InvalidArgument("n_points must be at least 8")
    if kind == "sphere":
        v = rng.standard_normal((n_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return 0.5 * v, float(np.pi)
    if kind == "cube":
        face = rng.integers(0, 6, n_points)
        uv = rng.uniform(-0.5, 0.5, (n_points, 2))
        pts = np.empty((n_points, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        for a in range(3):
            m = axis == a
            others = [b for b in range(3) if b != a]
            pts[m, a] = sign[m]
            pts[m, others[0]] = uv[m, 0]
            pts[m, others[1]] = uv[m, 1]
        return pts, 6.0
    # cylinder: side area pi, each cap pi/4
    side_area, cap_area = np.pi, np.pi / 4
    total = side_area + 2 * cap_area
    region = rng.choice(3, size=n_points, p=[side_area / total, cap_area / total, cap_area / total])
    pts = np.empty((n_points, 3))
    theta = rng.uniform(0, 2 * np.pi, n_points)
    side = region == 0
    pts[side, 0] = 0.5 * np.cos(theta[side])
    pts[side, 1] = 0.5 * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-0.5, 0.5, side.sum())
    cap = ~side
    r = 0.5 * np.sqrt(rng.uniform(0, 1, cap.sum()))
    pts[cap, 0] = r * np.cos(theta[cap])
    pts[cap, 1] = r * np.sin(theta[cap])
    pts[cap, 2] = np.where(region[cap] == 1, 0.5, -0.5)
    return pts, float(total)


def fracture(cloud, k_parts, rng, max_retries=100):
    """Split ``cloud`` into ``k_parts`` label groups by random planes through fragment centroids.

    The largest fragment is split next. Every part keeps at least ``MIN_PART_POINTS`` points.
    """
    pts = as_points(cloud, "cloud")
    n = pts.shape[0]
    if not 2 <= k_parts <= n // MIN_PART_POINTS:
        raise InvalidArgument(f"k_parts={k_parts} outside [2, N/{MIN_PART_POINTS}] for N={n}")
    labels = np.zeros(n, dtype=np.int64)
    for new_label in range(1, k_parts):
        sizes = np.bincount(labels, minlength=new_label)
        target = int(np.argmax(sizes))
        members = np.flatnonzero(labels == target)
        centroid = pts[members].mean(axis=0)
        for _ in range(max_retries):
            normal = rng.standard_normal(3)
            side = (pts[members] - centroid) @ normal > 0
            if MIN_PART_POINTS <= side.sum() <= len(members) - MIN_PART_POINTS:
                labels[members[side]] = new_label
                break
        else:
            raise GenerationFailure(
                f"could not split fragment {target} ({len(members)} points) after {max_retries} planes")
    return labels


def mating_labels(points, part_labels, surface_area):
    """Point is mating iff some point of another part lies closer than sqrt(2A/N)."""
    pts = as_points(points)
    labels = np.asarray(part_labels)
    if labels.shape != (pts.shape[0],):
        raise InvalidArgument("part_labels must have one entry per point")
    parts = np.unique(labels)
    if len(parts) < 2:
        raise InvalidArgument("mating labels need at least two parts")
    if not surface_area > 0:
        raise InvalidArgument("surface_area must be positive")
    tau = mating_threshold(surface_area, pts.shape[0])
    out = np.zeros(pts.shape[0], dtype=bool)
    for p in parts:
        mine = labels == p
        d2 = nearest_sq_dist(pts[mine], pts[~mine])
        out[mine] = d2 < tau * tau
    return out


def mating_threshold(surface_area, n_points):
    return float(np.sqrt(2.0 * surface_area / n_points))


def assembled_sample(parts, scale=1.0, surface_area=None, category=None, anchor_index=0):
    """Sample whose unposed parts already sit in assembled pose (identity transforms)."""
    return AssemblySample(
        parts=[np.asarray(p, dtype=np.float64) for p in parts],
        gt_transforms=[RigidTransform.identity() for _ in parts],
        anchor_index=anchor_index, scale=scale, surface_area=surface_area, category=category)


def scatter_parts(sample, rng, mode="anchor_fixed"):
    """Move each part to its own centroid-centered, randomly rotated frame.

    ``gt_transforms`` map the scattered part back to its assembled placement. In
    ``anchor_fixed`` mode the anchor stays put with an identity transform.
    """
    if mode not in ("anchor_fixed", "anchor_free"):
        raise InvalidArgument(f"unknown scatter mode {mode!r}")
    parts, transforms = [], []
    for k, placed in enumerate(sample.assembled_parts()):
        if mode == "anchor_fixed" and k == sample.anchor_index:
            parts.append(placed.copy())
            transforms.append(RigidTransform.identity())
            continue
        centroid = placed.mean(axis=0)
        rot = random_rotation(rng).rotation
        # unposed = R^T (x - c), so x = R unposed + c
        parts.append((placed - centroid) @ rot)
        transforms.append(RigidTransform(rot, centroid))
    return replace(sample, parts=parts, gt_transforms=transforms)


def deform_parts(points, part_labels, rng, translation_scale=0.1):
    """Rotate each part about its centroid and shift it by a Gaussian offset."""
    pts = as_points(points)
    out = pts.copy()
    for p in np.unique(part_labels):
        m = part_labels == p
        c = pts[m].mean(axis=0)
        rot = random_rotation(rng).rotation
        out[m] = (pts[m] - c) @ rot.T + c + translation_scale * rng.standard_normal(3)
    return out


def bounding_extent(points):
    return float(np.max(points.max(axis=0) - points.min(axis=0)))


def normalize(sample, return_params=False):
    """Center the assembled object at the origin and scale it to unit max extent.

    The recorded ``scale`` multiplies normalized coordinates back to the previous units
    (composed with the prior scale). Parts with identity transforms are re-expressed in the
    normalized frame directly so that they keep the identity.
    """
    assembled = sample.assembled()
    center = assembled.mean(axis=0)
    extent = bounding_extent(assembled)
    if not extent > 1e-12:
        raise InvalidArgument("cannot normalize a zero-extent object")
    parts, transforms = [], []
    for part, tr in zip(sample.parts, sample.gt_transforms):
        if np.array_equal(tr.rotation, np.eye(3)) and not np.any(tr.translation):
            parts.append((part - center) / extent)
            transforms.append(tr)
        else:
            parts.append(part / extent)
            transforms.append(RigidTransform(tr.rotation, (tr.translation - center) / extent))
    area = None if sample.surface_area is None else sample.surface_area / extent ** 2
    out = replace(sample, parts=parts, gt_transforms=transforms,
                  scale=sample.scale * extent, surface_area=area)
    if return_params:
        return out, center, extent
    return out


def denormalize(sample, center, extent):
    parts, transforms = [], []
    for part, tr in zip(sample.parts, sample.gt_transforms):
        if np.array_equal(tr.rotation, np.eye(3)) and not np.any(tr.translation):
            parts.append(part * extent + center)
            transforms.append(tr)
        else:
            parts.append(part * extent)
            transforms.append(RigidTransform(tr.rotation, tr.translation * extent + center))
    area = None if sample.surface_area is None else sample.surface_area * extent ** 2
    return replace(sample, parts=parts, gt_transforms=transforms,
                   scale=sample.scale / extent, surface_area=area)


def _round_f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def make_sample(rng, kind="sphere", k_parts=2, points_per_part=128, mode="anchor_fixed",
                size_cm=20.0):
    """Full synthetic pipeline; output coordinates are float32-representable so files round-trip."""
    raw, area = generate_shape(kind, k_parts * points_per_part, rng)
    raw = raw * size_cm
    labels = fracture(raw, k_parts, rng)
    order = np.argsort(labels, kind="stable")
    parts = [raw[order][labels[order] == k] for k in range(k_parts)]
    base = assembled_sample(parts, scale=1.0, surface_area=area * size_cm ** 2,
                            category=CATEGORY_IDS[kind])
    base = normalize(base)
    scattered = scatter_parts(base, rng, mode)
    scattered.parts = [_round_f32(p) for p in scattered.parts]
    scattered.mating = mating_labels(scattered.assembled(), scattered.part_labels,
                                     scattered.surface_area)
    return scattered


def make_dataset(seed, count, kinds=("sphere", "cube"), k_range=(2, 3), points_per_part=128,
                 mode="anchor_fixed"):
    """``count`` samples; sample ``i`` depends only on (seed, i)."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        kind = kinds[int(rng.integers(len(kinds)))]
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        out.append(make_sample(rng, kind, k, points_per_part, mode))
    return out


# --------------------------------------------------------------------------- file I/O

def write_features(path, features):
    arr = np.ascontiguousarray(np.asarray(features, dtype=np.float32))
    if arr.ndim != 2:
        raise InvalidArgument(f"features must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FORMAT_VERSION, n, d))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_features(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise FormatError("bad magic, expected TORF", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    payload = n * d * 4
    if n * d > 2 ** 31 - 1:
        raise FormatError(f"dimension overflow N={n} D={d}", 8)
    if len(buf) - 16 < payload:
        raise FormatError(f"truncated payload: need {payload} bytes, have {len(buf) - 16}", len(buf))
    if len(buf) - 16 > payload:
        raise FormatError("trailing bytes after payload", 16 + payload)
    return np.frombuffer(buf, dtype="<f4", count=n * d, offset=16).reshape(n, d).astype(np.float32)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt, what):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, dtype, count, what):
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return out


def write_sample(path, sample):
    out = [SAMPLE_MAGIC, struct.pack("<II", FORMAT_VERSION, sample.num_parts)]
    out.append(struct.pack("<dd", sample.scale, sample.surface_area or 0.0))
    out.append(struct.pack("<Ii", sample.anchor_index,
                           -1 if sample.category is None else sample.category))
    for part, tr in zip(sample.parts, sample.gt_transforms):
        pts = np.ascontiguousarray(part, dtype="<f4")
        out.append(struct.pack("<I", pts.shape[0]))
        out.append(pts.tobytes())
        out.append(np.asarray(tr.as_array(), dtype="<f8").tobytes())
    if sample.mating is None:
        out.append(bytes([UNLABELED]) * sample.num_points)
    else:
        out.append(np.asarray(sample.mating, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(out))


def read_sample(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != SAMPLE_MAGIC:
        raise FormatError("bad magic, expected TORS", 0)
    r = _Reader(buf)
    r.pos = 4
    version, k = r.take("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if k < 2 or k > 1 << 16:
        raise FormatError(f"implausible part count {k}", 8)
    scale, area = r.take("<dd", "scale/area")
    anchor, category = r.take("<Ii", "anchor/category")
    parts, transforms = [], []
    for i in range(k):
        at = r.pos
        (nk,) = r.take("<I", f"part {i} size")
        if nk * 12 > len(buf) - r.pos:
            raise FormatError(f"truncated: part {i} declares {nk} points but only "
                              f"{len(buf) - r.pos} bytes remain", at)
        pts = r.array("<f4", nk * 3, f"part {i} points").reshape(nk, 3).astype(np.float64)
        at = r.pos
        tr = r.array("<f8", 12, f"part {i} transform")
        try:
            transforms.append(RigidTransform.from_array(tr))
        except InvalidArgument as exc:
            raise FormatError(f"part {i} transform is not rigid: {exc}", at) from None
        parts.append(pts)
    n = sum(len(p) for p in parts)
    labels = r.array(np.uint8, n, "mating labels")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after mating labels", r.pos)
    mating = None if np.all(labels == UNLABELED) else labels.astype(bool)
    try:
        return AssemblySample(parts, transforms, anchor_index=anchor, scale=scale,
                              surface_area=area if area > 0 else None,
                              category=None if category < 0 else category, mating=mating)
    except InvalidArgument as exc:
        raise FormatError(str(exc), 0) from None
