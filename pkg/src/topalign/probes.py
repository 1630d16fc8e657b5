"""Frozen-feature probes: spatial structure metrics, linear probes and layer sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import deform_parts
from .errors import DegenerateConfiguration, DegenerateFeature, InvalidArgument, UndefinedMetric
from .flow import NetConfig, TokenBatch, forward, interpolate
from .geometry import as_points

log = logging.getLogger(__name__)

SPATIAL_METRICS = ("boundary_contrast", "lds", "part_silhouette", "pose_discrimination")


def unit_rows(features, what="features"):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise InvalidArgument(f"{what} must be a 2-d array")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] == 0)
    if bad.size:
        raise DegenerateFeature(f"{what} row {bad[0]} has zero norm", row=int(bad[0]))
    return f / norms


def _pair_dists(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def spatial_neighbors(coords, k):
    """k nearest other points of every point (self excluded, ties to the lower index)."""
    n = coords.shape[0]
    if k >= n:
        raise InvalidArgument(f"k={k} needs more than {n} points")
    d = _pair_dists(coords)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def lds(features, coords, k=6, far_percentile=75.0):
    """Local-vs-distant similarity: kNN cosine similarity minus far-pair cosine similarity."""
    coords = as_points(coords, "coords")
    f = unit_rows(features)
    if f.shape[0] != coords.shape[0]:
        raise InvalidArgument("features and coords disagree on N")
    n = coords.shape[0]
    nb = spatial_neighbors(coords, k)
    sims = f @ f.T
    local = np.mean(np.take_along_axis(sims, nb, axis=1))
    d = _pair_dists(coords)
    iu = np.triu_indices(n, 1)
    d_far = np.percentile(d[iu], far_percentile)
    far = d >= d_far
    np.fill_diagonal(far, False)
    if d_far == 0 or not far.any():
        raise DegenerateConfiguration("no distant pairs; all points coincide", rank=0)
    return float(local - sims[far].mean())


def part_silhouette(features, part_labels):
    """Mean silhouette under cosine distance with ground-truth parts as clusters."""
    f = unit_rows(features)
    labels = np.asarray(part_labels)
    if labels.shape != (f.shape[0],):
        raise InvalidArgument("one part label per feature row required")
    parts, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(parts) < 2:
        raise InvalidArgument("silhouette needs at least two parts")
    dist = 1.0 - f @ f.T
    onehot = np.zeros((f.shape[0], len(parts)))
    onehot[np.arange(f.shape[0]), inverse] = 1.0
    sums = dist @ onehot  # (N, P): sum of distances to each part
    own = counts[inverse]
    if np.any(counts == 1):
        log.info("single-point part present; its points contribute a silhouette of 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (sums[np.arange(len(f)), inverse] - np.diag(dist)) / (own - 1)
        means = sums / counts[None, :]
    means[np.arange(len(f)), inverse] = np.inf
    b = means.min(axis=1)
    top = np.maximum(a, b)
    s = np.zeros(len(f))
    ok = (own > 1) & (top > 0)
    s[ok] = (b[ok] - a[ok]) / top[ok]
    return float(s.mean())


def boundary_contrast(features, coords, part_labels, k=6):
    """Mean same-part kNN-pair similarity minus mean cross-part kNN-pair similarity."""
    coords = as_points(coords, "coords")
    f = unit_rows(features)
    labels = np.asarray(part_labels)
    if f.shape[0] != coords.shape[0] or labels.shape != (f.shape[0],):
        raise InvalidArgument("features, coords and part_labels disagree on N")
    nb = spatial_neighbors(coords, k)
    sims = np.take_along_axis(f @ f.T, nb, axis=1)
    same = labels[nb] == labels[:, None]
    if not (~same).any():
        raise UndefinedMetric("no boundary pairs among the k-neighborhoods")
    if not same.any():
        raise UndefinedMetric("no interior pairs among the k-neighborhoods")
    return float(sims[same].mean() - sims[~same].mean())


def pose_discrimination(features_assembled, features_deformed):
    """1 - mean row-wise cosine similarity between two row-aligned feature sets."""
    a = unit_rows(features_assembled, "assembled features")
    b = unit_rows(features_deformed, "deformed features")
    if a.shape != b.shape:
        raise InvalidArgument(f"feature shapes differ: {a.shape} vs {b.shape}")
    return float(1.0 - np.mean(np.sum(a * b, axis=1)))


def pearson_correlation(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("xs and ys must be equal-length 1-d sequences")
    if len(x) < 3:
        raise InvalidArgument("need at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(np.sum(dx * dx)), math.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise UndefinedMetric("zero variance")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def similarity_to_point(features, index):
    """Cosine similarity of every point to point ``index`` (for external plotting)."""
    f = unit_rows(features)
    return f @ f[index]


def write_similarity_csv(path, coords, part_labels, sims):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "part", "similarity"])
        for (x, y, z), p, s in zip(coords, part_labels, sims):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), int(p), repr(float(s))])


# --------------------------------------------------------------------------- linear probes

PROBE_TASKS = ("classification", "mating")


def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def _fit_linear(x, y, n_out, loss, epochs, lr, batch_size, seed):
    """Affine head trained with the training loop's AdamW; returns (weights, bias)."""
    from .train import AdamState, adamw_step

    rng = np.random.default_rng(seed)
    params = {"w": np.zeros((x.shape[1], n_out)), "b": np.zeros(n_out)}
    state = AdamState.zeros_like(params)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], y[idx]
            logits = xb @ params["w"] + params["b"]
            if loss == "softmax":
                z = logits - logits.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                p[np.arange(len(idx)), yb] -= 1.0
                g = p / len(idx)
            else:
                g = (1.0 / (1.0 + np.exp(-logits[:, 0])) - yb)[:, None] / len(idx)
            grads = {"w": xb.T @ g, "b": g.sum(axis=0)}
            params, state = adamw_step(params, grads, state, lr)
    return params["w"], params["b"]


def linear_probe(train_features, train_labels, test_features, test_labels, task,
                 epochs=10, lr=1e-3, batch_size=8, seed=0):
    """Top-1 accuracy (classification) or positive-class F1 (mating) of a linear head.

    Classification takes one feature vector per object (global-mean-pool per-point
    features first, see ``pool_objects``); mating takes one row per point with 0/1 labels.
    Features are standardized with training-split statistics.
    """
    if task not in PROBE_TASKS:
        raise InvalidArgument(f"task must be one of {PROBE_TASKS}")
    xtr = np.asarray(train_features, dtype=np.float64)
    xte = np.asarray(test_features, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if xtr.ndim != 2 or xtr.shape[0] != ytr.shape[0] or xte.shape[0] != yte.shape[0]:
        raise InvalidArgument("one label per feature row required")
    if len(np.unique(ytr)) < 2:
        raise InvalidArgument("training labels cover a single class")
    xtr, xte = _standardize(xtr, xte)
    if task == "classification":
        n_cls = int(max(ytr.max(), yte.max())) + 1
        w, b = _fit_linear(xtr, ytr, n_cls, "softmax", epochs, lr, batch_size, seed)
        pred = np.argmax(xte @ w + b, axis=1)
        return float(np.mean(pred == yte))
    if not set(np.unique(ytr)) <= {0, 1}:
        raise InvalidArgument("mating labels must be 0/1")
    w, b = _fit_linear(xtr, ytr.astype(np.float64), 1, "logistic", epochs, lr, batch_size, seed)
    pred = (xte @ w + b)[:, 0] > 0
    return f1_score(pred, yte == 1)


def f1_score(predicted, actual):
    pred = np.asarray(predicted, dtype=bool)
    act = np.asarray(actual, dtype=bool)
    tp = np.sum(pred & act)
    denom = 2 * tp + np.sum(pred & ~act) + np.sum(~pred & act)
    return float(2 * tp / denom) if denom else 0.0


def pool_objects(per_point_features):
    """Global mean pooling: one row per object."""
    return np.stack([np.asarray(f, dtype=np.float64).mean(axis=0) for f in per_point_features])


def mating_rows(samples, features):
    """Stack per-point features and mating labels, dropping unlabeled points."""
    xs, ys = [], []
    for s, f in zip(samples, features):
        if s.mating is None:
            raise InvalidArgument("sample has no mating labels")
        keep = s.mating != 255
        xs.append(np.asarray(f)[keep])
        ys.append(s.mating[keep])
    return np.concatenate(xs), np.concatenate(ys).astype(np.int64)


# --------------------------------------------------------------------------- reports

@dataclass
class ProbeReport:
    lds: float | None = None
    part_silhouette: float | None = None
    boundary_contrast: float | None = None
    pose_discrimination: float | None = None
    cls_acc: float | None = None
    mating_f1: float | None = None
    per_layer: dict = field(default_factory=dict)

    def to_dict(self):
        return {"lds": self.lds, "part_silhouette": self.part_silhouette,
                "boundary_contrast": self.boundary_contrast,
                "pose_discrimination": self.pose_discrimination, "cls_acc": self.cls_acc,
                "mating_f1": self.mating_f1, "per_layer": self.per_layer}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def spatial_metrics(features, coords, part_labels, deformed_features=None, k=6):
    """The four spatial metrics of one sample; boundary contrast is None when undefined."""
    out = {"lds": lds(features, coords, k), "part_silhouette": part_silhouette(features, part_labels)}
    try:
        out["boundary_contrast"] = boundary_contrast(features, coords, part_labels, k)
    except UndefinedMetric:
        out["boundary_contrast"] = None
    out["pose_discrimination"] = (None if deformed_features is None
                                  else pose_discrimination(features, deformed_features))
    return out


def feature_report(samples, features, deformed=None, k=6):
    """Dataset-averaged spatial metrics of per-sample features on assembled coordinates."""
    rows = []
    for i, (s, f) in enumerate(zip(samples, features)):
        rows.append(spatial_metrics(f, s.assembled(), s.part_labels,
                                    None if deformed is None else deformed[i], k))
    return ProbeReport(**{m: _mean_or_none([r[m] for r in rows]) for m in SPATIAL_METRICS})


def _configuration_hidden(params, cfg: NetConfig, sample_, points_by_part, noise, t):
    """Block outputs for a configuration used both as conditioning and as the interpolant."""
    cond = np.concatenate(points_by_part, axis=0)
    batch = TokenBatch(cond, sample_.part_labels, np.zeros(len(cond), dtype=np.int64), 1)
    x_t = interpolate(cond, noise, t)
    return forward(params, cfg, batch, x_t, t).hidden


def layer_hidden(params, cfg: NetConfig, samples, t=0.5, seed=0):
    """Per-sample hidden states of the assembled and per-part deformed configurations."""
    assembled, deformed = [], []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, i, 2])
        noise = rng.standard_normal((s.num_points, 3))
        parts = s.assembled_parts()
        moved = deform_parts(np.concatenate(parts), s.part_labels, rng)
        moved_parts = [moved[sl] for sl in s.part_slices()]
        assembled.append(_configuration_hidden(params, cfg, s, parts, noise, t))
        deformed.append(_configuration_hidden(params, cfg, s, moved_parts, noise, t))
    return assembled, deformed


def layer_sweep(params, cfg: NetConfig, samples, t=0.5, seed=0, k=6):
    """Spatial metrics of every block output, averaged over samples.

    Returns {metric: [value at layer 1, ..., value at layer L]}.
    """
    if not samples:
        raise InvalidArgument("layer sweep needs at least one sample")
    assembled, deformed = layer_hidden(params, cfg, samples, t, seed)
    out = {m: [] for m in SPATIAL_METRICS}
    for layer in range(cfg.layers):
        rep = feature_report(samples, [h[layer] for h in assembled],
                             [h[layer] for h in deformed], k)
        for m in SPATIAL_METRICS:
            out[m].append(getattr(rep, m))
    return out


def layer_means(per_layer):
    """Mean of the four spatial metrics at each layer (absent values skipped)."""
    n = len(per_layer["lds"])
    return [_mean_or_none([per_layer[m][l] for m in SPATIAL_METRICS]) for l in range(n)]
