"""Assembly evaluation: Part Accuracy and ICP-residual rotation/translation errors."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import scatter_parts
from .errors import DivergedError, InvalidArgument
from .flow import OracleField, TokenBatch, sample
from .geometry import (RigidTransform, chamfer_distance, geodesic_angle_deg, icp, kabsch,
                       translation_rmse)

log = logging.getLogger(__name__)

PA_THRESHOLD = 0.01
PROTOCOLS = ("anchor_fixed", "anchor_free")
NOT_REACHED = "not reached"


def part_accuracy(predicted_parts, gt_parts, tau=PA_THRESHOLD):
    """Fraction of parts with Chamfer distance strictly below ``tau``, plus per-part flags."""
    if len(predicted_parts) != len(gt_parts):
        raise InvalidArgument(
            f"{len(predicted_parts)} predicted parts vs {len(gt_parts)} ground-truth parts")
    if not gt_parts:
        raise InvalidArgument("no parts to score")
    flags = [chamfer_distance(p, g) < tau for p, g in zip(predicted_parts, gt_parts)]
    return sum(flags) / len(flags), flags


def pose_errors(predicted_parts, gt_parts, scale, skip=(), max_iters=50, tol=1e-6):
    """Per-part (RE degrees, TE cm) of the ICP residual from ground truth to prediction.

    Entries for skipped parts are ``None``; ICP-degenerate parts give ``"invalid"``.
    """
    if len(predicted_parts) != len(gt_parts):
        raise InvalidArgument("part count mismatch")
    if not scale > 0:
        raise InvalidArgument("scale must be positive")
    out = []
    for k, (pred, gt) in enumerate(zip(predicted_parts, gt_parts)):
        if k in skip:
            out.append(None)
            continue
        try:
            residual = icp(gt, pred, max_iters=max_iters, tol=tol)
        except ValueError:
            out.append("invalid")
            continue
        out.append((geodesic_angle_deg(residual.rotation),
                    translation_rmse(residual.translation, scale)))
    return out


@dataclass
class SampleResult:
    index: int
    chamfer: list
    pa_flags: list
    re_deg: list
    te_cm: list
    failed: bool = False

    @property
    def pa(self):
        return sum(self.pa_flags) / len(self.pa_flags)


@dataclass
class MetricsReport:
    pa: float
    re_deg: float
    te_cm: float
    n_samples: int
    n_invalid_parts: int
    protocol: str
    n_failed_samples: int = 0
    samples: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"pa": self.pa, "re_deg": self.re_deg, "te_cm": self.te_cm,
                "n_samples": self.n_samples, "n_invalid_parts": self.n_invalid_parts,
                "protocol": self.protocol, "n_failed_samples": self.n_failed_samples}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "part", "chamfer", "pa", "re_deg", "te_cm"])
            for s in self.samples:
                for k, (cd, ok) in enumerate(zip(s.chamfer, s.pa_flags)):
                    re_ = "" if s.re_deg[k] is None else s.re_deg[k]
                    te_ = "" if s.te_cm[k] is None else s.te_cm[k]
                    w.writerow([s.index, k, cd, int(ok), re_, te_])


def _mean_valid(values):
    """Exact mean of the float entries; ``None`` (skipped) and ``"invalid"`` are ignored."""
    values = [v for v in values if isinstance(v, float)]
    return math.fsum(values) / len(values) if values else None


def aggregate(results, protocol):
    """Order-independent reduction: per-sample means, then exact (fsum) means over samples."""
    results = sorted(results, key=lambda r: r.index)
    pa = math.fsum(r.pa for r in results) / len(results)
    re_mean = _mean_valid([_mean_valid(r.re_deg) for r in results])
    te_mean = _mean_valid([_mean_valid(r.te_cm) for r in results])
    invalid = sum(1 for r in results for v in r.re_deg if v == "invalid")
    return MetricsReport(pa=pa,
                         re_deg=float("nan") if re_mean is None else re_mean,
                         te_cm=float("nan") if te_mean is None else te_mean,
                         n_samples=len(results), n_invalid_parts=invalid, protocol=protocol,
                         n_failed_samples=sum(r.failed for r in results), samples=results)


def prepare_protocol(samples, protocol, seed=0):
    """Anchor-free evaluation re-scatters every part, the anchor included."""
    if protocol not in PROTOCOLS:
        raise InvalidArgument(f"unknown protocol {protocol!r}")
    if protocol == "anchor_fixed":
        return list(samples)
    return [scatter_parts(s, np.random.default_rng([seed, i, 1]), "anchor_free")
            for i, s in enumerate(samples)]


def eval_noise(samples, seed=0):
    return [np.random.default_rng([seed, i]).standard_normal((s.num_points, 3))
            for i, s in enumerate(samples)]


def _score_sample(index, s, x_hat, anchor_fixed, tau, pose_metrics=True):
    """PA flags for all parts; RE/TE for non-anchor parts (anchor skipped when fixed)."""
    k_parts = s.num_parts
    if x_hat is None:
        return SampleResult(index, [float("inf")] * k_parts, [False] * k_parts,
                            [None] * k_parts, [None] * k_parts, failed=True)
    cds, flags, res, tes = [], [], [], []
    for k, (part, gt, sl) in enumerate(zip(s.parts, s.assembled_parts(), s.part_slices())):
        skipped = anchor_fixed and k == s.anchor_index
        try:
            pose = (RigidTransform.identity() if skipped else kabsch(part, x_hat[sl]))
        except ValueError:
            cds.append(float("inf"))
            flags.append(False)
            res.append("invalid")
            tes.append("invalid")
            continue
        pred = pose.apply(part)
        cd = chamfer_distance(pred, gt)
        cds.append(cd)
        flags.append(cd < tau)
        err = None if skipped or not pose_metrics else pose_errors([pred], [gt], s.scale)[0]
        res.append(err if err in (None, "invalid") else err[0])
        tes.append(err if err in (None, "invalid") else err[1])
    return SampleResult(index, cds, flags, res, tes)


def predict(model, samples, noises, steps):
    """Integrate the flow for all samples at once; returns one array or None per sample."""
    if model == "oracle":
        return [sample(OracleField(s.assembled(), n), n, None, steps)
                for s, n in zip(samples, noises)]
    batch = TokenBatch.from_samples(samples)
    x0 = np.concatenate(noises, axis=0)
    try:
        x_hat = sample(model, x0, batch, steps)
    except DivergedError:
        if len(samples) == 1:
            return [None]
        out = []
        for s, n in zip(samples, noises):
            out.extend(predict(model, [s], [n], steps))
        return out
    splits = np.cumsum([s.num_points for s in samples])[:-1]
    return np.split(x_hat, splits)


def evaluate(model, dataset, protocol="anchor_fixed", steps=20, seed=0, tau=PA_THRESHOLD,
             chunk=64, pose_metrics=True):
    """Sample, recover poses and score every sample. ``model="oracle"`` uses the exact field.

    ``pose_metrics=False`` skips the ICP-based RE/TE (training curves only need PA).
    """
    if not dataset:
        raise InvalidArgument("cannot evaluate an empty dataset")
    samples = prepare_protocol(dataset, protocol, seed)
    noises = eval_noise(samples, seed)
    x_hats = []
    for start in range(0, len(samples), chunk):
        x_hats.extend(predict(model, samples[start:start + chunk],
                              noises[start:start + chunk], steps))
    results = [_score_sample(i, s, x, protocol == "anchor_fixed", tau, pose_metrics)
               for i, (s, x) in enumerate(zip(samples, x_hats))]
    for r in results:
        if r.failed:
            log.warning("sample %d diverged during sampling; scored as full miss", r.index)
    return aggregate(results, protocol)


def speedup(baseline_curve, aligned_curve):
    """How many times faster the aligned run reaches the baseline's peak validation PA."""
    from .train import steps_to_reach

    if not baseline_curve.points or not aligned_curve.points:
        raise InvalidArgument("curves must be non-empty")
    target = baseline_curve.max_pa()
    base_steps = steps_to_reach(baseline_curve, target)
    aligned_steps = steps_to_reach(aligned_curve, target)
    if aligned_steps is None:
        return NOT_REACHED
    if aligned_steps == 0:
        return 1.0 if base_steps == 0 else float("inf")
    return base_steps / aligned_steps
