import json
import math

import numpy as np
import pytest

from topalign.data import make_dataset, make_sample
from topalign.errors import InvalidArgument
from topalign.evalharness import (NOT_REACHED, SampleResult, aggregate, evaluate, part_accuracy,
                                  pose_errors, speedup)
from topalign.flow import NetConfig, VelocityNet, init_params
from topalign.geometry import axis_angle, chamfer_distance
from topalign.train import CurvePoint, TrainingCurve


def _curve(pas, every=100):
    c = TrainingCurve()
    for i, pa in enumerate(pas):
        c.append(CurvePoint(i * every, pa, 0.0, 0.0))
    return c


# -------------------------------------------------------------------- part accuracy

def test_part_accuracy_examples():
    s = make_sample(np.random.default_rng(0), "cube", 2)
    gt = s.assembled_parts()
    assert part_accuracy(gt, gt) == (1.0, [True, True])
    moved = [gt[0], gt[1] + np.array([0.5, 0.0, 0.0])]
    # displacing every point by 0.5 gives a Chamfer far above 0.01
    assert chamfer_distance(moved[1], gt[1]) > 0.01
    assert part_accuracy(moved, gt)[0] == 0.5
    with pytest.raises(InvalidArgument):
        part_accuracy(gt[:1], gt)


def test_part_accuracy_threshold_is_strict():
    a = np.zeros((1, 3))
    b = np.array([[math.sqrt(0.005), 0.0, 0.0]])
    cd = chamfer_distance(a, b)
    assert part_accuracy([a], [b], tau=cd)[0] == 0.0
    assert part_accuracy([a], [b], tau=np.nextafter(cd, 1.0))[0] == 1.0


def test_part_accuracy_monotone_in_tau():
    rng = np.random.default_rng(1)
    gt = [rng.standard_normal((20, 3)) for _ in range(6)]
    pred = [g + rng.uniform(0, 0.3) * rng.standard_normal((20, 3)) for g in gt]
    taus = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e9]
    pas = [part_accuracy(pred, gt, t)[0] for t in taus]
    assert pas == sorted(pas)
    assert pas[-1] == 1.0


# -------------------------------------------------------------------- pose errors

def test_pose_errors_identity_and_centered_rotation():
    rng = np.random.default_rng(2)
    part = rng.uniform(-1, 1, (200, 3)) * np.array([1.0, 0.6, 0.3])
    part -= part.mean(axis=0)
    ((re, te),) = pose_errors([part], [part], 100.0)
    assert re == 0.0 and te < 1e-9
    rotated = part @ axis_angle([0, 0, 1], 5.0).T
    ((re, te),) = pose_errors([rotated], [part], 100.0)
    assert re == pytest.approx(5.0, abs=0.01)
    assert te < 1e-6  # rotation about the centroid leaves no residual translation
    with pytest.raises(InvalidArgument):
        pose_errors([part], [part], 0.0)


def test_pose_errors_skip_and_invalid():
    part = np.random.default_rng(3).standard_normal((10, 3))
    out = pose_errors([part, np.zeros((10, 3))], [part, np.zeros((10, 3))], 1.0, skip=(0,))
    assert out == [None, "invalid"]


def test_symmetric_ring_re_is_near_zero():
    th = np.linspace(0, 2 * np.pi, 96, endpoint=False)
    r = 1 + 0.15 * np.cos(12 * th)
    top = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(96)], axis=1)
    ring = np.concatenate([top, top * 0.8 + [0, 0, 0.3]])
    ((re, _),) = pose_errors([ring @ axis_angle([0, 0, 1], 30.0).T], [ring], 1.0)
    assert re < 0.5


# -------------------------------------------------------------------- evaluate

@pytest.fixture(scope="module")
def small_set():
    return make_dataset(4, 6, kinds=("sphere", "cube"), k_range=(2, 3), points_per_part=32)


@pytest.mark.parametrize("protocol", ["anchor_fixed", "anchor_free"])
def test_oracle_evaluation_is_perfect(small_set, protocol):
    rep = evaluate("oracle", small_set, protocol)
    assert rep.pa == 1.0
    assert rep.re_deg < 1e-6 and rep.te_cm < 1e-6
    assert rep.n_samples == 6 and rep.n_invalid_parts == 0
    assert rep.protocol == protocol
    for s, r in zip(small_set, rep.samples):
        assert len(r.pa_flags) == s.num_parts
    if protocol == "anchor_fixed":
        assert all(r.re_deg[s.anchor_index] is None for s, r in zip(small_set, rep.samples))


def test_untrained_model_scores_anchor_only(small_set):
    cfg = NetConfig(hidden=16, layers=2)
    rep = evaluate(VelocityNet(init_params(cfg, np.random.default_rng(0)), cfg), small_set)
    # zero head: every moving part stays at its noise sample
    expected = np.mean([1.0 / s.num_parts for s in small_set])
    assert rep.pa == pytest.approx(expected, abs=1e-12)
    assert 0 <= rep.re_deg <= 180 and rep.te_cm >= 0


def test_aggregate_matches_recomputation_and_ignores_order(small_set):
    cfg = NetConfig(hidden=16, layers=2)
    params = init_params(cfg, np.random.default_rng(1))
    params["out.w"] = np.random.default_rng(2).uniform(-0.5, 0.5, params["out.w"].shape)
    rep = evaluate(VelocityNet(params, cfg), small_set, steps=5)
    flags = [r.pa_flags for r in rep.samples]
    assert rep.pa == pytest.approx(np.mean([np.mean(f) for f in flags]), abs=1e-15)
    shuffled = list(reversed(rep.samples))
    again = aggregate(shuffled, "anchor_fixed")
    assert again.to_dict() == rep.to_dict()


def test_evaluate_errors_and_failures(small_set):
    with pytest.raises(InvalidArgument):
        evaluate("oracle", [])
    with pytest.raises(InvalidArgument):
        evaluate("oracle", small_set, protocol="free")

    class Blowup:
        def velocity(self, x, t, batch):
            return np.full_like(x, np.inf)

    rep = evaluate(Blowup(), small_set[:2], steps=2)
    assert rep.pa == 0.0 and rep.n_failed_samples == 2


def test_report_json_and_csv(small_set, tmp_path):
    rep = evaluate("oracle", small_set[:2])
    d = json.loads(rep.to_json())
    assert set(d) >= {"pa", "re_deg", "te_cm", "n_samples", "n_invalid_parts", "protocol"}
    assert rep.to_json() == evaluate("oracle", small_set[:2]).to_json()
    rep.write_csv(tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "sample,part,chamfer,pa,re_deg,te_cm"
    assert len(rows) == 1 + sum(s.num_parts for s in small_set[:2])


def test_aggregate_excludes_invalid_parts():
    results = [SampleResult(0, [0.0, 1.0], [True, False], [None, 10.0], [None, 2.0]),
               SampleResult(1, [0.0, 1.0, 0.0], [True, False, True], [None, "invalid", 20.0],
                            [None, "invalid", 4.0])]
    rep = aggregate(results, "anchor_fixed")
    assert rep.pa == pytest.approx((0.5 + 2 / 3) / 2)
    assert rep.re_deg == pytest.approx(15.0)
    assert rep.te_cm == pytest.approx(3.0)
    assert rep.n_invalid_parts == 1


# -------------------------------------------------------------------- speedup

def test_speedup_examples():
    base = _curve([0.1, 0.2, 0.3, 0.4, 0.5])
    assert speedup(base, base) == 1.0
    assert speedup(base, _curve([0.1, 0.3, 0.5, 0.5, 0.5])) == 2.0
    assert speedup(base, _curve([0.1, 0.2, 0.2, 0.2, 0.2])) == NOT_REACHED
    with pytest.raises(InvalidArgument):
        speedup(TrainingCurve(), base)
