"""Velocity estimation, pose prediction and deskew tests.

Constant-velocity ground truth comes in two flavors used deliberately:

* ``screw_history``: a one-parameter subgroup pose(t) = X0 exp(t xi). Every
  relative motion is exp(dt xi); translation grows linearly with dt only
  when v is parallel to omega (or omega = 0), where the fit and the
  predictor are simultaneously exact.
* ``model_history``: poses constructed backwards from the last one so each
  relative motion is exactly (exp(dt w), dt v) -- the estimator's noise-free
  generative model for arbitrary (v, w).
"""
from __future__ import annotations

import numpy as np
import pytest

from madlo.geometry import Isometry3, PointCloud, exp_se3, exp_so3
from madlo.motion import StampedPose, VelocityEstimate, deskew, estimate_velocity, predict_pose


def screw_history(x0: Isometry3, v, w, stamps):
    xi = np.concatenate([v, w])
    return [StampedPose(x0 @ exp_se3(t * xi), t) for t in stamps]


def model_history(last: Isometry3, v, w, stamps):
    out = []
    for t in stamps[:-1]:
        dt = stamps[-1] - t
        rel = Isometry3(exp_so3(dt * np.asarray(w)), dt * np.asarray(v))
        out.append(StampedPose(last @ rel.inverse(), t))
    out.append(StampedPose(last, stamps[-1]))
    return out


# ------------------------------------------------------------- estimation


def test_stationary_history_gives_zero():
    hist = [StampedPose(Isometry3.identity(), 0.1 * i) for i in range(10)]
    vel = estimate_velocity(hist)
    assert np.array_equal(vel.v, np.zeros(3))
    assert np.array_equal(vel.omega, np.zeros(3))


def test_short_history_gives_zero():
    assert np.array_equal(estimate_velocity([]).v, np.zeros(3))
    one = [StampedPose(Isometry3.identity(), 0.0)]
    assert np.array_equal(estimate_velocity(one).omega, np.zeros(3))


def test_estimate_exact_on_generative_model():
    rng = np.random.default_rng(81)
    v, w = np.array([1.0, 0.5, 0.0]), np.array([0.0, 0.0, 0.2])
    stamps = [0.1 * i for i in range(10)]
    last = exp_se3(rng.normal(size=6))
    vel = estimate_velocity(model_history(last, v, w, stamps))
    assert np.abs(vel.v - v).max() < 1e-6
    assert np.abs(vel.omega - w).max() < 1e-6


def test_estimate_exact_on_pure_translation_screw():
    v, w = np.array([0.8, -0.3, 0.1]), np.zeros(3)
    stamps = [0.1 * i for i in range(10)]
    vel = estimate_velocity(screw_history(Isometry3.identity(), v, w, stamps))
    assert np.abs(vel.v - v).max() < 1e-9
    assert np.abs(vel.omega).max() < 1e-9


def test_estimate_exact_on_screw_motion():
    # v parallel to omega: relative translations grow linearly, both exact
    v, w = np.array([0.0, 0.0, 0.6]), np.array([0.0, 0.0, 0.3])
    stamps = [0.1 * i for i in range(10)]
    x0 = exp_se3(np.array([1.0, 2.0, 0.5, 0.2, -0.1, 0.4]))
    vel = estimate_velocity(screw_history(x0, v, w, stamps))
    assert np.abs(vel.v - v).max() < 1e-9
    assert np.abs(vel.omega - w).max() < 1e-9


def test_estimate_two_pose_window():
    v, w = np.array([2.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.5])
    hist = model_history(Isometry3.identity(), v, w, [0.0, 0.25])
    vel = estimate_velocity(hist)
    assert np.abs(vel.v - v).max() < 1e-9
    assert np.abs(vel.omega - w).max() < 1e-9


def test_estimate_rejects_non_increasing_stamps():
    hist = [StampedPose(Isometry3.identity(), 0.0), StampedPose(Isometry3.identity(), 0.0)]
    with pytest.raises(ValueError):
        estimate_velocity(hist)


# ------------------------------------------------------------- prediction


def test_predict_zero_velocity_keeps_pose():
    rng = np.random.default_rng(82)
    x = exp_se3(rng.normal(size=6))
    y = predict_pose(x, VelocityEstimate.zero(), 0.1)
    assert np.abs(y.matrix() - x.matrix()).max() < 1e-15


def test_predict_pure_translation():
    vel = VelocityEstimate(np.array([1.0, 0.0, 0.0]), np.zeros(3))
    y = predict_pose(Isometry3.identity(), vel, 0.5)
    assert np.abs(y.translation - np.array([0.5, 0.0, 0.0])).max() < 1e-12


def test_predict_closes_loop_with_estimator():
    # estimate from a screw history, integrate one step, compare to truth
    v, w = np.array([0.0, 0.9, 0.0]), np.array([0.0, 0.45, 0.0])
    dt = 0.1
    stamps = [dt * i for i in range(10)]
    x0 = exp_se3(np.array([0.3, -1.0, 2.0, 0.1, 0.2, -0.3]))
    hist = screw_history(x0, v, w, stamps)
    vel = estimate_velocity(hist)
    pred = predict_pose(hist[-1].pose, vel, dt)
    truth = x0 @ exp_se3((stamps[-1] + dt) * np.concatenate([v, w]))
    assert np.abs(pred.matrix() - truth.matrix()).max() < 1e-6


# ---------------------------------------------------------------- deskew


def test_deskew_zero_velocity_is_bitwise_noop():
    rng = np.random.default_rng(83)
    cloud = PointCloud(rng.normal(size=(100, 3)), rel_times=rng.uniform(0, 1, 100))
    out = deskew(cloud, VelocityEstimate.zero(), 0.1)
    assert np.array_equal(out.points, cloud.points)


def test_deskew_without_rel_times_warns_and_passes_through(caplog):
    cloud = PointCloud(np.zeros((5, 3)))
    with caplog.at_level("WARNING", logger="madlo.motion"):
        out = deskew(cloud, VelocityEstimate(np.ones(3), np.zeros(3)), 0.1)
    assert out is cloud
    assert any("deskew" in r.message for r in caplog.records)


def test_deskew_anchor_point_unchanged():
    cloud = PointCloud(np.array([[3.0, -1.0, 2.0]]), rel_times=np.array([1.0]))
    vel = VelocityEstimate(np.array([5.0, 1.0, -2.0]), np.array([0.4, 0.1, -0.8]))
    out = deskew(cloud, vel, 0.1)
    assert np.array_equal(out.points, cloud.points)


def test_deskew_matches_snapshot_of_spinning_sensor():
    rng = np.random.default_rng(84)
    v = np.array([1.0, 0.0, 0.0])
    w = np.array([0.0, 0.0, 0.5])
    period = 0.1
    xi = np.concatenate([v, w])
    wall = np.column_stack(
        [np.full(300, 5.0), rng.uniform(-3, 3, 300), rng.uniform(-1, 2, 300)]
    )
    s = rng.uniform(0.0, 1.0, 300)
    s[0] = 1.0
    skewed = np.stack(
        [
            (exp_se3(si * period * xi)).inverse().apply(p)
            for si, p in zip(s, wall)
        ]
    )
    snapshot = exp_se3(period * xi).inverse().apply(wall)
    out = deskew(PointCloud(skewed, rel_times=s), VelocityEstimate(v, w), period)
    assert np.abs(out.points - snapshot).max() < 1e-6


def test_deskew_inverts_with_negated_twist():
    rng = np.random.default_rng(85)
    cloud = PointCloud(rng.normal(scale=5.0, size=(200, 3)),
                       rel_times=rng.uniform(0, 1, 200))
    vel = VelocityEstimate(np.array([1.0, -0.5, 0.2]), np.array([0.3, 0.2, -0.4]))
    neg = VelocityEstimate(-vel.v, -vel.omega)
    back = deskew(deskew(cloud, vel, 0.1), neg, 0.1)
    assert np.abs(back.points - cloud.points).max() < 1e-9
