"""Constant-velocity motion model: estimation, prediction, deskewing.

The body-frame velocity at time k is fit by least squares over the relative
motions from the recent pose window: with dt_i = stamp_k - stamp_i and
(R_i, t_i) = pose_i^-1 pose_k, each pair contributes dt_i * v ~ t_i and
dt_i * omega ~ Log(R_i), giving the closed-form minimizer

    v = sum(dt_i t_i) / sum(dt_i^2),   omega = sum(dt_i Log(R_i)) / sum(dt_i^2)

The same twist deskews the following sweep: a point captured at scan
fraction s is carried to the end-of-sweep frame by exp((s - 1) T [v, w]),
so the last-fired point is the anchor and stays put.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    Isometry3,
    PointCloud,
    exp_se3,
    exp_se3_batch,
    log_so3,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StampedPose:
    pose: Isometry3
    stamp: float


@dataclass(frozen=True)
class VelocityEstimate:
    v: np.ndarray        # m/s, body frame at the window's last pose
    omega: np.ndarray    # rad/s

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))

    @classmethod
    def zero(cls) -> "VelocityEstimate":
        return cls(np.zeros(3), np.zeros(3))


def estimate_velocity(history: Sequence[StampedPose]) -> VelocityEstimate:
    """Fit the constant body twist explaining the recent pose window.

    Fewer than two poses give zero velocity. Stamps must strictly increase.
    """
    if len(history) < 2:
        return VelocityEstimate.zero()
    stamps = [sp.stamp for sp in history]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ValueError("pose stamps must be strictly increasing")
    last = history[-1]
    num_v = np.zeros(3)
    num_w = np.zeros(3)
    den = 0.0
    for sp in history[:-1]:
        dt = last.stamp - sp.stamp
        rel = sp.pose.inverse() @ last.pose
        num_v += dt * rel.translation
        num_w += dt * log_so3(rel.rotation)
        den += dt * dt
    return VelocityEstimate(num_v / den, num_w / den)


def predict_pose(last_pose: Isometry3, vel: VelocityEstimate, dt: float) -> Isometry3:
    """Integrate the body twist forward: pose . exp(dt [v, omega])."""
    return last_pose @ exp_se3(np.concatenate([dt * vel.v, dt * vel.omega]))


def deskew(cloud: PointCloud, vel: VelocityEstimate, scan_period: float) -> PointCloud:
    """Motion-compensate one sweep into its end-of-scan frame.

    Clouds without per-point capture fractions pass through unchanged (with
    a warning); a point at s = 1 is bitwise unchanged by construction.
    """
    if cloud.rel_times is None:
        log.warning("deskew skipped: cloud carries no per-point times")
        return cloud
    alpha = (cloud.rel_times - 1.0) * scan_period
    rot, trans = exp_se3_batch(alpha[:, None] * vel.v, alpha[:, None] * vel.omega)
    pts = np.einsum("nij,nj->ni", rot, cloud.points) + trans
    return PointCloud(pts, rel_times=cloud.rel_times)
