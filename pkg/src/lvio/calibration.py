"""Spatial-temporal sensor models: extrinsics, time delays, compensation.

Timestamp conventions (IMU clock t_b is the reference):
    t_b = t_c + dt_bc   (camera)
    t_b = t_r + dt_br   (LiDAR)

dt_bc is modeled as a random-walk process and carried per keyframe;
dt_br is a random constant shared by the whole window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, exp_map, quat_conjugate, quat_multiply, quat_normalize, quat_rotate


@dataclass
class CameraImuExtrinsics:
    p_bc: np.ndarray  # lever arm in body frame, m
    q_cb: np.ndarray  # camera-to-body rotation, (w,x,y,z)

    def __post_init__(self):
        self.p_bc = np.asarray(self.p_bc, dtype=float)
        self.q_cb = quat_normalize(self.q_cb)

    def pose(self) -> Pose:
        return Pose(self.p_bc, self.q_cb)


@dataclass
class LidarImuExtrinsics:
    p_br: np.ndarray  # lever arm in body frame, m
    q_rb: np.ndarray  # lidar-to-body rotation, (w,x,y,z)
    dt_br: float = 0.0  # s

    def __post_init__(self):
        self.p_br = np.asarray(self.p_br, dtype=float)
        self.q_rb = quat_normalize(self.q_rb)

    def pose(self) -> Pose:
        return Pose(self.p_br, self.q_rb)


@dataclass
class TimeDelayConfig:
    sigma_t_bc: float = 1.0e-4  # random-walk driving noise, s/sqrt(s)
    initial_dt_bc: float = 0.0
    initial_dt_br: float = 0.0
    prior_sigma_dt_bc: float = 0.05
    prior_sigma_dt_br: float = 0.05

    def __post_init__(self):
        if self.sigma_t_bc <= 0 or self.prior_sigma_dt_bc <= 0 or self.prior_sigma_dt_br <= 0:
            raise ValueError("time-delay sigmas must be positive")


def compensate_feature(p_u: np.ndarray, v_u: np.ndarray, delta_t: float) -> np.ndarray:
    """Shift a normalized-camera observation by the constant-velocity model.

    p_u is (x, y, 1); v_u is the 2-vector feature velocity (1/s). delta_t is
    the bias between the estimated camera delay and the delay the frame was
    preprocessed with.
    """
    out = np.asarray(p_u, dtype=float).copy()
    out[0] -= v_u[0] * delta_t
    out[1] -= v_u[1] * delta_t
    return out


def time_delay_residual(dt_bc_prev: float, dt_bc_cur: float, interval: float,
                        cfg: TimeDelayConfig):
    """Random-walk residual and variance for consecutive camera delays."""
    if interval <= 0:
        raise ValueError("keyframe interval must be positive")
    return dt_bc_cur - dt_bc_prev, cfg.sigma_t_bc**2 * interval


def compensate_lidar_pose(pose: Pose, delta_t: float, velocity: np.ndarray,
                          angular_rate: np.ndarray) -> Pose:
    """Shift a body pose to the actual LiDAR sampling instant.

    p <- p + v dt, q <- q (x) Exp(w dt); the result feeds the LiDAR
    residuals and the F2M pose residual.
    """
    p = pose.t + np.asarray(velocity, float) * delta_t
    q = quat_multiply(pose.q, exp_map(np.asarray(angular_rate, float) * delta_t))
    return Pose(p, q)


def lidar_camera_extrinsics(cam: CameraImuExtrinsics, lid: LidarImuExtrinsics):
    """Derive the LiDAR-camera extrinsics {p_cr, q_rc} from the IMU-centric ones."""
    q_bc = quat_conjugate(cam.q_cb)
    p_cr = quat_rotate(q_bc, lid.p_br - cam.p_bc)
    q_rc = quat_multiply(q_bc, lid.q_rb)
    return p_cr, quat_normalize(q_rc)


def pixel_angle_deg(pixel_size: float, focal_length: float) -> float:
    """Angle subtended by one pixel, degrees: asin(pixel_size / focal_length)."""
    return math.degrees(math.asin(pixel_size / focal_length))


def _euler_zyx_deg(q: np.ndarray) -> np.ndarray:
    from .geometry import quat_to_matrix

    R = quat_to_matrix(q)
    pitch = math.asin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.degrees([roll, pitch, yaw])


def calibration_report(cam: CameraImuExtrinsics, lid: LidarImuExtrinsics,
                       dt_bc: float, stds: dict | None = None) -> str:
    """Human-readable block with estimated extrinsics and time delays."""
    stds = stds or {}
    p_cr, q_rc = lidar_camera_extrinsics(cam, lid)
    lines = ["# calibration report"]

    def vec(v):
        return " ".join(f"{x: .6f}" for x in v)

    lines.append(f"camera-imu translation (m): {vec(cam.p_bc)}")
    lines.append(f"camera-imu rotation XYZ (deg): {vec(_euler_zyx_deg(cam.q_cb))}")
    lines.append(f"lidar-imu translation (m): {vec(lid.p_br)}")
    lines.append(f"lidar-imu rotation XYZ (deg): {vec(_euler_zyx_deg(lid.q_rb))}")
    lines.append(f"lidar-camera translation (m): {vec(p_cr)}")
    lines.append(f"lidar-camera rotation XYZ (deg): {vec(_euler_zyx_deg(q_rc))}")
    lines.append(f"camera time delay (ms): {dt_bc * 1e3: .4f}")
    lines.append(f"lidar time delay (ms): {lid.dt_br * 1e3: .4f}")
    for name, val in stds.items():
        lines.append(f"std {name}: {val:.6g}")
    return "\n".join(lines) + "\n"
