"""IMU preintegration between keyframes and high-rate INS mechanization.

The preintegrated deltas are expressed in the body frame of the first
sample and are independent of the global pose, velocity, and gravity.
Integration uses a midpoint scheme per sample interval; the error state
is (dp, dtheta, dv, dbg, dba) with a rotation-vector attitude error and
right multiplicative perturbation.

Gravity is a fixed known constant in the world frame (default
(0, 0, -9.81) m/s^2); it is re-added at prediction/residual time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    exp_map,
    log_map,
    quat_conjugate,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    skew,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

GRAVITY_W = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_rate: np.ndarray  # rad/s, body frame
    specific_force: np.ndarray  # m/s^2, body frame

    def __post_init__(self):
        object.__setattr__(self, "angular_rate", np.asarray(self.angular_rate, dtype=float))
        object.__setattr__(self, "specific_force", np.asarray(self.specific_force, dtype=float))


@dataclass
class ImuNoiseConfig:
    gyro_noise: float = 2.0e-3  # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-2  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1.0e-5  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1.0e-4  # m/s^3/sqrt(Hz)
    # Earth-rotation compensation hook; consumer-grade IMUs assumed, so the
    # correction is off by default and currently unimplemented.
    earth_rotation: bool = False


@dataclass
class PreintegratedImu:
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_q: np.ndarray
    duration: float
    bias_g: np.ndarray
    bias_a: np.ndarray
    dp_dbg: np.ndarray
    dp_dba: np.ndarray
    dv_dbg: np.ndarray
    dv_dba: np.ndarray
    dq_dbg: np.ndarray
    covariance: np.ndarray  # 15x15 over (dp, dtheta, dv, dbg, dba)
    t_start: float = 0.0
    t_end: float = 0.0

    def corrected_deltas(self, bias_g: np.ndarray, bias_a: np.ndarray):
        """First-order bias-corrected deltas at the given biases."""
        dbg = np.asarray(bias_g, float) - self.bias_g
        dba = np.asarray(bias_a, float) - self.bias_a
        dp = self.delta_p + self.dp_dbg @ dbg + self.dp_dba @ dba
        dv = self.delta_v + self.dv_dbg @ dbg + self.dv_dba @ dba
        dq = quat_multiply(self.delta_q, exp_map(self.dq_dbg @ dbg))
        return dp, dv, dq


def _validate_samples(samples) -> list:
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least 2 IMU samples")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) <= 0.0):
        raise ValueError("IMU samples must be strictly increasing in time")
    return samples


def integrate(samples, bias_g, bias_a, noise: ImuNoiseConfig) -> PreintegratedImu:
    """Preintegrate an IMU sample stream at the given linearization biases."""
    samples = _validate_samples(samples)
    bias_g = np.asarray(bias_g, dtype=float)
    bias_a = np.asarray(bias_a, dtype=float)
    if not (np.all(np.isfinite(bias_g)) and np.all(np.isfinite(bias_a))):
        raise ValueError("non-finite bias")

    dp = np.zeros(3)
    dv = np.zeros(3)
    dq = np.array([1.0, 0.0, 0.0, 0.0])
    R = np.eye(3)

    dp_dbg = np.zeros((3, 3))
    dp_dba = np.zeros((3, 3))
    dv_dbg = np.zeros((3, 3))
    dv_dba = np.zeros((3, 3))
    A = np.zeros((3, 3))  # dtheta/dbg, right perturbation

    P = np.zeros((15, 15))
    sg2 = noise.gyro_noise**2
    sa2 = noise.accel_noise**2
    sbg2 = noise.gyro_bias_walk**2
    sba2 = noise.accel_bias_walk**2

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.timestamp - s0.timestamp
        w_mid = 0.5 * (s0.angular_rate + s1.angular_rate) - bias_g
        phi = w_mid * dt
        dq_step = exp_map(phi)
        E = quat_to_matrix(dq_step)
        Jr = so3_right_jacobian(phi)

        a0 = s0.specific_force - bias_a
        a1 = s1.specific_force - bias_a
        R_new = R @ E
        f_mid = 0.5 * (R @ a0 + R_new @ a1)

        # error-state transition (dp, dtheta, dv, dbg, dba)
        A_new = E.T @ A - Jr * dt
        df_dbg = -0.5 * (R @ skew(a0) @ A + R_new @ skew(a1) @ A_new)
        df_dba = -0.5 * (R + R_new)
        df_dth = -0.5 * (R @ skew(a0) + R_new @ skew(a1) @ E.T)

        F = np.eye(15)
        F[0:3, 3:6] = 0.5 * dt * dt * df_dth
        F[0:3, 6:9] = np.eye(3) * dt
        F[0:3, 9:12] = 0.5 * dt * dt * df_dbg
        F[0:3, 12:15] = 0.5 * dt * dt * df_dba
        F[3:6, 3:6] = E.T
        F[3:6, 9:12] = -Jr * dt
        F[6:9, 3:6] = dt * df_dth
        F[6:9, 9:12] = df_dbg * dt
        F[6:9, 12:15] = df_dba * dt

        # noise input: (ng, na, nbg, nba); ng enters attitude (and the force
        # through the rotated second sample), na enters the force directly
        G = np.zeros((15, 12))
        G[3:6, 0:3] = -Jr * dt
        G[6:9, 0:3] = -0.5 * dt * dt * (R_new @ skew(a1) @ Jr)
        G[6:9, 3:6] = -0.5 * (R + R_new) * dt
        G[0:3, 0:3] = 0.5 * dt * G[6:9, 0:3]
        G[0:3, 3:6] = 0.5 * dt * G[6:9, 3:6]
        G[9:12, 6:9] = np.eye(3)
        G[12:15, 9:12] = np.eye(3)

        Q = np.zeros((12, 12))
        Q[0:3, 0:3] = np.eye(3) * sg2 / dt
        Q[3:6, 3:6] = np.eye(3) * sa2 / dt
        Q[6:9, 6:9] = np.eye(3) * sbg2 * dt
        Q[9:12, 9:12] = np.eye(3) * sba2 * dt

        P = F @ P @ F.T + G @ Q @ G.T

        # exact first-order bias jacobians of the midpoint recursion
        dp_dbg = dp_dbg + dv_dbg * dt + 0.5 * dt * dt * df_dbg
        dp_dba = dp_dba + dv_dba * dt + 0.5 * dt * dt * df_dba
        dv_dbg = dv_dbg + df_dbg * dt
        dv_dba = dv_dba + df_dba * dt
        A = A_new

        dp = dp + dv * dt + 0.5 * f_mid * dt * dt
        dv = dv + f_mid * dt
        dq = quat_multiply(dq, dq_step)
        R = quat_to_matrix(dq)

    P = 0.5 * (P + P.T)
    return PreintegratedImu(
        delta_p=dp,
        delta_v=dv,
        delta_q=dq,
        duration=samples[-1].timestamp - samples[0].timestamp,
        bias_g=bias_g.copy(),
        bias_a=bias_a.copy(),
        dp_dbg=dp_dbg,
        dp_dba=dp_dba,
        dv_dbg=dv_dbg,
        dv_dba=dv_dba,
        dq_dbg=A,
        covariance=P,
        t_start=samples[0].timestamp,
        t_end=samples[-1].timestamp,
    )


def preintegration_residual(state_i, state_j, pre: PreintegratedImu, gravity=GRAVITY_W):
    """15-vector residual (rp, rtheta, rv, rbg, rba) and its covariance.

    ``state_i``/``state_j`` need attributes timestamp, p, q, v, bg, ba
    (see estimator.KeyframeState).
    """
    T = state_j.timestamp - state_i.timestamp
    if abs(T - pre.duration) > 1e-3:
        raise ValueError(
            f"preintegration duration {pre.duration} does not match keyframe interval {T}"
        )
    g = np.asarray(gravity, dtype=float)
    Ri = quat_to_matrix(state_i.q)
    dp, dv, dq = pre.corrected_deltas(state_j.bg, state_j.ba)

    rp = Ri.T @ (state_j.p - state_i.p - state_i.v * T - 0.5 * g * T * T) - dp
    rv = Ri.T @ (state_j.v - state_i.v - g * T) - dv
    rq = log_map(
        quat_multiply(quat_conjugate(dq), quat_multiply(quat_conjugate(state_i.q), state_j.q))
    )
    r = np.concatenate([rp, rq, rv, state_j.bg - state_i.bg, state_j.ba - state_i.ba])
    return r, pre.covariance


def preintegration_jacobians(state_i, state_j, pre: PreintegratedImu, gravity=GRAVITY_W):
    """Analytic jacobians of the preintegration residual.

    Returns a dict with keys ('p_i','q_i','v_i','bg_i','ba_i',
    'p_j','q_j','v_j','bg_j','ba_j') of 15xD blocks. Attitude blocks use a
    right multiplicative perturbation q <- q (x) Exp(theta).
    """
    T = state_j.timestamp - state_i.timestamp
    g = np.asarray(gravity, dtype=float)
    Ri = quat_to_matrix(state_i.q)
    Rj = quat_to_matrix(state_j.q)

    dbg = state_j.bg - pre.bias_g
    v_bg = pre.dq_dbg @ dbg
    dq_corr = quat_multiply(pre.delta_q, exp_map(v_bg))
    M = quat_to_matrix(dq_corr).T @ Ri.T @ Rj
    phi = log_map(
        quat_multiply(quat_conjugate(dq_corr), quat_multiply(quat_conjugate(state_i.q), state_j.q))
    )
    Jr_inv = so3_right_jacobian_inv(phi)

    dP = state_j.p - state_i.p - state_i.v * T - 0.5 * g * T * T
    dV = state_j.v - state_i.v - g * T

    J = {k: np.zeros((15, 3)) for k in (
        "p_i", "q_i", "v_i", "bg_i", "ba_i", "p_j", "q_j", "v_j", "bg_j", "ba_j")}

    # position rows
    J["p_i"][0:3] = -Ri.T
    J["p_j"][0:3] = Ri.T
    J["v_i"][0:3] = -Ri.T * T
    J["q_i"][0:3] = skew(Ri.T @ dP)
    J["bg_j"][0:3] = -pre.dp_dbg
    J["ba_j"][0:3] = -pre.dp_dba

    # attitude rows
    J["q_j"][3:6] = Jr_inv
    J["q_i"][3:6] = -Jr_inv @ Rj.T @ Ri
    J["bg_j"][3:6] = -Jr_inv @ M.T @ so3_right_jacobian(v_bg) @ pre.dq_dbg

    # velocity rows
    J["v_i"][6:9] = -Ri.T
    J["v_j"][6:9] = Ri.T
    J["q_i"][6:9] = skew(Ri.T @ dV)
    J["bg_j"][6:9] = -pre.dv_dbg
    J["ba_j"][6:9] = -pre.dv_dba

    # bias rows
    J["bg_i"][9:12] = -np.eye(3)
    J["bg_j"][9:12] = np.eye(3)
    J["ba_i"][12:15] = -np.eye(3)
    J["ba_j"][12:15] = np.eye(3)
    return J


def mechanize(state, samples, gravity=GRAVITY_W):
    """Forward INS mechanization from a keyframe state through IMU samples.

    Returns (poses, velocities): lists of (timestamp, Pose) and 3-vectors,
    one per sample, starting at the first sample (= state timestamp).
    Uses the same midpoint scheme as :func:`integrate` so that the final
    pose equals the state composed with the preintegrated delta.
    """
    samples = _validate_samples(samples)
    g = np.asarray(gravity, dtype=float)
    p = np.asarray(state.p, dtype=float).copy()
    v = np.asarray(state.v, dtype=float).copy()
    q = np.asarray(state.q, dtype=float).copy()
    bg = np.asarray(state.bg, dtype=float)
    ba = np.asarray(state.ba, dtype=float)

    poses = [(samples[0].timestamp, Pose(p.copy(), q.copy()))]
    vels = [v.copy()]
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.timestamp - s0.timestamp
        w_mid = 0.5 * (s0.angular_rate + s1.angular_rate) - bg
        dq_step = exp_map(w_mid * dt)
        q_new = quat_multiply(q, dq_step)
        f_mid = 0.5 * (
            quat_rotate(q, s0.specific_force - ba) + quat_rotate(q_new, s1.specific_force - ba)
        )
        acc = f_mid + g
        p = p + v * dt + 0.5 * acc * dt * dt
        v = v + acc * dt
        q = q_new
        poses.append((s1.timestamp, Pose(p.copy(), q.copy())))
        vels.append(v.copy())
    return poses, vels


def slice_samples(samples, t0: float, t1: float):
    """Slice an IMU stream to [t0, t1], interpolating boundary samples.

    The returned sequence starts exactly at t0 and ends exactly at t1 so
    preintegration durations match keyframe intervals.
    """
    samples = list(samples)
    times = np.array([s.timestamp for s in samples])
    if t0 < times[0] - 1e-9 or t1 > times[-1] + 1e-9:
        raise ValueError("requested interval outside the IMU stream")

    def interp(t):
        i = int(np.searchsorted(times, t))
        if i < len(times) and abs(times[i] - t) < 1e-12:
            return samples[i]
        lo, hi = samples[i - 1], samples[i]
        a = (t - lo.timestamp) / (hi.timestamp - lo.timestamp)
        return ImuSample(
            t,
            (1 - a) * lo.angular_rate + a * hi.angular_rate,
            (1 - a) * lo.specific_force + a * hi.specific_force,
        )

    inner = [s for s in samples if t0 + 1e-12 < s.timestamp < t1 - 1e-12]
    return [interp(t0)] + inner + [interp(t1)]
