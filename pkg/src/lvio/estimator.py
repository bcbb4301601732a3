"""Sliding-window factor-graph estimator.

State vector: per-keyframe {p, q, v, b_g, b_a, dt_bc} plus window-global
camera-IMU and LiDAR-IMU extrinsics and the LiDAR time delay. Parameter
blocks are keyed by (name, keyframe_id); attitude blocks live on the
rotation manifold with a right multiplicative perturbation.

The optimizer is a dense Levenberg-Marquardt over the assembled factors:
IMU preintegration and time-delay random walks between consecutive
keyframes, pose-only visual / LiDAR-depth / LiDAR-plane factors, the
loosely-coupled F2M pose factor on the oldest and newest keyframes, simple
Gaussian priors, and the marginalization prior. When the window is full the
oldest keyframe is folded into the prior by a Schur complement; the F2M
factor on that keyframe is removed beforehand (it carries absolute map
information whose marginalization would make the estimator inconsistent)
unless the "marg_f2m" ablation keeps it.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from . import factors as pa
from .calibration import (
    CameraImuExtrinsics,
    LidarImuExtrinsics,
    TimeDelayConfig,
    time_delay_residual,
)
from .f2m import (
    F2mConvergenceError,
    F2mObservabilityError,
    F2mPoseMeasurement,
    GlobalPlaneMap,
    estimate_f2m_pose,
    f2m_pose_residual,
    insert_marginalized_frame,
)
from .geometry import Pose, exp_map, log_map, quat_conjugate, quat_multiply, quat_normalize, quat_to_matrix
from .imu import (
    ImuNoiseConfig,
    PreintegratedImu,
    integrate,
    mechanize,
    preintegration_jacobians,
    preintegration_residual,
    slice_samples,
)

log = logging.getLogger(__name__)

MODES = ("full", "no_f2m", "marg_f2m", "no_calib", "lio", "vio")

# manifold dimension of each block name
BLOCK_DIMS = {
    "p": 3, "q": 3, "v": 3, "bg": 3, "ba": 3, "dt": 1,
    "cp": 3, "cq": 3, "lp": 3, "lq": 3, "ldt": 1,
}
QUAT_BLOCKS = ("q", "cq", "lq")
CALIB_BLOCKS = ("dt", "cp", "cq", "lp", "lq", "ldt")


@dataclass
class KeyframeState:
    timestamp: float  # IMU-clock epoch of the state
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt_bc: float = 0.0
    dthat_br: float = 0.0  # LiDAR delay the frame was preprocessed with
    angular_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    max_gyro_bias: float = 0.1
    max_accel_bias: float = 2.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = quat_normalize(self.q)
        self.v = np.asarray(self.v, dtype=float)
        self.bg = np.asarray(self.bg, dtype=float)
        self.ba = np.asarray(self.ba, dtype=float)
        if np.linalg.norm(self.bg) >= self.max_gyro_bias:
            raise ValueError("gyro bias outside sanity bound")
        if np.linalg.norm(self.ba) >= self.max_accel_bias:
            raise ValueError("accel bias outside sanity bound")

    def pose(self) -> Pose:
        return Pose(self.p, self.q)


@dataclass
class PriorInfo:
    """Gaussian prior from marginalization: r(x) = r0 + S * boxminus(x, lin)."""

    keys: list
    lin: dict
    sqrt_info: np.ndarray
    r0: np.ndarray

    def dims(self):
        return [BLOCK_DIMS[k[0]] for k in self.keys]


class WindowState:
    """Keyframe states plus the window-global calibration states."""

    def __init__(self, cam_ext: CameraImuExtrinsics, lid_ext: LidarImuExtrinsics,
                 window_size: int = 10):
        self.keyframes: dict[int, KeyframeState] = {}
        self.cam_ext = cam_ext
        self.lid_ext = lid_ext
        self.window_size = window_size
        self.prior: PriorInfo | None = None

    def ordered_ids(self):
        return sorted(self.keyframes)

    def add(self, kf_id: int, state: KeyframeState):
        ids = self.ordered_ids()
        if ids and state.timestamp <= self.keyframes[ids[-1]].timestamp:
            raise ValueError("keyframe timestamps must be strictly increasing")
        if len(self.keyframes) >= self.window_size + 1:
            raise ValueError("window overfull; marginalize first")
        self.keyframes[kf_id] = state

    def copy(self) -> "WindowState":
        return copy.deepcopy(self)

    # parameter-block access -------------------------------------------------

    def get_block(self, key):
        name, k = key
        if name == "p":
            return self.keyframes[k].p
        if name == "q":
            return self.keyframes[k].q
        if name == "v":
            return self.keyframes[k].v
        if name == "bg":
            return self.keyframes[k].bg
        if name == "ba":
            return self.keyframes[k].ba
        if name == "dt":
            return np.array([self.keyframes[k].dt_bc])
        if name == "cp":
            return self.cam_ext.p_bc
        if name == "cq":
            return self.cam_ext.q_cb
        if name == "lp":
            return self.lid_ext.p_br
        if name == "lq":
            return self.lid_ext.q_rb
        if name == "ldt":
            return np.array([self.lid_ext.dt_br])
        raise KeyError(key)

    def retract(self, key, delta):
        name, k = key
        delta = np.asarray(delta, dtype=float)
        if name in QUAT_BLOCKS:
            q = quat_multiply(self.get_block(key), exp_map(delta))
            if name == "q":
                self.keyframes[k].q = q
            elif name == "cq":
                self.cam_ext.q_cb = q
            else:
                self.lid_ext.q_rb = q
            return
        if name == "p":
            self.keyframes[k].p = self.keyframes[k].p + delta
        elif name == "v":
            self.keyframes[k].v = self.keyframes[k].v + delta
        elif name == "bg":
            self.keyframes[k].bg = self.keyframes[k].bg + delta
        elif name == "ba":
            self.keyframes[k].ba = self.keyframes[k].ba + delta
        elif name == "dt":
            self.keyframes[k].dt_bc += float(delta[0])
        elif name == "cp":
            self.cam_ext.p_bc = self.cam_ext.p_bc + delta
        elif name == "lp":
            self.lid_ext.p_br = self.lid_ext.p_br + delta
        elif name == "ldt":
            self.lid_ext.dt_br += float(delta[0])
        else:
            raise KeyError(key)


def boxminus(name: str, value, reference) -> np.ndarray:
    """Local-coordinate difference value (-) reference for one block."""
    if name in QUAT_BLOCKS:
        return log_map(quat_multiply(quat_conjugate(reference), value))
    return np.atleast_1d(np.asarray(value, float) - np.asarray(reference, float))


# --------------------------------------------------------------------------
# factors (whitened residual + jacobian wrappers over the pure functions)
# --------------------------------------------------------------------------


def _kf_pose(window, k, cache):
    """Keyframe Pose, memoized per evaluation pass when a cache is given."""
    if cache is None:
        return window.keyframes[k].pose()
    key = ("pose", k)
    pose = cache.get(key)
    if pose is None:
        pose = window.keyframes[k].pose()
        cache[key] = pose
    return pose


def _whiten(r, cov, J):
    L = cholesky(cov, lower=True)
    rw = solve_triangular(L, r, lower=True)
    if J is None:
        return rw, None
    return rw, {k: solve_triangular(L, v, lower=True) for k, v in J.items()}


class Factor:
    kind = "generic"
    robust = False

    def keys(self):
        raise NotImplementedError

    def evaluate(self, window: WindowState, want_jacobian: bool = False,
                 cache: dict | None = None):
        """Whitened residual (and jacobian blocks keyed like the window)."""
        raise NotImplementedError


class ImuFactor(Factor):
    kind = "imu"

    def __init__(self, ki: int, kj: int, pre: PreintegratedImu):
        self.ki, self.kj, self.pre = ki, kj, pre
        cov = pre.covariance + np.eye(15) * 1e-14
        self._L = cholesky(cov, lower=True)

    def keys(self):
        out = []
        for k in (self.ki, self.kj):
            out += [("p", k), ("q", k), ("v", k), ("bg", k), ("ba", k)]
        return out

    def evaluate(self, window, want_jacobian=False, cache=None):
        si = window.keyframes[self.ki]
        sj = window.keyframes[self.kj]
        r, _ = preintegration_residual(si, sj, self.pre)
        rw = solve_triangular(self._L, r, lower=True)
        if not want_jacobian:
            return rw, None
        Jn = preintegration_jacobians(si, sj, self.pre)
        J = {}
        for suffix, k in (("i", self.ki), ("j", self.kj)):
            for name in ("p", "q", "v", "bg", "ba"):
                J[(name, k)] = solve_triangular(self._L, Jn[f"{name}_{suffix}"], lower=True)
        return rw, J


class TimeDelayFactor(Factor):
    kind = "timedelay"

    def __init__(self, ki: int, kj: int, interval: float, cfg: TimeDelayConfig):
        self.ki, self.kj = ki, kj
        self.interval = interval
        self.cfg = cfg

    def keys(self):
        return [("dt", self.ki), ("dt", self.kj)]

    def evaluate(self, window, want_jacobian=False, cache=None):
        r, var = time_delay_residual(window.keyframes[self.ki].dt_bc,
                                     window.keyframes[self.kj].dt_bc,
                                     self.interval, self.cfg)
        s = 1.0 / np.sqrt(var)
        rw = np.array([r * s])
        if not want_jacobian:
            return rw, None
        return rw, {("dt", self.ki): np.array([[-s]]), ("dt", self.kj): np.array([[s]])}


class _CameraFactor(Factor):
    robust = True

    def __init__(self, track: pa.LandmarkTrack, observer: int, sigma_u: float):
        self.track, self.observer, self.sigma_u = track, observer, sigma_u
        self._frames = sorted({track.anchor_zeta, track.anchor_eta, observer})

    def keys(self):
        out = []
        for k in self._frames:
            out += [("p", k), ("q", k), ("dt", k)]
        return out + [("cp", -1), ("cq", -1)]

    def _dicts(self, window, cache=None):
        poses = {k: _kf_pose(window, k, cache) for k in self._frames}
        dt_bc = {k: window.keyframes[k].dt_bc for k in self._frames}
        dthat = {k: window.keyframes[k].dthat_br for k in self._frames}
        return poses, dt_bc, dthat


class VisualFactor(_CameraFactor):
    kind = "visual"

    def evaluate(self, window, want_jacobian=False, cache=None):
        poses, dt_bc, dthat = self._dicts(window, cache)
        out = pa.visual_pa_residual(self.track, self.observer, poses, window.cam_ext,
                                    dt_bc, dthat, self.sigma_u, want_jacobian)
        s = 1.0 / self.sigma_u  # cov = sigma_u^2 I
        if not want_jacobian:
            return s * out[0], None
        return s * out[0], {k: s * v for k, v in out[2].items()}


class DepthFactor(_CameraFactor):
    kind = "depth"

    def evaluate(self, window, want_jacobian=False, cache=None):
        poses, dt_bc, dthat = self._dicts(window, cache)
        out = pa.lidar_depth_pa_residual(self.track, self.observer, poses, window.cam_ext,
                                         dt_bc, dthat, self.sigma_u, want_jacobian)
        w = np.array([1.0 / self.sigma_u, 1.0 / self.sigma_u, 1.0])  # diag cov
        if not want_jacobian:
            return w * out[0], None
        return w * out[0], {k: w[:, None] * v for k, v in out[2].items()}


class LidarPaFactor(Factor):
    kind = "lidar"
    robust = True

    def __init__(self, cluster: pa.PlaneCluster):
        self.cluster = cluster
        self._frames = sorted({k for k, _ in cluster.points})

    def keys(self):
        out = []
        for k in self._frames:
            out += [("p", k), ("q", k), ("v", k)]
        return out + [("lp", -1), ("lq", -1), ("ldt", -1)]

    def evaluate(self, window, want_jacobian=False, cache=None):
        frames = {
            k: pa.LidarFrameContext(_kf_pose(window, k, cache), window.keyframes[k].v,
                                    window.keyframes[k].angular_rate,
                                    window.keyframes[k].dthat_br)
            for k in self._frames
        }
        out = pa.lidar_pa_residual(self.cluster, frames, window.lid_ext,
                                   window.lid_ext.dt_br, want_jacobian, cache=cache)
        s = 1.0 / np.sqrt(out[1][0, 0])  # scalar residual
        if not want_jacobian:
            return s * out[0], None
        return s * out[0], {k: s * v for k, v in out[2].items()}


class F2mFactor(Factor):
    kind = "f2m"
    robust = True

    def __init__(self, meas: F2mPoseMeasurement):
        self.meas = meas
        self._L = cholesky(meas.covariance + np.eye(6) * 1e-12, lower=True)

    def keys(self):
        k = self.meas.keyframe_id
        return [("p", k), ("q", k), ("v", k), ("lp", -1), ("lq", -1), ("ldt", -1)]

    def evaluate(self, window, want_jacobian=False, cache=None):
        kf = window.keyframes[self.meas.keyframe_id]
        out = f2m_pose_residual(_kf_pose(window, self.meas.keyframe_id, cache),
                                window.lid_ext, self.meas, kf.v,
                                kf.angular_rate, window.lid_ext.dt_br, kf.dthat_br,
                                want_jacobian)
        rw = solve_triangular(self._L, out[0], lower=True)
        if not want_jacobian:
            return rw, None
        J = {k: solve_triangular(self._L, v, lower=True) for k, v in out[2].items()}
        return rw, J


class GaussianPriorFactor(Factor):
    """Independent Gaussian prior on a single block."""

    kind = "prior"

    def __init__(self, key, value, sigma):
        self.key = key
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        sigma = np.broadcast_to(np.atleast_1d(sigma), (BLOCK_DIMS[key[0]],))
        self._w = 1.0 / np.asarray(sigma, dtype=float)

    def keys(self):
        return [self.key]

    def evaluate(self, window, want_jacobian=False, cache=None):
        d = boxminus(self.key[0], window.get_block(self.key), self.value)
        rw = self._w * d
        if not want_jacobian:
            return rw, None
        return rw, {self.key: np.diag(self._w)}


class MarginalPriorFactor(Factor):
    kind = "marginal"

    def __init__(self, info: PriorInfo):
        self.info = info

    def keys(self):
        return list(self.info.keys)

    def evaluate(self, window, want_jacobian=False, cache=None):
        dx = np.concatenate([
            boxminus(k[0], window.get_block(k), self.info.lin[k]) for k in self.info.keys
        ]) if self.info.keys else np.zeros(0)
        rw = self.info.r0 + self.info.sqrt_info @ dx
        if not want_jacobian:
            return rw, None
        J, off = {}, 0
        for k in self.info.keys:
            d = BLOCK_DIMS[k[0]]
            J[k] = self.info.sqrt_info[:, off:off + d]
            off += d
        return rw, J


# --------------------------------------------------------------------------
# problem assembly and solving
# --------------------------------------------------------------------------


def robust_weight(residual_norm: float, delta: float) -> float:
    """Huber IRLS weight for a whitened residual norm."""
    if residual_norm <= delta:
        return 1.0
    return delta / residual_norm


def huber_cost(residual_norm: float, delta: float) -> float:
    if residual_norm <= delta:
        return residual_norm**2
    return delta * (2.0 * residual_norm - delta)


@dataclass
class AssembledProblem:
    blocks: list  # ordered free parameter blocks
    factors: list
    huber_delta: float = 1.0
    fixed: frozenset = frozenset()

    def __post_init__(self):
        self.index = {}
        off = 0
        for key in self.blocks:
            d = BLOCK_DIMS[key[0]]
            self.index[key] = (off, d)
            off += d
        self.dim = off

    @property
    def stats(self):
        counts: dict = {}
        rdim = 0
        for f in self.factors:
            counts[f.kind] = counts.get(f.kind, 0) + 1
        return counts

    def cost(self, window: WindowState) -> float:
        total = 0.0
        cache: dict = {}
        for f in self.factors:
            r, _ = f.evaluate(window, cache=cache)
            n = float(np.linalg.norm(r))
            total += huber_cost(n, self.huber_delta) if f.robust else n * n
        return total

    def linearize(self, window: WindowState):
        """Gauss-Newton normal equations (H, g) and robustified cost."""
        H = np.zeros((self.dim, self.dim))
        g = np.zeros(self.dim)
        cost = 0.0
        cache: dict = {}
        for f in self.factors:
            r, J = f.evaluate(window, want_jacobian=True, cache=cache)
            n = float(np.linalg.norm(r))
            if f.robust:
                cost += huber_cost(n, self.huber_delta)
                w = robust_weight(n, self.huber_delta)
            else:
                cost += n * n
                w = 1.0
            items = [(self.index[k], Jk) for k, Jk in J.items() if k in self.index]
            if not items:
                continue
            Jloc = np.hstack([Jk for _, Jk in items])
            idx = np.concatenate([np.arange(off, off + d) for (off, d), _ in items])
            JtW = w * Jloc.T
            g[idx] += JtW @ r
            H[np.ix_(idx, idx)] += JtW @ Jloc
        return H, g, cost


class IndefiniteSystemError(RuntimeError):
    """Damped normal equations not positive definite."""


@dataclass
class SolveStats:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    H: np.ndarray | None = None  # normal equations at the solution


def lm_solve(problem: AssembledProblem, window: WindowState,
             max_iterations: int = 30, rel_tol: float = 1e-8,
             grad_tol: float = 1e-10) -> SolveStats:
    """Levenberg-Marquardt on the manifold, updating window in place."""
    lam = 1e-6
    stats = SolveStats()
    H, g, cost = problem.linearize(window)
    stats.initial_cost = cost
    for it in range(max_iterations):
        stats.iterations = it + 1
        if np.linalg.norm(g, np.inf) < grad_tol:
            stats.converged = True
            break
        accepted = False
        solved_any = False
        for _ in range(12):
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                c = cho_factor(damped, lower=True)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            solved_any = True
            dx = cho_solve(c, -g)
            trial = window.copy()
            for key, (off, d) in problem.index.items():
                trial.retract(key, dx[off:off + d])
            new_cost = problem.cost(trial)
            if new_cost <= cost + 1e-15:
                window.keyframes = trial.keyframes
                window.cam_ext = trial.cam_ext
                window.lid_ext = trial.lid_ext
                lam = max(lam * 0.3, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if not solved_any:
                raise IndefiniteSystemError("damped normal equations never factored")
            # no step decreases the cost: numerically at a local minimum
            stats.converged = True
            break
        prev = cost
        H, g, cost = problem.linearize(window)
        if prev - cost < rel_tol * max(prev, 1e-300):
            stats.converged = True
            break
    stats.final_cost = cost
    stats.H = H
    return stats


def _eig_sqrt_info(H, b, floor=1e-10):
    """Square-root information form of 0.5 dx' H dx + b' dx via eigendecomposition."""
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    keep = w > floor * max(w.max(), 1.0)
    s = w[keep]
    U = V[:, keep]
    sqrt_info = np.sqrt(s)[:, None] * U.T
    r0 = (1.0 / np.sqrt(s)) * (U.T @ b)
    return sqrt_info, r0


def marginalize_factors(window: WindowState, factors: list, marg_keys: list,
                        allowed_keys=None) -> PriorInfo:
    """Schur-complement the given blocks out of the given factors.

    Keys outside allowed_keys (when given) are held constant and excluded
    from the prior."""
    marg_keys = list(marg_keys)
    retained = []
    for f in factors:
        for k in f.keys():
            if k in marg_keys or k in retained:
                continue
            if allowed_keys is not None and k not in allowed_keys:
                continue
            retained.append(k)
    retained.sort(key=lambda k: (k[1], k[0]))
    blocks = marg_keys + retained
    prob = AssembledProblem(blocks, factors)
    H, g, _ = prob.linearize(window)
    nm = sum(BLOCK_DIMS[k[0]] for k in marg_keys)

    Hmm = H[:nm, :nm]
    Hmr = H[:nm, nm:]
    Hrr = H[nm:, nm:]
    gm, gr = g[:nm], g[nm:]
    w, V = np.linalg.eigh(0.5 * (Hmm + Hmm.T))
    inv = np.where(w > 1e-10 * max(w.max(), 1.0), 1.0 / np.maximum(w, 1e-300), 0.0)
    Hmm_inv = (V * inv) @ V.T
    Hn = Hrr - Hmr.T @ Hmm_inv @ Hmr
    bn = gr - Hmr.T @ (Hmm_inv @ gm)
    sqrt_info, r0 = _eig_sqrt_info(Hn, bn)
    lin = {k: np.array(window.get_block(k), copy=True) for k in retained}
    return PriorInfo(retained, lin, sqrt_info, r0)


def marginal_covariance(problem: AssembledProblem, window: WindowState, keys):
    """Joint covariance block of the requested keys at the current solution."""
    H, _, _ = problem.linearize(window)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteSystemError("singular information matrix") from exc
    idx = []
    for k in keys:
        off, d = problem.index[k]
        idx += list(range(off, off + d))
    return cov[np.ix_(idx, idx)]


def yaw_std(window: WindowState, kf_id: int, cov_q: np.ndarray) -> float:
    """Yaw standard deviation (rad) from the body-frame attitude covariance."""
    R = window.keyframes[kf_id].pose().rotation_matrix()
    a = R.T @ np.array([0.0, 0.0, 1.0])  # world z expressed in body axes
    return float(np.sqrt(max(a @ cov_q @ a, 0.0)))


# --------------------------------------------------------------------------
# the per-frame pipeline
# --------------------------------------------------------------------------


@dataclass
class EstimatorConfig:
    window_size: int = 10
    mode: str = "full"
    huber_delta: float = 1.0
    sigma_u: float = 1e-3  # normalized-coordinate pixel noise
    max_iterations: int = 12
    rel_tol: float = 1e-8  # relative cost-decrease convergence threshold
    imu_noise: ImuNoiseConfig = field(default_factory=ImuNoiseConfig)
    time_delay: TimeDelayConfig = field(default_factory=TimeDelayConfig)
    f2m_sigma_pt: float = 0.02
    f2m_min_points: int = 20
    map_leaf_size: float = 0.1
    max_cluster_points: int = 24
    min_track_length: int = 2
    max_tracks: int = 40
    max_clusters: int = 30
    # initial prior standard deviations
    sigma_p0: float = 1e-3
    sigma_q0: float = 1e-3
    sigma_v0: float = 0.05
    sigma_bg0: float = 5e-3
    sigma_ba0: float = 5e-2
    sigma_cam_t: float = 0.05
    sigma_cam_r: float = 0.05
    sigma_lid_t: float = 0.05
    sigma_lid_r: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class FrameBundle:
    stamp: float  # shared camera/LiDAR stamp on the sensor clock
    features: list = field(default_factory=list)  # (landmark_id, p_u, v_u, depth|None)
    clusters: list = field(default_factory=list)  # (cluster_id, p_r)
    scan: np.ndarray | None = None


@dataclass
class OdometryOutput:
    timestamp: float
    pose: Pose
    velocity: np.ndarray


class Estimator:
    """Sliding-window LiDAR-visual-inertial odometry."""

    def __init__(self, cam_ext: CameraImuExtrinsics, lid_ext: LidarImuExtrinsics,
                 config: EstimatorConfig | None = None):
        self.cfg = config or EstimatorConfig()
        self.window = WindowState(copy.deepcopy(cam_ext), copy.deepcopy(lid_ext),
                                  self.cfg.window_size)
        self.map = GlobalPlaneMap(leaf_size=self.cfg.map_leaf_size)
        self._imu: list = []
        self._next_id = 0
        self._observations: dict = {}  # landmark_id -> list of (kf, FeatureObservation)
        self._depths: dict = {}  # landmark_id -> (kf, depth, sigma)
        self._clusters: dict = {}  # cluster_id -> {kf: [p_r, ...]}
        self._scans: dict = {}  # kf -> scan array
        self._preints: dict = {}  # (ki, kj) -> PreintegratedImu
        self._f2m: dict = {}  # kf -> F2mPoseMeasurement
        self._static_priors: list[GaussianPriorFactor] = []
        self._finalized: list[OdometryOutput] = []
        self.yaw_std_series: list = []  # (timestamp, yaw std rad)
        self.solve_log: list[SolveStats] = []

    # -- properties ----------------------------------------------------------

    @property
    def uses_camera(self) -> bool:
        return self.cfg.mode != "lio"

    @property
    def uses_lidar_planes(self) -> bool:
        return self.cfg.mode != "vio"

    @property
    def uses_f2m(self) -> bool:
        return self.cfg.mode not in ("no_f2m", "vio")

    @property
    def calibrates(self) -> bool:
        return self.cfg.mode != "no_calib"

    # -- setup ----------------------------------------------------------------

    def set_imu(self, samples):
        self._imu = sorted(samples, key=lambda s: s.timestamp)

    def initialize(self, bundle: FrameBundle, p, q, v, bg=None, ba=None,
                   dt_bc: float | None = None):
        """Seed the first keyframe from an externally supplied state."""
        if self.window.keyframes:
            raise RuntimeError("already initialized")
        dthat = self.window.lid_ext.dt_br
        state = KeyframeState(bundle.stamp + dthat, p, q, v,
                              np.zeros(3) if bg is None else bg,
                              np.zeros(3) if ba is None else ba,
                              self.cfg.time_delay.initial_dt_bc if dt_bc is None else dt_bc,
                              dthat_br=dthat,
                              angular_rate=self._gyro_at(bundle.stamp + dthat,
                                                         np.zeros(3) if bg is None else bg))
        kf = self._next_id
        self._next_id += 1
        self.window.add(kf, state)
        self._store_measurements(kf, bundle)
        self._make_initial_priors(kf)
        if self.uses_f2m and bundle.scan is not None:
            insert_marginalized_frame(bundle.scan, state.pose(), self.window.lid_ext,
                                      self.map, kf)

    def _gyro_at(self, t, bg):
        if not self._imu:
            return np.zeros(3)
        times = np.array([s.timestamp for s in self._imu])
        i = int(np.clip(np.searchsorted(times, t), 0, len(self._imu) - 1))
        return self._imu[i].angular_rate - np.asarray(bg, float)

    def _store_measurements(self, kf, bundle: FrameBundle):
        if self.uses_camera:
            for landmark_id, p_u, v_u, depth in bundle.features:
                o = pa.FeatureObservation(kf, p_u, 1.0, v_u)
                self._observations.setdefault(landmark_id, []).append((kf, o))
                if depth is not None and landmark_id not in self._depths:
                    self._depths[landmark_id] = (kf, float(depth[0]), float(depth[1]))
        if self.uses_lidar_planes:
            for cluster_id, p_r in bundle.clusters:
                self._clusters.setdefault(cluster_id, {}).setdefault(kf, []).append(
                    np.asarray(p_r, dtype=float))
        if bundle.scan is not None:
            self._scans[kf] = np.asarray(bundle.scan, dtype=float)

    # -- per-frame pipeline -----------------------------------------------------

    def process_frame(self, bundle: FrameBundle) -> OdometryOutput:
        if not self.window.keyframes:
            raise RuntimeError("call initialize() first")
        ids = self.window.ordered_ids()
        last = self.window.keyframes[ids[-1]]
        t_k = bundle.stamp + last.dthat_br
        segment = slice_samples(self._imu, last.timestamp, t_k)
        pre = integrate(segment, last.bg, last.ba, self.cfg.imu_noise)
        poses, vels = mechanize(last, segment)
        _, pose_pred = poses[-1]
        state = KeyframeState(t_k, pose_pred.t, pose_pred.q, vels[-1],
                              last.bg.copy(), last.ba.copy(), last.dt_bc,
                              dthat_br=last.dthat_br,
                              angular_rate=segment[-1].angular_rate - last.bg)
        kf = self._next_id
        self._next_id += 1
        self.window.add(kf, state)
        self._preints[(ids[-1], kf)] = pre
        self._store_measurements(kf, bundle)

        if self.uses_f2m and bundle.scan is not None and len(self.map):
            lidar_pred = pose_pred.compose(self.window.lid_ext.pose())
            try:
                self._f2m[kf] = estimate_f2m_pose(
                    bundle.scan, lidar_pred, self.map, keyframe_id=kf,
                    sigma_pt=self.cfg.f2m_sigma_pt,
                    min_points=self.cfg.f2m_min_points)
            except (F2mObservabilityError, F2mConvergenceError) as exc:
                log.warning("F2M skipped for keyframe %d: %s", kf, exc)

        problem = self.build_problem()
        stats = lm_solve(problem, self.window,
                         max_iterations=self.cfg.max_iterations,
                         rel_tol=self.cfg.rel_tol)
        self.solve_log.append(stats)
        self._record_yaw_std(problem, kf, stats.H)

        if len(self.window.keyframes) > self.cfg.window_size:
            self.marginalize_oldest()
        s = self.window.keyframes[kf]
        return OdometryOutput(s.timestamp, s.pose(), s.v.copy())

    def _record_yaw_std(self, problem, kf, H=None):
        key = ("q", kf)
        if key not in problem.index:
            return
        try:
            if H is not None:
                cov_full = np.linalg.inv(H)
                off, d = problem.index[key]
                cov = cov_full[off:off + d, off:off + d]
            else:
                cov = marginal_covariance(problem, self.window, [key])
        except (np.linalg.LinAlgError, IndefiniteSystemError):
            return
        t = self.window.keyframes[kf].timestamp
        self.yaw_std_series.append((t, yaw_std(self.window, kf, cov)))

    # -- problem assembly ---------------------------------------------------------

    def _make_initial_priors(self, k0: int):
        """Anchor priors, created once at initialization time."""
        s0 = self.window.keyframes[k0]
        cfg = self.cfg
        out = [
            GaussianPriorFactor(("p", k0), s0.p.copy(), cfg.sigma_p0),
            GaussianPriorFactor(("q", k0), s0.q.copy(), cfg.sigma_q0),
            GaussianPriorFactor(("v", k0), s0.v.copy(), cfg.sigma_v0),
            GaussianPriorFactor(("bg", k0), s0.bg.copy(), cfg.sigma_bg0),
            GaussianPriorFactor(("ba", k0), s0.ba.copy(), cfg.sigma_ba0),
        ]
        if self.calibrates:
            ext_c, ext_l = self.window.cam_ext, self.window.lid_ext
            out += [
                GaussianPriorFactor(("dt", k0), np.array([s0.dt_bc]),
                                    cfg.time_delay.prior_sigma_dt_bc),
                GaussianPriorFactor(("cp", -1), ext_c.p_bc.copy(), cfg.sigma_cam_t),
                GaussianPriorFactor(("cq", -1), ext_c.q_cb.copy(), cfg.sigma_cam_r),
                GaussianPriorFactor(("lp", -1), ext_l.p_br.copy(), cfg.sigma_lid_t),
                GaussianPriorFactor(("lq", -1), ext_l.q_rb.copy(), cfg.sigma_lid_r),
                GaussianPriorFactor(("ldt", -1), np.array([ext_l.dt_br]),
                                    cfg.time_delay.prior_sigma_dt_br),
            ]
        self._static_priors = out

    def _tracks_in_window(self):
        ids = set(self.window.keyframes)
        poses = {k: pa.camera_pose_from_state(self.window.keyframes[k].pose(),
                                              self.window.cam_ext)
                 for k in ids}
        tracks = []
        for landmark_id, obs_list in self._observations.items():
            in_win = [(k, o) for k, o in obs_list if k in ids]
            if len(in_win) < max(2, self.cfg.min_track_length):
                continue
            observations = [o for _, o in in_win]
            depth = self._depths.get(landmark_id)
            lidar_depth = None
            zeta = None
            if depth is not None and depth[0] in ids:
                zeta = depth[0]
                lidar_depth = (depth[1], depth[2])
            try:
                probe = pa.LandmarkTrack(
                    landmark_id, observations,
                    observations[0].keyframe_id if zeta is None else zeta,
                    observations[-1].keyframe_id
                    if observations[-1].keyframe_id != (observations[0].keyframe_id if zeta is None else zeta)
                    else observations[0].keyframe_id,
                    lidar_depth=lidar_depth)
                z, e = pa.select_anchors(probe, poses)
                track = pa.LandmarkTrack(landmark_id, observations, z, e,
                                         lidar_depth=lidar_depth)
            except (pa.DegenerateParallaxError, ValueError, KeyError):
                continue
            tracks.append(track)
        if len(tracks) > self.cfg.max_tracks:
            tracks.sort(key=lambda tr: -len(tr.observations))
            tracks = tracks[:self.cfg.max_tracks]
        return tracks

    def _clusters_in_window(self):
        ids = set(self.window.keyframes)
        out = []
        for cluster_id, per_kf in self._clusters.items():
            pts = []
            budget = max(2, self.cfg.max_cluster_points // max(len(per_kf), 1))
            for k, plist in per_kf.items():
                if k not in ids:
                    continue
                for p in plist[:budget]:
                    pts.append((k, p))
            if len(pts) < 4 or len({k for k, _ in pts}) < 2:
                continue
            out.append(pa.PlaneCluster(cluster_id, pts))
        if len(out) > self.cfg.max_clusters:
            out.sort(key=lambda c: -len(c.points))
            out = out[:self.cfg.max_clusters]
        return out

    def build_problem(self) -> AssembledProblem:
        ids = self.window.ordered_ids()
        present = set(ids)
        factors: list[Factor] = [
            f for f in self._static_priors
            if all(k[1] == -1 or k[1] in present for k in f.keys())
        ]
        if self.window.prior is not None:
            factors.append(MarginalPriorFactor(self.window.prior))

        for ki, kj in zip(ids, ids[1:]):
            pre = self._preints.get((ki, kj))
            if pre is None:
                raise ValueError(f"missing IMU preintegration {ki}->{kj}")
            factors.append(ImuFactor(ki, kj, pre))
            if self.calibrates:
                dt = (self.window.keyframes[kj].timestamp
                      - self.window.keyframes[ki].timestamp)
                factors.append(TimeDelayFactor(ki, kj, dt, self.cfg.time_delay))

        if self.uses_camera:
            for track in self._tracks_in_window():
                kfs = {o.keyframe_id for o in track.observations
                       if o.keyframe_id in self.window.keyframes}
                cls = DepthFactor if track.lidar_depth is not None else VisualFactor
                for j in sorted(kfs):
                    if j == track.anchor_zeta:
                        continue
                    factors.append(cls(track, j, self.cfg.sigma_u))

        if self.uses_lidar_planes:
            for cluster in self._clusters_in_window():
                factors.append(LidarPaFactor(cluster))

        if self.uses_f2m:
            for k in (ids[0], ids[-1]):
                if k in self._f2m:
                    factors.append(F2mFactor(self._f2m[k]))

        blocks = []
        for k in ids:
            blocks += [("p", k), ("q", k), ("v", k), ("bg", k), ("ba", k), ("dt", k)]
        blocks += [("cp", -1), ("cq", -1), ("lp", -1), ("lq", -1), ("ldt", -1)]
        fixed = frozenset()
        if not self.calibrates:
            fixed = frozenset(b for b in blocks if b[0] in CALIB_BLOCKS)
            blocks = [b for b in blocks if b not in fixed]
        return AssembledProblem(blocks, factors, self.cfg.huber_delta, fixed)

    # -- marginalization -----------------------------------------------------------

    def marginalize_oldest(self):
        ids = self.window.ordered_ids()
        k0 = ids[0]
        problem = self.build_problem()
        marg_keys = [b for b in (("p", k0), ("q", k0), ("v", k0), ("bg", k0),
                                 ("ba", k0), ("dt", k0)) if b in problem.index]
        touching = []
        for f in problem.factors:
            if isinstance(f, F2mFactor) and f.meas.keyframe_id == k0 \
                    and self.cfg.mode != "marg_f2m":
                continue  # discard the absolute F2M information outright
            fkeys = [k for k in f.keys() if k in problem.index]
            if any(k in marg_keys for k in fkeys):
                touching.append(f)
        new_prior = marginalize_factors(self.window, touching, marg_keys,
                                        allowed_keys=set(problem.index))

        state0 = self.window.keyframes.pop(k0)
        self.window.prior = new_prior
        self._finalized.append(OdometryOutput(state0.timestamp, state0.pose(),
                                              state0.v.copy()))
        if self.uses_f2m and k0 in self._scans:
            insert_marginalized_frame(self._scans[k0], state0.pose(),
                                      self.window.lid_ext, self.map, k0)
        self._cleanup(k0)

    def _cleanup(self, k0):
        self._scans.pop(k0, None)
        self._f2m.pop(k0, None)
        for key in [k for k in self._preints if k[0] == k0]:
            self._preints.pop(key)
        for landmark_id in list(self._observations):
            obs = [(k, o) for k, o in self._observations[landmark_id] if k != k0]
            if obs:
                self._observations[landmark_id] = obs
            else:
                del self._observations[landmark_id]
                self._depths.pop(landmark_id, None)
        for cluster_id in list(self._clusters):
            self._clusters[cluster_id].pop(k0, None)
            if not self._clusters[cluster_id]:
                del self._clusters[cluster_id]

    # -- outputs ----------------------------------------------------------------

    def trajectory(self) -> list[OdometryOutput]:
        """Finalized poses plus the current window, oldest first."""
        tail = [OdometryOutput(s.timestamp, s.pose(), s.v.copy())
                for _, s in sorted(self.window.keyframes.items())]
        return self._finalized + tail
