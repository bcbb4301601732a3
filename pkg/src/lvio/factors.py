"""Pose-only measurement factors: visual F2F, LiDAR-depth, and LiDAR plane.

All residuals are pure functions of (window states, measurement) and return
analytic jacobians w.r.t. the parameter blocks they touch. Blocks are keyed
by (name, keyframe_id); window-global blocks (extrinsics, LiDAR time delay)
use id -1:

    ("p", k)   keyframe position            3
    ("q", k)   keyframe attitude (right multiplicative perturbation) 3
    ("v", k)   keyframe velocity            3
    ("dt", k)  camera time delay            1
    ("cp", -1) camera-IMU lever arm         3
    ("cq", -1) camera-IMU rotation          3
    ("lp", -1) LiDAR-IMU lever arm          3
    ("lq", -1) LiDAR-IMU rotation           3
    ("ldt", -1) LiDAR time delay            1

The visual residual follows the unit-sphere reading of the bearing
difference: both the predicted point and the observed normalized coordinate
are renormalized to unit vectors before subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import CameraImuExtrinsics, LidarImuExtrinsics
from .geometry import Pose, exp_map, quat_to_matrix, skew, so3_right_jacobian

# Parallax below this is treated as degenerate and the factor is skipped.
THETA_MIN = 1e-3

# Floor on the std of the plane-thickness residual (units m^2): the square
# of a typical 2 mm LiDAR range-noise scale.
PLANE_COV_FLOOR = (2.0e-3) ** 2

_B = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


class DegenerateParallaxError(ValueError):
    """Parallax too small to anchor a pose-only depth."""


class CheiralityError(ValueError):
    """Predicted landmark behind the observing camera."""


class PlaneFitError(ValueError):
    """Points do not determine a plane."""


@dataclass
class FeatureObservation:
    keyframe_id: int
    p_u: np.ndarray  # (x, y, 1) normalized camera coordinate
    pixel_sigma: float = 1.0
    v_u: np.ndarray = field(default_factory=lambda: np.zeros(2))  # 1/s

    def __post_init__(self):
        self.p_u = np.asarray(self.p_u, dtype=float)
        self.v_u = np.asarray(self.v_u, dtype=float)
        if self.p_u.shape != (3,) or self.p_u[2] != 1.0:
            raise ValueError("p_u must be (x, y, 1)")
        if self.pixel_sigma <= 0:
            raise ValueError("pixel_sigma must be positive")


@dataclass
class LandmarkTrack:
    landmark_id: int
    observations: list
    anchor_zeta: int
    anchor_eta: int
    lidar_depth: tuple | None = None  # (depth m, sigma m)

    def __post_init__(self):
        if len(self.observations) < 2:
            raise ValueError("track needs at least 2 observations")
        if self.anchor_zeta == self.anchor_eta:
            raise ValueError("anchors must differ")
        ids = {o.keyframe_id for o in self.observations}
        if self.anchor_zeta not in ids or self.anchor_eta not in ids:
            raise ValueError("anchors must be observed")
        if self.lidar_depth is not None and self.lidar_depth[0] <= 0:
            raise ValueError("lidar depth must be positive")

    def observation(self, keyframe_id: int) -> FeatureObservation:
        for o in self.observations:
            if o.keyframe_id == keyframe_id:
                return o
        raise KeyError(keyframe_id)


@dataclass
class PlaneCluster:
    cluster_id: int
    points: list  # of (keyframe_id, p_r 3-vector in the LiDAR frame)
    range_sigma: float = 0.02

    def __post_init__(self):
        if len(self.points) < 4:
            raise ValueError("cluster needs at least 4 points")
        if len({k for k, _ in self.points}) < 2:
            raise ValueError("cluster must span at least 2 keyframes")


@dataclass
class PlaneModel:
    normal: np.ndarray
    offset: float  # plane: normal . x + offset = 0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-9:
            self.normal = self.normal / n

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.normal + self.offset


def camera_pose_from_state(body: Pose, ext: CameraImuExtrinsics) -> Pose:
    """World camera pose from body pose and camera-IMU extrinsics."""
    return body.compose(ext.pose())


def lidar_pose_from_state(body: Pose, ext: LidarImuExtrinsics) -> Pose:
    return body.compose(ext.pose())


def pose_only_depth(u_zeta, u_eta, pose_zeta: Pose, pose_eta: Pose,
                    theta_min: float = THETA_MIN):
    """Landmark depth in the zeta camera from the two anchor poses.

    Returns (depth, parallax). Raises DegenerateParallaxError when the
    parallax is below theta_min.
    """
    Rz = pose_zeta.rotation_matrix()
    Re = pose_eta.rotation_matrix()
    p_ez = Re.T @ (pose_zeta.t - pose_eta.t)
    theta = np.linalg.norm(np.cross(u_eta, Re.T @ (Rz @ u_zeta)))
    if theta < theta_min:
        raise DegenerateParallaxError(f"parallax {theta} below {theta_min}")
    return float(np.linalg.norm(np.cross(u_eta, p_ez)) / theta), float(theta)


def select_anchors(track: LandmarkTrack, camera_poses: dict,
                   theta_min: float = THETA_MIN):
    """(zeta, eta): zeta = first observation (or LiDAR-depth frame),
    eta = the observing frame maximizing the parallax."""
    obs = [o for o in track.observations if o.keyframe_id in camera_poses]
    if len(obs) < 2:
        raise DegenerateParallaxError("fewer than 2 observations in window")
    if track.lidar_depth is not None:
        zeta = track.anchor_zeta  # depth-associated frame, set by the front end
    else:
        zeta = obs[0].keyframe_id
    uz = track.observation(zeta).p_u
    best, best_theta = None, -1.0
    for o in obs:
        if o.keyframe_id == zeta:
            continue
        try:
            _, theta = pose_only_depth(uz, o.p_u, camera_poses[zeta],
                                       camera_poses[o.keyframe_id], theta_min=0.0)
        except DegenerateParallaxError:
            continue
        if theta > best_theta:
            best, best_theta = o.keyframe_id, theta
    if best is None or best_theta < theta_min:
        raise DegenerateParallaxError("no anchor pair with usable parallax")
    return zeta, best


def _cam_frame(body: Pose, ext: CameraImuExtrinsics):
    Rb = body.rotation_matrix()
    Rc = Rb @ quat_to_matrix(ext.q_cb)
    tc = body.t + Rb @ ext.p_bc
    return Rb, Rc, tc


def _accumulate(J, key, val):
    if key in J:
        J[key] = J[key] + val
    else:
        J[key] = val


def _chain_cam_to_blocks(J, frame_id, d_t, d_f, d_u, Rb, ext, v_u):
    """Chain residual partials w.r.t. one camera frame's primitives
    (translation d_t, rotation d_f, compensated observation d_u) into
    parameter blocks."""
    Rcb = quat_to_matrix(ext.q_cb)
    _accumulate(J, ("p", frame_id), d_t)
    _accumulate(J, ("q", frame_id), d_f @ Rcb.T - d_t @ (Rb @ skew(ext.p_bc)))
    _accumulate(J, ("cp", -1), d_t @ Rb)
    _accumulate(J, ("cq", -1), d_f)
    dudt = np.array([[-v_u[0]], [-v_u[1]], [0.0]])
    _accumulate(J, ("dt", frame_id), d_u @ dudt)


def _depth_partials(uz, ue, Rz, Re, tz, te):
    """Pose-only depth and its partials w.r.t. camera primitives.

    Returns (d, theta, partials) with partials keyed 'tz','te','fz','fe'
    (1x3) and 'uz','ue' (1x3)."""
    w = tz - te
    p_ez = Re.T @ w
    a = np.cross(ue, p_ez)
    na = np.linalg.norm(a)
    m = Rz @ uz
    s = Re.T @ m
    tv = np.cross(ue, s)
    nt = np.linalg.norm(tv)
    if nt < THETA_MIN:
        raise DegenerateParallaxError(f"parallax {nt} below {THETA_MIN}")
    d = na / nt

    ra = (a / (na * nt))[None, :] if na > 0 else np.zeros((1, 3))
    rt = (-na * tv / nt**3)[None, :]
    rpez = ra @ skew(ue)
    rs = rt @ skew(ue)

    P = {
        "tz": rpez @ Re.T,
        "te": -rpez @ Re.T,
        "fe": rpez @ skew(p_ez) + rs @ skew(s),
        "fz": (rs @ Re.T) @ (-Rz @ skew(uz)),
        "uz": (rs @ Re.T) @ Rz,
        "ue": -ra @ skew(p_ez) - rt @ skew(s),
    }
    aux = {"p_ez": p_ez, "m": m}
    return d, nt, P, aux


def _bearing_partials(d, m, uj, Rj, tz, tj, d_is_state: bool):
    """Partials of the 2-vector bearing residual w.r.t. camera primitives.

    Returns (r, scale dr/dd, partials dict, phat)."""
    mh = Rj.T @ m
    h = Rj.T @ (tz - tj)
    phat = d * mh + h
    if phat[2] <= 0:
        raise CheiralityError("landmark behind observing camera")
    npn = np.linalg.norm(phat)
    f = phat / npn
    nuj = np.linalg.norm(uj)
    uhat = uj / nuj
    r = _B @ (f - uhat)

    G = _B @ (np.eye(3) - np.outer(f, f)) / npn
    dr_dd = G @ mh
    P = {
        "tz": G @ Rj.T,
        "tj": -G @ Rj.T,
        "fj": d * (G @ skew(mh)) + G @ skew(h),
        "fz": d * (G @ Rj.T),  # to be composed with dm/dfz by caller
        "uj": -_B @ (np.eye(3) - np.outer(uhat, uhat)) / nuj,
    }
    return r, dr_dd, G, P


def _compensated_obs(track, frame_id, dt_bc, dthat):
    o = track.observation(frame_id)
    shift = dt_bc.get(frame_id, 0.0) - dthat.get(frame_id, 0.0)
    u = o.p_u.copy()
    u[0] -= o.v_u[0] * shift
    u[1] -= o.v_u[1] * shift
    return u, o.v_u


def visual_pa_residual(track: LandmarkTrack, observer: int, body_poses: dict,
                       ext: CameraImuExtrinsics, dt_bc: dict | None = None,
                       dthat: dict | None = None, sigma_u: float = 1e-3,
                       want_jacobian: bool = False):
    """Visual pose-only residual of observer j against anchors (zeta, eta).

    Returns (residual 2-vector, 2x2 covariance[, jacobian blocks]).
    """
    dt_bc = dt_bc or {}
    dthat = dthat or {}
    z, e, j = track.anchor_zeta, track.anchor_eta, observer
    if j == z:
        raise ValueError("observer must differ from anchor zeta")

    uz, vz = _compensated_obs(track, z, dt_bc, dthat)
    ue, ve = _compensated_obs(track, e, dt_bc, dthat)
    uj, vj = _compensated_obs(track, j, dt_bc, dthat)

    Rbz, Rz, tz = _cam_frame(body_poses[z], ext)
    Rbe, Re, te = _cam_frame(body_poses[e], ext)
    Rbj, Rj, tj = _cam_frame(body_poses[j], ext)

    d, _, DP, aux = _depth_partials(uz, ue, Rz, Re, tz, te)
    r, dr_dd, G, BP = _bearing_partials(d, aux["m"], uj, Rj, tz, tj, True)
    cov = np.eye(2) * sigma_u**2
    if not want_jacobian:
        return r, cov

    dr_dd = dr_dd[:, None]  # (2,1)
    # per-role partials w.r.t. camera primitives (2x3 each)
    t_z = dr_dd @ DP["tz"] + BP["tz"]
    t_e = dr_dd @ DP["te"]
    t_j = BP["tj"]
    f_z = dr_dd @ DP["fz"] + BP["fz"] @ (-Rz @ skew(uz))
    f_e = dr_dd @ DP["fe"]
    f_j = BP["fj"]
    u_z = dr_dd @ DP["uz"] + BP["fz"] @ Rz
    u_e = dr_dd @ DP["ue"]
    u_j = BP["uj"]

    J: dict = {}
    _chain_cam_to_blocks(J, z, t_z, f_z, u_z, Rbz, ext, vz)
    _chain_cam_to_blocks(J, e, t_e, f_e, u_e, Rbe, ext, ve)
    _chain_cam_to_blocks(J, j, t_j, f_j, u_j, Rbj, ext, vj)
    return r, cov, J


def lidar_depth_pa_residual(track: LandmarkTrack, observer: int, body_poses: dict,
                            ext: CameraImuExtrinsics, dt_bc: dict | None = None,
                            dthat: dict | None = None, sigma_u: float = 1e-3,
                            want_jacobian: bool = False):
    """LiDAR-depth pose-only residual: the bearing residual evaluated at the
    measured depth, stacked with the whitened depth discrepancy
    (d_pose - d_meas) / sigma_d."""
    if track.lidar_depth is None:
        raise ValueError("track has no LiDAR depth")
    dt_bc = dt_bc or {}
    dthat = dthat or {}
    d_meas, sigma_d = track.lidar_depth
    z, e, j = track.anchor_zeta, track.anchor_eta, observer
    if j == z:
        raise ValueError("observer must differ from anchor zeta")

    uz, vz = _compensated_obs(track, z, dt_bc, dthat)
    ue, ve = _compensated_obs(track, e, dt_bc, dthat)
    uj, vj = _compensated_obs(track, j, dt_bc, dthat)

    Rbz, Rz, tz = _cam_frame(body_poses[z], ext)
    Rbe, Re, te = _cam_frame(body_poses[e], ext)
    Rbj, Rj, tj = _cam_frame(body_poses[j], ext)

    d_pose, _, DP, aux = _depth_partials(uz, ue, Rz, Re, tz, te)
    rb, _, G, BP = _bearing_partials(d_meas, aux["m"], uj, Rj, tz, tj, False)
    r = np.array([rb[0], rb[1], (d_pose - d_meas) / sigma_d])
    cov = np.diag([sigma_u**2, sigma_u**2, 1.0])
    if not want_jacobian:
        return r, cov

    def stack(bearing, depth_row):
        out = np.zeros((3, bearing.shape[1]))
        out[0:2] = bearing
        out[2] = depth_row / sigma_d
        return out

    zeros13 = np.zeros((1, 3))
    t_z = stack(BP["tz"], DP["tz"][0])
    t_e = stack(np.zeros((2, 3)), DP["te"][0])
    t_j = stack(BP["tj"], np.zeros(3))
    f_z = stack(BP["fz"] @ (-Rz @ skew(uz)), DP["fz"][0])
    f_e = stack(np.zeros((2, 3)), DP["fe"][0])
    f_j = stack(BP["fj"], np.zeros(3))
    u_z = stack(BP["fz"] @ Rz, DP["uz"][0])
    u_e = stack(np.zeros((2, 3)), DP["ue"][0])
    u_j = stack(BP["uj"], np.zeros(3))

    J: dict = {}
    _chain_cam_to_blocks(J, z, t_z, f_z, u_z, Rbz, ext, vz)
    _chain_cam_to_blocks(J, e, t_e, f_e, u_e, Rbe, ext, ve)
    _chain_cam_to_blocks(J, j, t_j, f_j, u_j, Rbj, ext, vj)
    return r, cov, J


def fit_plane(points: np.ndarray) -> PlaneModel:
    """Least-squares plane through >= 3 non-collinear points.

    Centroid subtraction + smallest eigenvector of the 3x3 scatter matrix;
    the sign is fixed so the largest-magnitude normal component is positive.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 3:
        raise PlaneFitError("need at least 3 points of dimension 3")
    c = pts.mean(axis=0)
    q = pts - c
    S = q.T @ q
    w, V = np.linalg.eigh(S)
    if w[1] <= max(1e-12, 1e-9 * w[2]):
        raise PlaneFitError("points are (nearly) collinear")
    n = V[:, 0]
    k = int(np.argmax(np.abs(n)))
    if n[k] < 0:
        n = -n
    return PlaneModel(n, float(-n @ c))


@dataclass
class LidarFrameContext:
    """Per-keyframe quantities the LiDAR residuals need."""

    pose: Pose
    velocity: np.ndarray
    angular_rate: np.ndarray  # bias-corrected gyro near the keyframe epoch
    dthat_br: float = 0.0  # delay the frame was preprocessed with


def _compensated_lidar_pose(ctx: LidarFrameContext, dt_br: float):
    delta = dt_br - ctx.dthat_br
    R = ctx.pose.rotation_matrix()
    phi = ctx.angular_rate * delta
    E = quat_to_matrix(exp_map(phi))
    return R, E, ctx.pose.t + ctx.velocity * delta, phi, delta


def _cluster_by_frame(cluster: PlaneCluster, frames: dict, ext: LidarImuExtrinsics,
                      dt_br: float, cache: dict | None = None):
    """World-frame projection of a cluster, grouped per keyframe.

    Returns (groups, world, Rrb) where groups maps keyframe ->
    (ctx, R, E, RE, pb, phi, delta, Jr, pts_r (n,3), y (n,3), world (n,3)).
    `cache` memoizes per-keyframe pose quantities across clusters evaluated
    at the same window state."""
    if cache is not None and "Rrb" in cache:
        Rrb = cache["Rrb"]
    else:
        Rrb = quat_to_matrix(ext.q_rb)
        if cache is not None:
            cache["Rrb"] = Rrb
    by_kf: dict = {}
    for kf, p_r in cluster.points:
        by_kf.setdefault(kf, []).append(p_r)
    groups = {}
    world = []
    for kf, plist in by_kf.items():
        ctx = frames[kf]
        ck = ("lpose", kf)
        if cache is not None and ck in cache:
            R, E, RE, pb, phi, delta, Jr = cache[ck]
        else:
            R, E, pb, phi, delta = _compensated_lidar_pose(ctx, dt_br)
            RE = R @ E
            Jr = so3_right_jacobian(phi)
            if cache is not None:
                cache[ck] = (R, E, RE, pb, phi, delta, Jr)
        pts_r = np.asarray(plist)
        y = pts_r @ Rrb.T + ext.p_br
        pw = y @ RE.T + pb
        groups[kf] = (ctx, R, E, RE, pb, phi, delta, Jr, pts_r, y, pw)
        world.append(pw)
    return groups, np.vstack(world), Rrb


def lidar_pa_residual(cluster: PlaneCluster, frames: dict, ext: LidarImuExtrinsics,
                      dt_br: float = 0.0, want_jacobian: bool = False,
                      plane: PlaneModel | None = None, cache: dict | None = None):
    """Plane-thickness residual of a same-plane cluster.

    frames: keyframe_id -> LidarFrameContext. The plane is re-fit from the
    currently projected world points unless an explicit plane is given;
    jacobians treat the plane as fixed at the linearization point.

    Returns (residual (1,), covariance (1,1)[, jacobian blocks]).
    """
    groups, world, Rrb = _cluster_by_frame(cluster, frames, ext, dt_br, cache)
    if plane is None:
        plane = fit_plane(world)
    N = len(world)
    ms_per_kf = []
    eps_by_kf = {}
    for kf, g in groups.items():
        e = plane.distance(g[-1])
        eps_by_kf[kf] = e
        ms_per_kf.append(float(np.mean(e**2)))
    r = np.array([sum(len(eps_by_kf[kf]) * ms for kf, ms in
                      zip(groups, ms_per_kf)) / N])
    sigma = max(PLANE_COV_FLOOR, float(np.std(ms_per_kf)))
    cov = np.array([[sigma**2 / N]])
    if not want_jacobian:
        return r, cov

    n = plane.normal
    J: dict = {}
    Jlp = np.zeros((1, 3))
    Jlq = np.zeros((1, 3))
    Jldt = 0.0
    for kf, (ctx, R, E, RE, pb, phi, delta, Jr, pts_r, y, pw) in groups.items():
        eps = eps_by_kf[kf]
        wsum = 2.0 * float(np.sum(eps)) / N  # scalar weight on linear terms
        s_y = (2.0 / N) * (eps @ y)  # eps-weighted sums for skew terms
        s_r = (2.0 / N) * (eps @ pts_r)
        nR = n @ R
        nRE = n @ RE
        J[("p", kf)] = (wsum * n)[None, :]
        J[("q", kf)] = (-(nR @ skew(E @ s_y)))[None, :]
        J[("v", kf)] = (wsum * delta * n)[None, :]
        Jldt += wsum * (n @ ctx.velocity) \
            - nRE @ (skew(s_y) @ (Jr @ ctx.angular_rate))
        Jlp += (wsum * nRE)[None, :]
        Jlq += (-(nRE @ (Rrb @ skew(s_r))))[None, :]
    J[("lp", -1)] = Jlp
    J[("lq", -1)] = Jlq
    J[("ldt", -1)] = np.array([[Jldt]])
    return r, cov, J


def adaptive_plane_covariance(cluster: PlaneCluster, frames: dict,
                              ext: LidarImuExtrinsics, dt_br: float = 0.0,
                              plane: PlaneModel | None = None) -> float:
    """Variance for the plane-thickness residual.

    Std of the residual = max(floor, sample std of the per-keyframe
    mean-square point-to-plane distances); the variance is scaled by 1/N.
    """
    groups, world, _ = _cluster_by_frame(cluster, frames, ext, dt_br)
    if plane is None:
        plane = fit_plane(world)
    ms = np.array([float(np.mean(plane.distance(g[-1]) ** 2))
                   for g in groups.values()])
    sigma = max(PLANE_COV_FLOOR, float(np.std(ms)))
    return sigma**2 / len(cluster.points)
