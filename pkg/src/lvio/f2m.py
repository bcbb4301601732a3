"""Global point-cloud map, point-to-plane association, and the F2M pose
factor.

The map keeps a voxel hash for downsampling/consistency plus a kd-tree for
neighbor queries (rebuilt lazily after inserts). Registration estimates the
LiDAR pose against the map by Gauss-Newton on point-to-plane distances; the
resulting loosely-coupled pose (not the raw points) enters the sliding
window through a 6-DoF pose residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .calibration import LidarImuExtrinsics
from .factors import PlaneFitError, PlaneModel, fit_plane
from .geometry import (
    Pose,
    exp_map,
    log_map,
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    skew,
    so3_right_jacobian_inv,
)

# Planarity gates for neighbor sets (paper-silent association details).
PLANARITY_EIG_MAX = 0.05**2
PLANARITY_RATIO_MAX = 0.1


class F2mObservabilityError(RuntimeError):
    """Too few associations or degenerate normal geometry."""


class F2mConvergenceError(RuntimeError):
    """Gauss-Newton failed to converge."""


@dataclass
class F2mPoseMeasurement:
    keyframe_id: int
    pose: Pose  # {p_wr, q_rw}: LiDAR frame in world
    covariance: np.ndarray  # 6x6 over (dp, dtheta)

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")


class GlobalPlaneMap:
    """Accumulated world-frame point cloud with a voxel index."""

    def __init__(self, voxel_size: float = 0.5, leaf_size: float = 0.1):
        self.voxel_size = voxel_size
        self.leaf_size = leaf_size
        self._points: list[np.ndarray] = []
        self._sources: list[int] = []
        self._voxels: dict = {}  # voxel key -> point indices
        self._leaves: set = set()  # occupied downsample leaves
        self._tree: cKDTree | None = None
        self._arr: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        if not self._points:
            return np.zeros((0, 3))
        if self._arr is None or len(self._arr) != len(self._points):
            self._arr = np.asarray(self._points)
        return self._arr

    def _voxel_key(self, p, size):
        return tuple(np.floor(np.asarray(p) / size).astype(int))

    def insert(self, points: np.ndarray, source_id: int = -1) -> int:
        """Insert world-frame points with voxel downsampling.

        Returns the number of points actually stored."""
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            return 0
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite map points")
        added = 0
        for p in pts:
            leaf = self._voxel_key(p, self.leaf_size)
            if leaf in self._leaves:
                continue
            self._leaves.add(leaf)
            idx = len(self._points)
            self._points.append(p.copy())
            self._sources.append(source_id)
            self._voxels.setdefault(self._voxel_key(p, self.voxel_size), []).append(idx)
            added += 1
        if added:
            self._tree = None
        return added

    def _kdtree(self) -> cKDTree:
        if self._tree is None and self._points:
            self._tree = cKDTree(np.asarray(self._points))
        return self._tree

    def nearest(self, queries: np.ndarray, k: int = 5, max_dist: float = 1.0):
        """k nearest map points for each query; distances inf when missing."""
        tree = self._kdtree()
        if tree is None:
            n = len(np.atleast_2d(queries))
            return np.full((n, k), np.inf), np.zeros((n, k), dtype=int)
        d, i = tree.query(np.atleast_2d(queries), k=k,
                          distance_upper_bound=max_dist)
        return np.atleast_2d(d), np.atleast_2d(i)


def _planar_neighbors(neigh: np.ndarray):
    """Fit a plane to a neighbor set; None if the planarity test fails."""
    c = neigh.mean(axis=0)
    q = neigh - c
    S = q.T @ q / len(neigh)
    w, V = np.linalg.eigh(S)
    if w[0] > PLANARITY_EIG_MAX or (w[1] > 1e-12 and w[0] / w[1] > PLANARITY_RATIO_MAX):
        return None
    n = V[:, 0]
    k = int(np.argmax(np.abs(n)))
    if n[k] < 0:
        n = -n
    return PlaneModel(n, float(-n @ c))


def associate(point_r: np.ndarray, predicted_pose: Pose, pmap: GlobalPlaneMap,
              k: int = 5, max_dist: float = 1.0):
    """Associate a single LiDAR point with a local map plane (or None)."""
    pw = predicted_pose.transform(np.asarray(point_r, dtype=float))
    d, idx = pmap.nearest(pw, k=k, max_dist=max_dist)
    valid = np.isfinite(d[0])
    if valid.sum() < k:
        return None
    return _planar_neighbors(pmap.points[idx[0][valid]])


def _associate_batch(scan_w: np.ndarray, pmap: GlobalPlaneMap, k: int,
                     max_dist: float, gate: float):
    d, idx = pmap.nearest(scan_w, k=k, max_dist=max_dist)
    pts = pmap.points
    keep = np.flatnonzero(np.all(np.isfinite(d), axis=1))
    if len(keep) == 0:
        return keep, np.zeros((0, 3)), np.zeros(0)
    # batched plane fit of every neighbor set (the per-point version of
    # _planar_neighbors, vectorized over rows)
    neigh = pts[idx[keep]]
    c = neigh.mean(axis=1)
    q = neigh - c[:, None, :]
    S = np.einsum("rki,rkj->rij", q, q) / k
    w, V = np.linalg.eigh(S)
    planar = w[:, 0] <= PLANARITY_EIG_MAX
    ratio_bad = (w[:, 1] > 1e-12) & (w[:, 0] / np.maximum(w[:, 1], 1e-300)
                                     > PLANARITY_RATIO_MAX)
    planar &= ~ratio_bad
    n = V[:, :, 0]
    dom = np.take_along_axis(n, np.argmax(np.abs(n), axis=1)[:, None], axis=1)[:, 0]
    n = np.where(dom[:, None] < 0, -n, n)
    offsets = -np.einsum("ri,ri->r", n, c)
    # distance gate at the association pose: neighbor sets straddling
    # two surfaces can pass the planarity test with a bogus plane
    dist = np.abs(np.einsum("ri,ri->r", n, scan_w[keep]) + offsets)
    ok = planar & (dist <= gate)
    keep, normals, offsets = keep[ok], n[ok], offsets[ok]
    if len(keep) == 0:
        return keep, normals, offsets
    # adaptive sub-gate on the same distances: mismatches stand out from the
    # bulk residual scale (zero for exact data, ~sigma for noisy data)
    res0 = np.einsum("ij,ij->i", scan_w[keep], normals) + offsets
    scale = 1.4826 * np.median(np.abs(res0))
    ok = np.abs(res0) < max(3.0 * scale, 1e-8)
    return keep[ok], normals[ok], offsets[ok]


def estimate_f2m_pose(scan_r: np.ndarray, initial_pose: Pose, pmap: GlobalPlaneMap,
                      keyframe_id: int = -1, sigma_pt: float = 0.02,
                      max_iterations: int = 20, min_points: int = 20,
                      k: int = 5, max_dist: float = 1.0,
                      gate: float = 0.1) -> F2mPoseMeasurement:
    """Register a scan against the map by point-to-plane Gauss-Newton.

    Associations are made once at the initial pose; points farther than
    `gate` from their fitted plane there are treated as mismatches and
    dropped. The 6-DoF pose is then refined. Covariance =
    sigma_pt^2 (J^T J)^-1 at convergence.
    """
    scan = np.asarray(scan_r, dtype=float)
    if len(pmap) == 0:
        raise F2mObservabilityError("empty map")
    pose = initial_pose
    keep, normals, offsets = _associate_batch(pose.transform(scan), pmap, k,
                                              max_dist, gate)
    if len(keep) < min_points:
        raise F2mObservabilityError(f"only {len(keep)} associated points")
    # observability: the normals must span 3 directions
    ev = np.linalg.eigvalsh(normals.T @ normals / len(normals))
    if ev[0] < 1e-3:
        raise F2mObservabilityError("degenerate plane-normal geometry")

    pts = scan[keep]
    for trim_round in range(3):
        for it in range(max_iterations):
            R = pose.rotation_matrix()
            pw = pts @ R.T + pose.t
            res = np.einsum("ij,ij->i", pw, normals) + offsets
            # J rows: [n^T, -n^T R [p]x] = [n^T, (p x R^T n)^T]
            J = np.hstack([normals, np.cross(pts, normals @ R)])
            H = J.T @ J
            b = J.T @ res
            try:
                # tiny Tikhonov term keeps near-degenerate steps bounded
                dx = np.linalg.solve(H + 1e-9 * np.trace(H) * np.eye(6), -b)
            except np.linalg.LinAlgError as exc:
                raise F2mObservabilityError("singular registration system") from exc
            pose = Pose(pose.t + dx[:3], quat_multiply(pose.q, exp_map(dx[3:])))
            if np.linalg.norm(dx) < 1e-10:
                break
        else:
            if np.linalg.norm(dx) > 1e-5:
                raise F2mConvergenceError("registration did not converge")
        # trim residual mismatches that survived the association gate; the
        # threshold follows the observed residual scale so exact data keeps
        # only exact matches while noisy data keeps the 3-sigma band
        R = pose.rotation_matrix()
        res = np.einsum("ij,ij->i", pts @ R.T + pose.t, normals) + offsets
        scale = 1.4826 * np.median(np.abs(res))
        inlier = np.abs(res) < np.clip(3.0 * scale, 1e-8, 3.0 * sigma_pt)
        if inlier.all():
            break
        if inlier.sum() < min_points:
            raise F2mObservabilityError(
                f"only {int(inlier.sum())} inlier points after trimming")
        pts, normals, offsets = pts[inlier], normals[inlier], offsets[inlier]
        ev = np.linalg.eigvalsh(normals.T @ normals / len(normals))
        if ev[0] < 1e-3:
            raise F2mObservabilityError("degenerate plane-normal geometry")
    R = pose.rotation_matrix()
    pw = pts @ R.T + pose.t
    res = np.einsum("ij,ij->i", pw, normals) + offsets
    J = np.hstack([normals, np.cross(pts, normals @ R)])
    cov = sigma_pt**2 * np.linalg.inv(J.T @ J)
    return F2mPoseMeasurement(keyframe_id, pose, 0.5 * (cov + cov.T))


def f2m_pose_residual(body_pose: Pose, ext: LidarImuExtrinsics,
                      meas: F2mPoseMeasurement, velocity=None, angular_rate=None,
                      dt_br: float = 0.0, dthat_br: float = 0.0,
                      want_jacobian: bool = False):
    """6-vector F2M pose residual (translation, Log rotation) and covariance.

    The body pose is shifted to the LiDAR sampling instant by the
    constant-motion model when velocity/angular_rate are given.
    """
    v = np.zeros(3) if velocity is None else np.asarray(velocity, float)
    w = np.zeros(3) if angular_rate is None else np.asarray(angular_rate, float)
    delta = dt_br - dthat_br

    R = body_pose.rotation_matrix()
    phi = w * delta
    E = quat_to_matrix(exp_map(phi))
    Rhat = R @ E
    phat = body_pose.t + v * delta
    q_hat = quat_multiply(body_pose.q, exp_map(phi))

    Rm = meas.pose.rotation_matrix()
    r_t = Rhat @ ext.p_br + phat - meas.pose.t
    q_err = quat_multiply(q_hat, quat_multiply(ext.q_rb, quat_conjugate(meas.pose.q)))
    r_q = log_map(q_err)
    r = np.concatenate([r_t, r_q])
    if not want_jacobian:
        return r, meas.covariance

    kf = meas.keyframe_id
    Rrb = quat_to_matrix(ext.q_rb)
    Jr_inv = so3_right_jacobian_inv(r_q)
    Jrphi = np.eye(3) if delta == 0.0 else _right_jac(phi)
    C = Rrb @ Rm.T
    B = E @ C

    J: dict = {}
    Jt = np.zeros((6, 3))
    Jt[0:3] = np.eye(3)
    J[("p", kf)] = Jt

    Jq = np.zeros((6, 3))
    Jq[0:3] = -R @ skew(E @ ext.p_br)
    Jq[3:6] = Jr_inv @ B.T
    J[("q", kf)] = Jq

    Jv = np.zeros((6, 3))
    Jv[0:3] = np.eye(3) * delta
    J[("v", kf)] = Jv

    Jlp = np.zeros((6, 3))
    Jlp[0:3] = Rhat
    J[("lp", -1)] = Jlp

    Jlq = np.zeros((6, 3))
    Jlq[3:6] = Jr_inv @ Rm
    J[("lq", -1)] = Jlq

    Jdt = np.zeros((6, 1))
    Jdt[0:3, 0] = v - Rhat @ (skew(ext.p_br) @ (Jrphi @ w))
    Jdt[3:6, 0] = Jr_inv @ (C.T @ (Jrphi @ w))
    J[("ldt", -1)] = Jdt
    return r, meas.covariance, J


def _right_jac(phi):
    from .geometry import so3_right_jacobian

    return so3_right_jacobian(phi)


def insert_marginalized_frame(scan_r: np.ndarray, final_body_pose: Pose,
                              ext: LidarImuExtrinsics, pmap: GlobalPlaneMap,
                              keyframe_id: int = -1) -> int:
    """Append the world-frame points of a finalized keyframe to the map."""
    lidar_pose = final_body_pose.compose(ext.pose())
    return pmap.insert(lidar_pose.transform(np.asarray(scan_r, dtype=float)), keyframe_id)


def export_ply(pmap_or_points, path, colors=None):
    """Write map points as ASCII PLY (x y z [r g b])."""
    pts = pmap_or_points.points if isinstance(pmap_or_points, GlobalPlaneMap) else np.asarray(pmap_or_points)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if colors is not None:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for i, p in enumerate(pts):
            line = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
            if colors is not None:
                c = colors[i]
                line += f" {int(c[0])} {int(c[1])} {int(c[2])}"
            f.write(line + "\n")
