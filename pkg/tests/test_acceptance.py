"""Acceptance gate: one test per shipped guarantee.

Each test prints a single PASS/FAIL line for its criterion and then asserts.
The simulated scenarios are deliberately small so every criterion stays
under a minute of single-core wall time.
"""

import time

import numpy as np
import pytest

from lvio import factors as pa
from lvio import io
from lvio.calibration import (
    CameraImuExtrinsics,
    LidarImuExtrinsics,
    TimeDelayConfig,
    pixel_angle_deg,
    time_delay_residual,
)
from lvio.cli import run_estimator
from lvio.estimator import (
    AssembledProblem,
    EstimatorConfig,
    Factor,
    GaussianPriorFactor,
    KeyframeState,
    MarginalPriorFactor,
    TimeDelayFactor,
    WindowState,
    boxminus,
    marginalize_factors,
)
from lvio.evaluate import ate_rmse, end_to_end_error
from lvio.f2m import GlobalPlaneMap, estimate_f2m_pose, f2m_pose_residual
from lvio.geometry import Pose, exp_map, log_map, quat_multiply
from lvio.imu import ImuNoiseConfig, ImuSample, integrate, preintegration_jacobians, preintegration_residual
from lvio.simulate import simulate_scenario

from conftest import fd_jacobian, perturb_pose, rand_pose, rand_quat, rel_error

IDENT_CAM = CameraImuExtrinsics(np.zeros(3), np.array([1.0, 0, 0, 0]))
IDENT_LID = LidarImuExtrinsics(np.zeros(3), np.array([1.0, 0, 0, 0]))


def report(num, ok, text):
    print(f"{'PASS' if ok else 'FAIL'}: criterion {num} - {text}")
    assert ok, f"criterion {num} failed: {text}"


# ---------------------------------------------------------------------------
# criterion 1: analytic jacobians of every factor match central finite
# differences to 1e-4 relative error at 100 random linearization points
# (plane re-fit variants at 1e-2)
# ---------------------------------------------------------------------------


def _imu_jacobian_errors(rng, n_points):
    ts = np.arange(0.0, 0.5 + 1e-12, 1.0 / 200)
    samples = [ImuSample(
        t,
        np.array([0.3 * np.sin(3 * t), -0.2 * np.cos(2 * t), 0.4 * np.sin(t + 0.5)]),
        np.array([1.0 * np.sin(2 * t), 0.5 * np.cos(3 * t), 9.81 + 0.3 * np.sin(t)]),
    ) for t in ts]
    noise = ImuNoiseConfig()
    worst = 0.0

    def state(t, p, q, v, bg, ba):
        return KeyframeState(t, p, q, v, bg, ba)

    def perturbed(s, d):
        return state(s.timestamp, s.p + d[0:3],
                     quat_multiply(s.q, exp_map(d[3:6])), s.v + d[6:9],
                     s.bg + d[9:12], s.ba + d[12:15])

    for _ in range(n_points):
        s0 = state(0.0, rng.normal(size=3), rand_quat(rng), rng.normal(size=3),
                   rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e-2)
        s1 = state(ts[-1], rng.normal(size=3), rand_quat(rng), rng.normal(size=3),
                   s0.bg + rng.normal(size=3) * 1e-4, s0.ba + rng.normal(size=3) * 1e-3)
        pre = integrate(samples, s0.bg, s0.ba, noise)
        J = preintegration_jacobians(s0, s1, pre)
        Jfd_i = fd_jacobian(
            lambda d: preintegration_residual(perturbed(s0, d), s1, pre)[0], 15)
        Jfd_j = fd_jacobian(
            lambda d: preintegration_residual(s0, perturbed(s1, d), pre)[0], 15)
        Ja_i = np.hstack([J["p_i"], J["q_i"], J["v_i"], J["bg_i"], J["ba_i"]])
        Ja_j = np.hstack([J["p_j"], J["q_j"], J["v_j"], J["bg_j"], J["ba_j"]])
        worst = max(worst, rel_error(Ja_i, Jfd_i), rel_error(Ja_j, Jfd_j))
    return worst


def _visual_case(rng, with_depth):
    ext_pose = rand_pose(rng, 0.1)
    ext = CameraImuExtrinsics(ext_pose.t, ext_pose.q)
    X = np.array([0.5, -0.3, 6.0])
    poses, observations = {}, []
    for k in range(3):
        body = Pose(np.array([0.6 * k, 0.1 * k, 0.05 * k]),
                    exp_map(np.array([0.02 * k, -0.03 * k, 0.05 * k])))
        poses[k] = body
        cam = pa.camera_pose_from_state(body, ext)
        x = cam.rotation_matrix().T @ (X - cam.t)
        observations.append(pa.FeatureObservation(
            k, np.array([x[0] / x[2], x[1] / x[2], 1.0]), 1.0,
            rng.normal(size=2) * 0.3))
    depth = None
    if with_depth:
        cam0 = pa.camera_pose_from_state(poses[0], ext)
        x0 = cam0.rotation_matrix().T @ (X - cam0.t)
        if x0[2] <= 0.1:
            raise pa.CheiralityError("landmark behind the depth camera")
        depth = (float(x0[2]), 0.05)
    track = pa.LandmarkTrack(7, observations, 0, 2, lidar_depth=depth)
    # random linearization point away from the zero-residual configuration
    poses = {k: perturb_pose(p, rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.02)
             for k, p in poses.items()}
    dt_bc = {k: rng.normal() * 0.005 for k in poses}
    dthat = {k: rng.normal() * 0.002 for k in poses}
    return track, poses, ext, dt_bc, dthat


def _visual_jacobian_errors(rng, with_depth, n_points):
    fn = pa.lidar_depth_pa_residual if with_depth else pa.visual_pa_residual
    worst, done = 0.0, 0
    while done < n_points:
        try:
            track, poses, ext, dt_bc, dthat = _visual_case(rng, with_depth)
            r, _, J = fn(track, 1, poses, ext, dt_bc, dthat, want_jacobian=True)
        except (pa.CheiralityError, pa.DegenerateParallaxError):
            continue
        for k in poses:
            def f_pose(d, k=k):
                moved = dict(poses)
                moved[k] = perturb_pose(poses[k], d[0:3], d[3:6])
                return fn(track, 1, moved, ext, dt_bc, dthat)[0]

            Ja = np.hstack([J.get(("p", k), np.zeros((len(r), 3))),
                            J.get(("q", k), np.zeros((len(r), 3)))])
            worst = max(worst, rel_error(Ja, fd_jacobian(f_pose, 6)))

            def f_dt(d, k=k):
                moved = dict(dt_bc)
                moved[k] = dt_bc[k] + d[0]
                return fn(track, 1, poses, ext, moved, dthat)[0]

            worst = max(worst, rel_error(J.get(("dt", k), np.zeros((len(r), 1))),
                                         fd_jacobian(f_dt, 1)))

        def f_ext(d):
            moved = CameraImuExtrinsics(ext.p_bc + d[0:3],
                                        quat_multiply(ext.q_cb, exp_map(d[3:6])))
            return fn(track, 1, poses, moved, dt_bc, dthat)[0]

        worst = max(worst, rel_error(np.hstack([J[("cp", -1)], J[("cq", -1)]]),
                                     fd_jacobian(f_ext, 6)))
        done += 1
    return worst


def _lidar_jacobian_errors(rng, n_points):
    worst_fixed, worst_refit = 0.0, 0.0
    for _ in range(n_points):
        frames, pts = {}, []
        for k in range(3):
            body = Pose(np.array([0.4 * k, 0.2 * k, 1.5]),
                        exp_map(np.array([0.01 * k, -0.02 * k, 0.3 * k])))
            frames[k] = pa.LidarFrameContext(body, rng.normal(size=3),
                                             rng.normal(size=3) * 0.5,
                                             dthat_br=rng.normal() * 0.002)
            R = body.rotation_matrix()
            for _ in range(3):
                pw = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2),
                               rng.normal() * 0.02])
                pts.append((k, R.T @ (pw - body.t)))
        cluster = pa.PlaneCluster(0, pts)
        ext_pose = rand_pose(rng, 0.1)
        ext = LidarImuExtrinsics(ext_pose.t, ext_pose.q)
        dt_br = rng.normal() * 0.004
        r, cov, J = pa.lidar_pa_residual(cluster, frames, ext, dt_br,
                                         want_jacobian=True)
        # the plane the analytic jacobian treats as fixed
        Rrb = ext.pose().rotation_matrix()
        world = []
        for kf, p_r in cluster.points:
            Rm, E, pb, _, _ = pa._compensated_lidar_pose(frames[kf], dt_br)
            world.append(Rm @ (E @ (Rrb @ p_r + ext.p_br)) + pb)
        plane_lin = pa.fit_plane(np.asarray(world))

        for k in frames:
            def f_pose(d, k=k, refit=False):
                moved = dict(frames)
                c = frames[k]
                moved[k] = pa.LidarFrameContext(
                    perturb_pose(c.pose, d[0:3], d[3:6]),
                    c.velocity + d[6:9], c.angular_rate, c.dthat_br)
                return pa.lidar_pa_residual(cluster, moved, ext, dt_br,
                                            plane=None if refit else plane_lin)[0]

            Ja = np.hstack([J[("p", k)], J[("q", k)], J[("v", k)]])
            worst_fixed = max(worst_fixed,
                              rel_error(Ja, fd_jacobian(lambda d: f_pose(d), 9)))
            worst_refit = max(worst_refit, rel_error(
                Ja, fd_jacobian(lambda d: f_pose(d, refit=True), 9)))

        def f_ext(d):
            moved = LidarImuExtrinsics(ext.p_br + d[0:3],
                                       quat_multiply(ext.q_rb, exp_map(d[3:6])))
            return pa.lidar_pa_residual(cluster, frames, moved, dt_br + d[6],
                                        plane=plane_lin)[0]

        Ja = np.hstack([J[("lp", -1)], J[("lq", -1)], J[("ldt", -1)]])
        worst_fixed = max(worst_fixed, rel_error(Ja, fd_jacobian(f_ext, 7)))
    return worst_fixed, worst_refit


def _f2m_jacobian_errors(rng, n_points):
    from lvio.f2m import F2mPoseMeasurement

    worst = 0.0
    for _ in range(n_points):
        ext_pose = rand_pose(rng, 0.2)
        ext = LidarImuExtrinsics(ext_pose.t, ext_pose.q)
        body = rand_pose(rng, 2.0)
        meas = F2mPoseMeasurement(3, rand_pose(rng, 2.0), np.eye(6) * 1e-4)
        v = rng.normal(size=3)
        w = rng.normal(size=3) * 0.5
        dt_br = rng.normal() * 0.004
        dthat = rng.normal() * 0.002
        r, _, J = f2m_pose_residual(body, ext, meas, v, w, dt_br, dthat,
                                    want_jacobian=True)

        def f_state(d):
            return f2m_pose_residual(perturb_pose(body, d[0:3], d[3:6]), ext,
                                     meas, v + d[6:9], w, dt_br, dthat)[0]

        Ja = np.hstack([J[("p", 3)], J[("q", 3)], J[("v", 3)]])
        worst = max(worst, rel_error(Ja, fd_jacobian(f_state, 9)))

        def f_ext(d):
            moved = LidarImuExtrinsics(ext.p_br + d[0:3],
                                       quat_multiply(ext.q_rb, exp_map(d[3:6])))
            return f2m_pose_residual(body, moved, meas, v, w, dt_br + d[6], dthat)[0]

        Ja = np.hstack([J[("lp", -1)], J[("lq", -1)], J[("ldt", -1)]])
        worst = max(worst, rel_error(Ja, fd_jacobian(f_ext, 7)))
    return worst


def _timedelay_jacobian_errors(rng, n_points):
    worst = 0.0
    for _ in range(n_points):
        win = WindowState(IDENT_CAM, IDENT_LID, window_size=4)
        for k in range(2):
            win.add(k, KeyframeState(0.2 * k, np.zeros(3),
                                     np.array([1.0, 0, 0, 0]), np.zeros(3),
                                     dt_bc=rng.normal() * 0.01))
        f = TimeDelayFactor(0, 1, float(rng.uniform(0.05, 0.5)),
                            TimeDelayConfig())
        _, J = f.evaluate(win, want_jacobian=True)
        for key in f.keys():
            def f_dt(d, key=key):
                moved = win.copy()
                moved.retract(key, d)
                return f.evaluate(moved)[0]

            worst = max(worst, rel_error(J[key], fd_jacobian(f_dt, 1)))
    return worst


def test_criterion_01_jacobians_match_finite_differences():
    rng = np.random.default_rng(1)
    errs = {
        "imu": _imu_jacobian_errors(rng, 100),
        "visual": _visual_jacobian_errors(rng, False, 100),
        "depth": _visual_jacobian_errors(rng, True, 100),
        "f2m": _f2m_jacobian_errors(rng, 100),
        "timedelay": _timedelay_jacobian_errors(rng, 100),
    }
    fixed, refit = _lidar_jacobian_errors(rng, 100)
    errs["lidar"] = fixed
    ok = max(errs.values()) < 1e-4 and refit < 1e-2
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    report(1, ok, "factor jacobians match central differences at 100 random "
           f"points ({detail}; plane re-fit {refit:.1e} < 1e-2)")


# ---------------------------------------------------------------------------
# criterion 2: with zero noise and zero offsets the simulator output is an
# exact fixed point: every factor residual at the ground-truth states is
# below 1e-9 and the full pipeline reproduces the trajectory to 1e-6 m ATE
# ---------------------------------------------------------------------------


FIXED_POINT_SCENARIO = {
    "trajectory": "wiggle", "duration": 4.0, "seed": 3,
    "imu_rate": 200, "cam_rate": 5, "lidar_rate": 5,
    "lidar_fov_deg": 360, "n_billboards": 16, "n_landmarks": 50,
    "points_per_patch": 8,
}


def _raw_residual(f, win):
    """Unwhitened residual of one factor at the current window states."""
    kind = f.kind
    if kind == "imu":
        return preintegration_residual(win.keyframes[f.ki], win.keyframes[f.kj],
                                       f.pre)[0]
    if kind == "timedelay":
        r, _ = time_delay_residual(win.keyframes[f.ki].dt_bc,
                                   win.keyframes[f.kj].dt_bc, f.interval, f.cfg)
        return np.array([r])
    if kind in ("visual", "depth"):
        poses = {k: win.keyframes[k].pose() for k in f._frames}
        dt_bc = {k: win.keyframes[k].dt_bc for k in f._frames}
        dthat = {k: win.keyframes[k].dthat_br for k in f._frames}
        fn = pa.visual_pa_residual if kind == "visual" else pa.lidar_depth_pa_residual
        return fn(f.track, f.observer, poses, win.cam_ext, dt_bc, dthat)[0]
    if kind == "lidar":
        frames = {k: pa.LidarFrameContext(win.keyframes[k].pose(),
                                          win.keyframes[k].v,
                                          win.keyframes[k].angular_rate,
                                          win.keyframes[k].dthat_br)
                  for k in f._frames}
        return pa.lidar_pa_residual(f.cluster, frames, win.lid_ext,
                                    win.lid_ext.dt_br)[0]
    if kind == "f2m":
        kf = win.keyframes[f.meas.keyframe_id]
        return f2m_pose_residual(kf.pose(), win.lid_ext, f.meas, kf.v,
                                 kf.angular_rate, win.lid_ext.dt_br,
                                 kf.dthat_br)[0]
    if kind == "prior":
        return boxminus(f.key[0], win.get_block(f.key), f.value)
    if kind == "marginal":
        return f.evaluate(win)[0]
    raise AssertionError(kind)


def test_criterion_02_zero_noise_fixed_point(tmp_path):
    simulate_scenario(dict(FIXED_POINT_SCENARIO), tmp_path)

    # with the solver disabled the window states are the mechanized ground
    # truth; every residual must vanish there
    cfg = EstimatorConfig(window_size=6, mode="full", max_iterations=0)
    est = run_estimator(tmp_path, mode="full", config=cfg)
    problem = est.build_problem()
    worst = {}
    for f in problem.factors:
        m = float(np.max(np.abs(_raw_residual(f, est.window))))
        worst[f.kind] = max(worst.get(f.kind, 0.0), m)
    kinds_needed = {"imu", "timedelay", "visual", "depth", "lidar", "f2m"}
    assert kinds_needed <= set(worst), worst

    # the actual pipeline must then reproduce the trajectory exactly
    est_full = run_estimator(tmp_path, mode="full")
    traj = [(o.timestamp, o.pose) for o in est_full.trajectory()]
    truth = io.read_tum(tmp_path / "gt.tum")
    ate = ate_rmse(traj, truth, align=False, tol=1e-6)

    ok = max(worst.values()) <= 1e-9 and ate <= 1e-6
    report(2, ok, "zero-noise run is a fixed point (max residual "
           f"{max(worst.values()):.1e} <= 1e-9 over {sorted(worst)}, "
           f"pipeline ATE {ate:.1e} m <= 1e-6)")


# ---------------------------------------------------------------------------
# criterion 3: closed-form pose-only depth equals linear two-view
# triangulation on 1000 random noise-free configurations
# ---------------------------------------------------------------------------


def _triangulate_two_view(u1, u2, pose1, pose2):
    """Independent oracle: least squares on the cross-product constraints."""
    rows, rhs = [], []
    for u, pose in ((u1, pose1), (u2, pose2)):
        R = pose.rotation_matrix()
        S = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
        A = S @ R.T
        rows.append(A)
        rhs.append(A @ pose.t)
    X, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return (pose1.rotation_matrix().T @ (X - pose1.t))[2]


def test_criterion_03_depth_matches_triangulation():
    rng = np.random.default_rng(3)
    worst, done = 0.0, 0
    while done < 1000:
        pz, pe = rand_pose(rng, 2.0), rand_pose(rng, 2.0)
        X = rng.normal(size=3) * 5
        xz = pz.rotation_matrix().T @ (X - pz.t)
        xe = pe.rotation_matrix().T @ (X - pe.t)
        if xz[2] < 0.2 or xe[2] < 0.2:
            continue
        try:
            d, _ = pa.pose_only_depth(xz / xz[2], xe / xe[2], pz, pe)
        except pa.DegenerateParallaxError:
            continue
        worst = max(worst, abs(d - _triangulate_two_view(xz / xz[2], xe / xe[2],
                                                         pz, pe)))
        done += 1
    ok = worst <= 1e-9
    report(3, ok, "pose-only depth matches linear triangulation on 1000 "
           f"random two-view configurations (max |diff| {worst:.1e} <= 1e-9)")


# ---------------------------------------------------------------------------
# criterion 4: on a 20-state linear-Gaussian chain the sliding window with
# Schur-complement priors reproduces the batch MAP solution to 1e-8
# ---------------------------------------------------------------------------


class _RelPosFactor(Factor):
    kind = "rel"

    def __init__(self, ki, kj, z, sigma):
        self.ki, self.kj = ki, kj
        self.z = np.asarray(z, dtype=float)
        self.s = 1.0 / sigma

    def keys(self):
        return [("p", self.ki), ("p", self.kj)]

    def evaluate(self, window, want_jacobian=False, cache=None):
        r = self.s * (window.keyframes[self.kj].p - window.keyframes[self.ki].p - self.z)
        if not want_jacobian:
            return r, None
        eye = self.s * np.eye(3)
        return r, {("p", self.ki): -eye, ("p", self.kj): eye}


def _chain_window(ids, n):
    win = WindowState(IDENT_CAM, IDENT_LID, window_size=n + 1)
    for k in ids:
        win.add(k, KeyframeState(k * 0.1, np.zeros(3),
                                 np.array([1.0, 0, 0, 0]), np.zeros(3)))
    return win


def _newton_solve(problem, window, iters=3):
    for _ in range(iters):
        H, g, _ = problem.linearize(window)
        dx = np.linalg.solve(H, -g)
        for key, (off, d) in problem.index.items():
            window.retract(key, dx[off:off + d])


def test_criterion_04_sliding_window_matches_batch():
    rng = np.random.default_rng(4)
    n, span = 20, 5
    steps = rng.normal(size=(n - 1, 3))
    meas = steps + rng.normal(scale=0.05, size=(n - 1, 3))
    prior = GaussianPriorFactor(("p", 0), np.zeros(3), 0.1)
    rels = [_RelPosFactor(k, k + 1, meas[k], 0.05) for k in range(n - 1)]

    batch = _chain_window(range(n), n)
    _newton_solve(AssembledProblem([("p", k) for k in range(n)], [prior] + rels),
                  batch)

    win = _chain_window(range(span), n)
    active = list(range(span))
    factors = [prior] + rels[:span - 1]
    _newton_solve(AssembledProblem([("p", k) for k in active], factors), win)
    for k in range(span, n):
        oldest = active.pop(0)
        touching = [f for f in factors if ("p", oldest) in f.keys()]
        keep = [f for f in factors if ("p", oldest) not in f.keys()]
        info = marginalize_factors(win, touching, [("p", oldest)])
        del win.keyframes[oldest]
        factors = keep + [MarginalPriorFactor(info)]
        win.add(k, KeyframeState(k * 0.1, win.keyframes[k - 1].p + meas[k - 1],
                                 np.array([1.0, 0, 0, 0]), np.zeros(3)))
        active.append(k)
        factors.append(rels[k - 1])
        _newton_solve(AssembledProblem([("p", k) for k in active], factors), win)

    worst = max(float(np.max(np.abs(win.keyframes[k].p - batch.keyframes[k].p)))
                for k in active)
    ok = worst < 1e-8
    report(4, ok, "sliding window with marginalization priors matches batch "
           f"MAP on a 20-state linear chain (max |diff| {worst:.1e} < 1e-8)")


# ---------------------------------------------------------------------------
# criterion 5: on a 200 m closed loop the full mode beats the no_f2m
# ablation on end-to-end error over 20 seeded runs, with median < 1 m
# ---------------------------------------------------------------------------


LOOP_SCENARIO = {
    "trajectory": "circle", "radius": 31.83, "laps": 1.008, "duration": 25.2,
    "imu_rate": 30, "cam_rate": 1.0, "lidar_rate": 1.0,
    "lidar_fov_deg": 360, "lidar_max_range": 60,
    "n_billboards": 16, "n_landmarks": 50, "points_per_patch": 6,
    "pixel_sigma": 0.5, "range_sigma": 0.01,
    "gyro_noise": 5e-5, "accel_noise": 5e-4,
}


def _loop_config():
    return EstimatorConfig(window_size=4, max_tracks=8, max_clusters=5,
                           max_cluster_points=12, max_iterations=2, rel_tol=1e-6)


def test_criterion_05_f2m_reduces_loop_drift(tmp_path):
    e2e = {"full": [], "no_f2m": []}
    for seed in range(100, 120):
        d = tmp_path / f"s{seed}"
        simulate_scenario(dict(LOOP_SCENARIO, seed=seed), d)
        for mode in e2e:
            est = run_estimator(d, mode=mode, config=_loop_config())
            traj = [(o.timestamp, o.pose) for o in est.trajectory()]
            e2e[mode].append(end_to_end_error(traj))
    med_full = float(np.median(e2e["full"]))
    med_ablate = float(np.median(e2e["no_f2m"]))
    ok = med_full < med_ablate and med_full < 1.0
    report(5, ok, "F2M cuts closed-loop drift over 20 seeded 200 m runs "
           f"(median full {med_full:.3f} m < no_f2m {med_ablate:.3f} m, "
           "full < 1.0 m)")


# ---------------------------------------------------------------------------
# criterion 6: yaw uncertainty over a 60 s run: keeping the F2M factor in
# the marginal prior is the most confident, discarding it at
# marginalization is consistent, and dropping F2M entirely drifts
# ---------------------------------------------------------------------------


YAW_SCENARIO = {
    "trajectory": "circle", "radius": 20.0, "laps": 2.0, "duration": 60.0,
    "imu_rate": 30, "cam_rate": 1.0, "lidar_rate": 1.0,
    "lidar_fov_deg": 360, "lidar_max_range": 60,
    "n_billboards": 16, "n_landmarks": 50, "points_per_patch": 6,
    "pixel_sigma": 0.5, "range_sigma": 0.01,
    "gyro_noise": 5e-5, "accel_noise": 5e-4, "seed": 4,
}


def test_criterion_06_yaw_uncertainty_ordering(tmp_path):
    simulate_scenario(dict(YAW_SCENARIO), tmp_path)
    final = {}
    increasing = False
    for mode in ("full", "no_f2m", "marg_f2m"):
        cfg = EstimatorConfig(window_size=4, max_tracks=8, max_clusters=5,
                              max_cluster_points=12, max_iterations=6,
                              rel_tol=1e-8)
        est = run_estimator(tmp_path, mode=mode, config=cfg)
        series = np.array([s for _, s in est.yaw_std_series])
        final[mode] = float(series[-1])
        if mode == "no_f2m":
            increasing = bool(np.all(np.diff(series) > 0))
    ok = (final["marg_f2m"] < final["full"] <= 2.0 * final["no_f2m"]
          and increasing)
    deg = {m: np.degrees(v) for m, v in final.items()}
    report(6, ok, "final yaw STD ordering marg_f2m "
           f"{deg['marg_f2m']:.2f} deg < full {deg['full']:.2f} deg <= "
           f"2x no_f2m {deg['no_f2m']:.2f} deg; no_f2m strictly increasing")


# ---------------------------------------------------------------------------
# criterion 7: online time-delay calibration recovers a 20 ms camera delay
# with 0.1 ms/s drift to 2 ms and a 5 ms LiDAR delay to 1 ms
# ---------------------------------------------------------------------------


DELAY_SCENARIO = {
    "trajectory": "wiggle", "duration": 15.0, "seed": 22,
    "imu_rate": 100, "cam_rate": 2.0, "lidar_rate": 2.0,
    "lidar_fov_deg": 360, "n_billboards": 14, "n_landmarks": 60,
    "points_per_patch": 6,
    "pixel_sigma": 0.5, "range_sigma": 0.005,
    "gyro_noise": 5e-5, "accel_noise": 5e-4,
    "dt_bc": 0.02, "dt_bc_drift": 1e-4, "dt_br": 0.005,
}


def test_criterion_07_time_delay_calibration(tmp_path):
    simulate_scenario(dict(DELAY_SCENARIO), tmp_path)
    cfg = EstimatorConfig(window_size=5, max_tracks=15, max_clusters=8,
                          max_cluster_points=16, max_iterations=8, rel_tol=1e-8)
    est = run_estimator(tmp_path, mode="full", config=cfg)
    kf = est.window.keyframes[est.window.ordered_ids()[-1]]
    err_bc = kf.dt_bc - (0.02 + 1e-4 * kf.timestamp)
    err_br = est.window.lid_ext.dt_br - 0.005
    ok = abs(err_bc) < 2e-3 and abs(err_br) < 1e-3
    report(7, ok, "time delays recovered (camera error "
           f"{err_bc * 1e3:+.2f} ms < 2 ms, LiDAR error "
           f"{err_br * 1e3:+.2f} ms < 1 ms)")


# ---------------------------------------------------------------------------
# criterion 8: online LiDAR-IMU rotation calibration converges from a
# 1 degree initial error to 0.05 degree (median over 10 seeds) with
# per-axis scatter below 0.05 degree
# ---------------------------------------------------------------------------


def test_criterion_08_lidar_rotation_calibration(tmp_path):
    off = exp_map(np.radians([0.6, -0.5, 0.62]))  # ~1.0 deg total
    scen = {
        "trajectory": "wiggle", "duration": 10.0,
        "imu_rate": 100, "cam_rate": 2.0, "lidar_rate": 2.0,
        "lidar_fov_deg": 360, "n_billboards": 20, "n_landmarks": 60,
        "points_per_patch": 10,
        "pixel_sigma": 0.5, "range_sigma": 0.002,
        "gyro_noise": 5e-5, "accel_noise": 5e-4,
        "guess_lid_q": ",".join(repr(float(x)) for x in off),
    }
    cfg_kwargs = dict(window_size=5, max_tracks=10, max_clusters=14,
                      max_cluster_points=28, max_iterations=6, rel_tol=1e-7)
    errs = []
    for seed in range(31, 41):
        d = tmp_path / f"s{seed}"
        simulate_scenario(dict(scen, seed=seed), d)
        est = run_estimator(d, mode="full", config=EstimatorConfig(**cfg_kwargs))
        errs.append(np.degrees(log_map(est.window.lid_ext.q_rb)))
    errs = np.asarray(errs)
    median_err = float(np.median(np.linalg.norm(errs, axis=1)))
    axis_std = errs.std(axis=0)
    ok = median_err <= 0.05 and float(axis_std.max()) <= 0.05
    report(8, ok, "LiDAR-IMU rotation converges from 1 deg offset (median "
           f"error {median_err:.3f} deg <= 0.05, per-axis STD max "
           f"{axis_std.max():.3f} deg <= 0.05 over 10 seeds)")


# ---------------------------------------------------------------------------
# criterion 9: the small-pixel-angle constant for a 5.86 um pixel behind a
# 6 mm lens prints as 0.0573 degrees
#
# Honest red: asin(5.86e-6 / 6.0e-3) is 9.767e-4 rad = 0.0560 deg. The
# quoted 0.0573 deg equals asin(1.0e-3) exactly, so the published constant
# is an arithmetic slip; no rounding of the correct value reproduces it.
# The utility keeps the correct formula instead of matching the misprint.
# ---------------------------------------------------------------------------


@pytest.mark.xfail(
    reason="published constant 0.0573 deg is asin(1.0e-3); the stated inputs "
           "give asin(5.86e-6/6.0e-3) = 0.0560 deg",
    strict=True)
def test_criterion_09_pixel_angle_constant():
    printed = f"{pixel_angle_deg(5.86e-6, 6.0e-3):.4f}"
    ok = printed == "0.0573"
    report(9, ok, f"pixel angle for 5.86 um / 6 mm prints as {printed} "
           "(expected 0.0573; correct evaluation of the published formula "
           "cannot reproduce the published constant)")


# ---------------------------------------------------------------------------
# criterion 10: scan-to-map registration of a 2000-point scan completes in
# under 10 ms median
# ---------------------------------------------------------------------------


def _box_room_points(rng, n_per_face, half=5.0):
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            pts = rng.uniform(-half, half, size=(n_per_face, 3))
            pts[:, axis] = sign * half
            faces.append(pts)
    return np.vstack(faces)


def test_criterion_10_f2m_registration_speed():
    rng = np.random.default_rng(10)
    pmap = GlobalPlaneMap(leaf_size=0.05)
    pmap.insert(_box_room_points(rng, 600), source_id=0)
    true_pose = Pose(np.array([0.3, -0.4, 0.2]), exp_map(np.array([0.02, 0.05, -0.3])))
    pts_w = _box_room_points(rng, 2000 // 6 + 1)[:2000]
    scan = (pts_w - true_pose.t) @ true_pose.rotation_matrix()
    init = Pose(true_pose.t + np.array([0.05, -0.02, 0.04]), true_pose.q)
    times = []
    for _ in range(15):
        t0 = time.perf_counter()
        estimate_f2m_pose(scan, init, pmap)
        times.append((time.perf_counter() - t0) * 1e3)
    median_ms = float(np.median(times))
    ok = median_ms < 10.0
    report(10, ok, f"2000-point scan-to-map registration takes "
           f"{median_ms:.2f} ms median < 10 ms")


# ---------------------------------------------------------------------------
# criterion 11: identical seeds produce byte-identical simulated data and
# byte-identical estimated trajectory files
# ---------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    scen = {
        "trajectory": "wiggle", "duration": 3.0, "seed": 5,
        "imu_rate": 100, "cam_rate": 5, "lidar_rate": 5,
        "lidar_fov_deg": 360, "n_billboards": 10, "n_landmarks": 40,
        "points_per_patch": 4,
        "pixel_sigma": 0.3, "range_sigma": 0.002,
        "gyro_noise": 1e-4, "accel_noise": 1e-3,
    }
    trajs = []
    for run in ("a", "b"):
        d = tmp_path / run
        simulate_scenario(dict(scen), d)
        est = run_estimator(d, mode="full", seed=9)
        out = tmp_path / f"traj_{run}.tum"
        io.write_tum(out, [(o.timestamp, o.pose) for o in est.trajectory()])
        trajs.append(out.read_bytes())
    sim_same = all((tmp_path / "a" / name).read_bytes()
                   == (tmp_path / "b" / name).read_bytes()
                   for name in ("imu.csv", "features.csv", "clusters.csv",
                                "gt.tum", "init.cfg", "sensor.cfg"))
    ok = sim_same and trajs[0] == trajs[1]
    report(11, ok, "identical seeds give byte-identical simulated data and "
           "trajectory files")
