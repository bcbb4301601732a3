import numpy as np
import pytest

from lvio.geometry import Pose, exp_map, quat_multiply, quat_normalize


def rand_quat(rng, max_angle=np.pi * 0.9):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_map(axis * rng.uniform(0, max_angle))


def rand_pose(rng, scale=1.0):
    return Pose(rng.normal(scale=scale, size=3), rand_quat(rng))


def fd_jacobian(f, dim, eps=1e-6):
    """Central finite differences of f: R^dim -> R^m around zero."""
    r0 = np.atleast_1d(f(np.zeros(dim)))
    J = np.zeros((r0.size, dim))
    for i in range(dim):
        d = np.zeros(dim)
        d[i] = eps
        rp = np.atleast_1d(f(d))
        rm = np.atleast_1d(f(-d))
        J[:, i] = (rp - rm) / (2 * eps)
    return J


def rel_error(J_analytic, J_fd):
    scale = max(np.linalg.norm(J_fd), 1e-6)
    return np.linalg.norm(J_analytic - J_fd) / scale


def perturb_pose(pose, dp, dq):
    return Pose(pose.t + dp, quat_multiply(pose.q, exp_map(dq)))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
