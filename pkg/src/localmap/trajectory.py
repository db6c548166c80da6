"""Trajectory text format and absolute trajectory error.

Files follow the de-facto SLAM interchange layout: one pose per line,
`timestamp tx ty tz qx qy qz qw`, camera-to-world. ATE rigidly aligns the
estimate to ground truth (closed-form orthogonal Procrustes, optional
similarity scale) and reports the RMSE of the residual positions.
"""

from __future__ import annotations

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError
from .geometry import SE3Pose


def write_trajectory(path: str, rows: list[tuple[float, SE3Pose]]):
    """rows: (timestamp, world-to-camera pose); written camera-to-world."""
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in rows:
            inv = pose.inverse()
            t = inv.trans
            q = inv.quat
            fh.write(
                f"{ts:.6f} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
                f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}\n"
            )


def read_trajectory(path: str) -> dict[float, np.ndarray]:
    """timestamp -> camera-to-world (tx, ty, tz, qx, qy, qz, qw)."""
    out: dict[float, np.ndarray] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise InvalidArgumentError(f"bad trajectory line: {line!r}")
            out[vals[0]] = np.array(vals[1:])
    return out


def associate(est: dict[float, np.ndarray], gt: dict[float, np.ndarray]):
    """Match rows by identical timestamp; returns (est_xyz, gt_xyz)."""
    keys = sorted(set(est) & set(gt))
    if not keys:
        raise InsufficientDataError("no common timestamps between trajectories")
    e = np.stack([est[k][:3] for k in keys])
    g = np.stack([gt[k][:3] for k in keys])
    return e, g


def align_rigid(source: np.ndarray, target: np.ndarray, with_scale: bool = False):
    """Closed-form similarity/rigid alignment mapping source onto target.

    Returns (s, R, t) minimizing || target - (s R source + t) ||^2.
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    xs = source - mu_s
    xt = target - mu_t
    cov = xt.T @ xs / len(source)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    rot = u @ sgn @ vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(source)
        scale = float(np.trace(np.diag(d) @ sgn) / var_s) if var_s > 0 else 1.0
    else:
        scale = 1.0
    t = mu_t - scale * rot @ mu_s
    return scale, rot, t


def ate_rmse(estimated: np.ndarray, ground_truth: np.ndarray, align_scale: bool = False) -> float:
    """RMSE of aligned position residuals; needs >= 3 pose pairs."""
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise InvalidArgumentError("trajectories must be id-aligned and equal length")
    if len(est) < 3:
        raise InsufficientDataError("need at least 3 poses for alignment")
    s, rot, t = align_rigid(est, gt, with_scale=align_scale)
    mapped = (s * (rot @ est.T)).T + t
    resid = mapped - gt
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


def pose_from_world_to_camera(t_wc: np.ndarray, q_wc: np.ndarray) -> SE3Pose:
    """Build the internal world-to-camera pose from a trajectory-file row."""
    cam_to_world = SE3Pose(q_wc, t_wc)
    return cam_to_world.inverse()
