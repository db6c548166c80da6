"""Poses, pinhole cameras, binary descriptors, and two-view geometry.

The projection / epipolar formulas are written as plain elementwise
arithmetic so the same function evaluates a single pair (scalars) or a
whole batch (arrays) with bitwise-identical IEEE results. That property is
what lets the sequential reference matchers and the vectorized kernels
agree byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GateConfig
from .errors import DegenerateGeometryError, InvalidArgumentError

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = 32

_BASELINE_EPS = 1e-9
_HOMOG_EPS = 1e-12


def _as_vec(x, n) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (n,):
        raise InvalidArgumentError(f"expected shape ({n},), got {v.shape}")
    return v


@dataclass(frozen=True)
class SE3Pose:
    """World-to-camera rigid transform: p_cam = R @ p_world + t.

    quat is (x, y, z, w), unit norm; trans is meters.
    """

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        q = _as_vec(self.quat, 4).copy()
        n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
        if n <= 0 or not np.isfinite(n):
            raise InvalidArgumentError("quaternion norm must be positive and finite")
        q /= n
        if q[3] < 0:  # canonical hemisphere, keeps composition deterministic
            q = -q
        q.flags.writeable = False
        t = _as_vec(self.trans, 3).copy()
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_rotation_matrix(rot: np.ndarray, trans) -> "SE3Pose":
        return SE3Pose(quat_from_matrix(np.asarray(rot, dtype=np.float64)), trans)

    def rotation_matrix(self) -> np.ndarray:
        x, y, z, w = self.quat
        xx, yy, zz = x * x, y * y, z * z
        xy, xz, yz = x * y, x * z, y * z
        wx, wy, wz = w * x, w * y, w * z
        return np.array(
            [
                [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
                [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
                [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
            ]
        )

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """Apply `other` first, then self (matrix product self @ other)."""
        q = quat_multiply(self.quat, other.quat)
        t = rotate_rows(self.rotation_matrix(), other.trans[0], other.trans[1], other.trans[2])
        return SE3Pose(q, np.array([t[0] + self.trans[0], t[1] + self.trans[1], t[2] + self.trans[2]]))

    def inverse(self) -> "SE3Pose":
        x, y, z, w = self.quat
        qinv = np.array([-x, -y, -z, w])
        rt = self.rotation_matrix().T
        ti = rotate_rows(rt, self.trans[0], self.trans[1], self.trans[2])
        return SE3Pose(qinv, np.array([-ti[0], -ti[1], -ti[2]]))

    def transform(self, point) -> np.ndarray:
        p = _as_vec(point, 3)
        r = self.rotation_matrix()
        out = rotate_rows(r, p[0], p[1], p[2])
        return np.array(
            [out[0] + self.trans[0], out[1] + self.trans[1], out[2] + self.trans[2]]
        )

    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        rt = self.rotation_matrix().T
        c = rotate_rows(rt, self.trans[0], self.trans[1], self.trans[2])
        return np.array([-c[0], -c[1], -c[2]])

    def rotation_angle_to(self, other: "SE3Pose") -> float:
        """Absolute rotation angle (rad) between the two poses."""
        d = abs(float(np.dot(self.quat, other.quat)))
        return 2.0 * float(np.arccos(min(1.0, d)))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trans
        return m


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    return a.compose(b)


def quat_multiply(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = qa
    bx, by, bz, bw = qb
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (x, y, z, w)."""
    m = rot
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return np.array([x, y, z, w])


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula, rotation matrix from a rotation vector."""
    phi = _as_vec(phi, 3)
    theta = float(np.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2))
    k = skew(phi)
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def se3_step(phi, rho) -> SE3Pose:
    """Right-perturbation increment [Exp(phi) | rho] as an SE3Pose."""
    return SE3Pose.from_rotation_matrix(exp_so3(phi), rho)


def skew(v) -> np.ndarray:
    v = _as_vec(v, 3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotate_rows(rot: np.ndarray, x, y, z):
    """R @ p written out elementwise; works for scalars or equal-shaped arrays."""
    rx = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * z
    ry = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * z
    rz = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * z
    return rx, ry, rz


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with an image pyramid (level 0 = finest)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    num_levels: int = 8
    scale_factor: float = 1.2

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")
        if self.num_levels < 1:
            raise InvalidArgumentError("num_levels must be >= 1")
        if self.scale_factor <= 1.0:
            raise InvalidArgumentError("scale_factor must be > 1")

    def level_scale(self, level: int) -> float:
        return self.scale_factor ** level

    def level_sigma2(self, level: int) -> float:
        return self.scale_factor ** (2 * level)

    def sigma2_table(self) -> np.ndarray:
        return np.array([self.level_sigma2(l) for l in range(self.num_levels)])

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project_pixels(k: CameraIntrinsics, x, y, z):
    """Pinhole projection, elementwise; returns (u, v, in_view mask).

    z <= 0 or out-of-bounds projections are flagged, not raised.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * (x / z) + k.cx
        v = k.fy * (y / z) + k.cy
    ok = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return u, v, ok


def project(k: CameraIntrinsics, p_cam) -> tuple[float, float] | None:
    """Project one camera-frame point; None when out of view."""
    p = _as_vec(p_cam, 3)
    u, v, ok = project_pixels(k, p[0], p[1], p[2])
    if not bool(ok):
        return None
    return float(u), float(v)


def triangulate(
    pose_a: SE3Pose,
    pose_b: SE3Pose,
    k_a: CameraIntrinsics,
    k_b: CameraIntrinsics,
    pix_a,
    pix_b,
) -> np.ndarray:
    """Homogeneous DLT from two views: 4x4 stacked system, smallest singular vector."""
    ca, cb = pose_a.center(), pose_b.center()
    baseline = float(np.sqrt(np.sum((ca - cb) ** 2)))
    if baseline < _BASELINE_EPS:
        raise DegenerateGeometryError(f"baseline {baseline:.3e} m below {_BASELINE_EPS}")
    pa = _as_vec(pix_a, 2)
    pb = _as_vec(pix_b, 2)
    proj_a = k_a.matrix() @ pose_a.matrix()[:3, :]
    proj_b = k_b.matrix() @ pose_b.matrix()[:3, :]
    rows = np.empty((4, 4))
    rows[0] = pa[0] * proj_a[2] - proj_a[0]
    rows[1] = pa[1] * proj_a[2] - proj_a[1]
    rows[2] = pb[0] * proj_b[2] - proj_b[0]
    rows[3] = pb[1] * proj_b[2] - proj_b[1]
    _, _, vt = np.linalg.svd(rows)
    hom = vt[-1]
    if abs(hom[3]) < _HOMOG_EPS:
        raise DegenerateGeometryError("triangulated point at infinity")
    return hom[:3] / hom[3]


def relative_pose(pose_a: SE3Pose, pose_b: SE3Pose) -> SE3Pose:
    """Transform taking a-camera coordinates to b-camera coordinates."""
    return pose_b.compose(pose_a.inverse())


def fundamental_matrix(
    pose_a: SE3Pose, pose_b: SE3Pose, k_a: CameraIntrinsics, k_b: CameraIntrinsics
) -> np.ndarray:
    """F mapping pixels of view a to epipolar lines in view b."""
    rel = relative_pose(pose_a, pose_b)
    t = rel.trans
    tnorm = float(np.sqrt(t[0] ** 2 + t[1] ** 2 + t[2] ** 2))
    if tnorm < _BASELINE_EPS:
        raise DegenerateGeometryError("zero baseline; fundamental matrix undefined")
    essential = skew(t) @ rel.rotation_matrix()
    kb_inv_t = np.linalg.inv(k_b.matrix()).T
    ka_inv = np.linalg.inv(k_a.matrix())
    return kb_inv_t @ essential @ ka_inv


def epipolar_line(f: np.ndarray, u, v):
    """Line coefficients in the second image for pixel(s) (u, v) of the first."""
    l0 = f[0, 0] * u + f[0, 1] * v + f[0, 2]
    l1 = f[1, 0] * u + f[1, 1] * v + f[1, 2]
    l2 = f[2, 0] * u + f[2, 1] * v + f[2, 2]
    return l0, l1, l2


def epipolar_sqdist(l0, l1, l2, u, v):
    """Squared point-to-line pixel distance, elementwise; inf for degenerate lines."""
    num = l0 * u + l1 * v + l2
    num = num * num
    den = l0 * l0 + l1 * l1
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = num / den
    return np.where(den > 0, d2, np.inf)


def epipolar_error(
    pose_a: SE3Pose,
    pose_b: SE3Pose,
    k_a: CameraIntrinsics,
    k_b: CameraIntrinsics,
    pix_a,
    pix_b,
) -> float:
    """Squared distance (px^2) from pix_b to the epipolar line induced by pix_a."""
    pa = _as_vec(pix_a, 2)
    pb = _as_vec(pix_b, 2)
    f = fundamental_matrix(pose_a, pose_b, k_a, k_b)
    l0, l1, l2 = epipolar_line(f, pa[0], pa[1])
    return float(epipolar_sqdist(l0, l1, l2, pb[0], pb[1]))


def parallax_cosine(point, center_a, center_b) -> float:
    """Cosine of the angle subtended at `point` by the two camera centers."""
    p = _as_vec(point, 3)
    ca = _as_vec(center_a, 3)
    cb = _as_vec(center_b, 3)
    ra = p - ca
    rb = p - cb
    na = float(np.sqrt(ra[0] ** 2 + ra[1] ** 2 + ra[2] ** 2))
    nb = float(np.sqrt(rb[0] ** 2 + rb[1] ** 2 + rb[2] ** 2))
    if na < _HOMOG_EPS or nb < _HOMOG_EPS:
        raise DegenerateGeometryError("point coincides with a camera center")
    c = float(ra[0] * rb[0] + ra[1] * rb[1] + ra[2] * rb[2]) / (na * nb)
    return min(1.0, max(-1.0, c))


# --- binary descriptors -------------------------------------------------

def random_descriptors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)


def flip_descriptor_bits(rng: np.random.Generator, desc: np.ndarray, nbits: int) -> np.ndarray:
    """Copy of desc with nbits distinct random bits flipped."""
    out = desc.copy()
    if nbits <= 0:
        return out
    positions = rng.choice(DESCRIPTOR_BITS, size=min(nbits, DESCRIPTOR_BITS), replace=False)
    for pos in positions:
        out[pos >> 3] ^= np.uint8(1 << (int(pos) & 7))
    return out


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two 256-bit descriptors (32-byte arrays)."""
    av = np.asarray(a, dtype=np.uint8)
    bv = np.asarray(b, dtype=np.uint8)
    if av.shape != (DESCRIPTOR_BYTES,) or bv.shape != (DESCRIPTOR_BYTES,):
        raise InvalidArgumentError("descriptors must be 32-byte arrays")
    return int(np.bitwise_count(av ^ bv).sum(dtype=np.int64))


def hamming_to_many(desc: np.ndarray, descs: np.ndarray) -> np.ndarray:
    """Distances from one descriptor to each row of an (N, 32) array."""
    x = np.bitwise_xor(descs, desc[np.newaxis, :])
    return np.bitwise_count(x).sum(axis=1, dtype=np.int64)


def hamming_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) distance matrix between two descriptor arrays."""
    x = np.bitwise_xor(a[:, np.newaxis, :], b[np.newaxis, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def hamming_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rowwise distances between two (K, 32) descriptor arrays."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=1, dtype=np.int64)


# --- creation gates -----------------------------------------------------

@dataclass(frozen=True)
class GateResult:
    passed: bool
    reason: str | None = None


def check_creation_gates(
    pose_a: SE3Pose,
    pose_b: SE3Pose,
    k_a: CameraIntrinsics,
    k_b: CameraIntrinsics,
    pix_a,
    pix_b,
    level_a: int,
    level_b: int,
    candidate,
    config: GateConfig | None = None,
) -> GateResult:
    """All-or-nothing acceptance test for a triangulated candidate point.

    Checks, in order: parallax, positive depth in both frames, per-level
    chi-square reprojection error in both images, and scale consistency
    between the distance ratio and the keypoint level scales.
    """
    cfg = config or GateConfig()
    point = _as_vec(candidate, 3)
    ca, cb = pose_a.center(), pose_b.center()
    try:
        cos_par = parallax_cosine(point, ca, cb)
    except DegenerateGeometryError:
        return GateResult(False, "parallax")
    if not (cos_par < cfg.cos_parallax_max):
        return GateResult(False, "parallax")

    pc_a = pose_a.transform(point)
    pc_b = pose_b.transform(point)
    if pc_a[2] <= 0 or pc_b[2] <= 0:
        return GateResult(False, "positive-depth")

    pa = _as_vec(pix_a, 2)
    pb = _as_vec(pix_b, 2)
    for k, pc, pix, level in ((k_a, pc_a, pa, level_a), (k_b, pc_b, pb, level_b)):
        u = k.fx * (pc[0] / pc[2]) + k.cx
        v = k.fy * (pc[1] / pc[2]) + k.cy
        err2 = (u - pix[0]) ** 2 + (v - pix[1]) ** 2
        if err2 > cfg.chi2_mono * k.level_sigma2(level):
            return GateResult(False, "reprojection")

    dist_a = float(np.sqrt(np.sum((point - ca) ** 2)))
    dist_b = float(np.sqrt(np.sum((point - cb) ** 2)))
    if dist_a < _HOMOG_EPS or dist_b < _HOMOG_EPS:
        return GateResult(False, "scale")
    ratio_dist = dist_a / dist_b
    ratio_scale = k_a.level_scale(level_a) / k_b.level_scale(level_b)
    slack = cfg.scale_ratio_slack * max(k_a.scale_factor, k_b.scale_factor)
    if not (ratio_scale / slack <= ratio_dist <= ratio_scale * slack):
        return GateResult(False, "scale")

    return GateResult(True, None)
