"""Local bundle adjustment: Levenberg-Marquardt over a covisibility window
with Huber-robustified reprojection residuals, point variables eliminated
through the Schur complement.

The reduced pose system is solved densely (windows are small); the heavy
per-factor linearization and the per-point Schur accumulation run through
the worker pool in fixed chunks, with partials combined in chunk order, so
results are bit-identical across worker counts and pipeline modes.

Pose tangent convention: right perturbation, rotation-then-translation.
A step delta = (phi, rho) updates T <- T @ [Exp(phi) | rho].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import BAConfig
from .errors import WindowTooSmallError
from .geometry import SE3Pose, se3_step
from .mapmodel import MapModel
from .parallel import SERIAL, WorkerPool

_Z_EPS = 1e-9


@dataclass
class Factor:
    kf_id: int
    point_id: int
    u: float
    v: float
    level: int


@dataclass
class BAWindow:
    local_kf_ids: list[int]
    fixed_kf_ids: list[int]
    point_ids: list[int]
    factors: list[Factor]


@dataclass
class BAReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    steps: list[tuple[float, float, bool]] = field(default_factory=list)  # (lambda, cost, accepted)
    reason: str = "not-run"

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "reason": self.reason,
            "steps": [
                {"lambda": lam, "candidate_cost": c, "accepted": acc}
                for lam, c, acc in self.steps
            ],
        }


def build_local_window(model: MapModel, current_kf_id: int, cfg: BAConfig | None = None) -> BAWindow:
    """Current keyframe plus its top covisible neighbors; their points; every
    other observer fixed (capped); gauge fixed by construction."""
    cfg = cfg or BAConfig()
    if len(model.live_keyframes()) < 2:
        raise WindowTooSmallError("need at least 2 live keyframes")
    local = [current_kf_id] + model.covisible_neighbors(current_kf_id, cfg.window_size - 1)
    local_set = set(local)

    point_ids = sorted(
        {mp_id for k in local for mp_id in model.bound_points_of(k)}
    )
    shared: dict[int, int] = {}
    for mp_id in point_ids:
        for kf_id in model.points[mp_id].observations:
            if kf_id not in local_set and model.keyframes[kf_id].alive:
                shared[kf_id] = shared.get(kf_id, 0) + 1
    fixed = sorted(shared, key=lambda k: (-shared[k], k))[: cfg.fixed_cap]

    if not fixed:
        oldest = sorted(local)[:2]
        fixed = oldest
        local = [k for k in local if k not in set(oldest)]
        local_set = set(local)

    window_set = local_set | set(fixed)
    factors: list[Factor] = []
    kept_points: list[int] = []
    for mp_id in point_ids:
        mp = model.points[mp_id]
        fs = [
            (kf_id, kp)
            for kf_id, kp in sorted(mp.observations.items())
            if kf_id in window_set
        ]
        if len(fs) < 2:
            continue
        kept_points.append(mp_id)
        for kf_id, kp in fs:
            kf = model.keyframes[kf_id]
            factors.append(
                Factor(kf_id, mp_id, float(kf.kp_u[kp]), float(kf.kp_v[kp]), int(kf.kp_level[kp]))
            )
    return BAWindow(local, sorted(fixed), kept_points, factors)


def residual_and_jacobian(
    pose: SE3Pose,
    k,
    point,
    observed,
    level: int,
    huber_delta: float,
):
    """Information-scaled residual, pose/point Jacobians, and Huber weight for
    one observation; None when the point is behind the camera."""
    p = np.asarray(point, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.float64)
    rot = pose.rotation_matrix()
    pc = pose.transform(p)
    if pc[2] <= _Z_EPS:
        return None
    inv_sigma = 1.0 / np.sqrt(k.level_sigma2(level))
    x, y, z = pc
    u = k.fx * (x / z) + k.cx
    v = k.fy * (y / z) + k.cy
    r = np.array([(u - obs[0]) * inv_sigma, (v - obs[1]) * inv_sigma])
    a = np.array(
        [
            [k.fx / z, 0.0, -k.fx * x / (z * z)],
            [0.0, k.fy / z, -k.fy * y / (z * z)],
        ]
    )
    j_point = a @ rot * inv_sigma
    px, py, pz = p
    skew_p = np.array([[0.0, -pz, py], [pz, 0.0, -px], [-py, px, 0.0]])
    j_rot = -(j_point @ skew_p)
    j_pose = np.hstack([j_rot, j_point])
    e = float(np.sqrt(r[0] ** 2 + r[1] ** 2))
    w = 1.0 if e <= huber_delta else huber_delta / e
    return r, j_pose, j_point, w


def robust_cost(e: np.ndarray, delta: float) -> np.ndarray:
    """Huber-robustified chi2 per factor given scaled residual norms."""
    return np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)


@dataclass
class _Problem:
    """Window flattened to arrays; structure is fixed across LM iterations."""

    pose_ids: list[int]  # local then fixed
    n_local: int
    point_ids: list[int]
    pt_idx: np.ndarray  # (F,) index into point_ids
    pose_idx: np.ndarray  # (F,) index into pose_ids
    obs: np.ndarray  # (F,2)
    inv_sigma: np.ndarray  # (F,)
    fx: float
    fy: float
    cx: float
    cy: float
    pair_a: np.ndarray  # local-factor index pairs grouped per point
    pair_b: np.ndarray
    pair_pt: np.ndarray
    local_f: np.ndarray  # indices of factors on local poses


def _build_problem(model: MapModel, window: BAWindow) -> _Problem:
    pose_ids = list(window.local_kf_ids) + list(window.fixed_kf_ids)
    pose_pos = {k: i for i, k in enumerate(pose_ids)}
    pt_pos = {p: i for i, p in enumerate(window.point_ids)}
    n_local = len(window.local_kf_ids)
    fs = window.factors
    pt_idx = np.array([pt_pos[f.point_id] for f in fs], dtype=np.int64)
    pose_idx = np.array([pose_pos[f.kf_id] for f in fs], dtype=np.int64)
    obs = np.array([[f.u, f.v] for f in fs]) if fs else np.zeros((0, 2))
    any_kf = model.keyframes[pose_ids[0]]
    k = any_kf.intrinsics
    sigma_table = 1.0 / np.sqrt(k.sigma2_table())
    levels = np.array([f.level for f in fs], dtype=np.int64)
    inv_sigma = sigma_table[levels] if fs else np.zeros(0)

    order = np.argsort(pt_idx, kind="stable")
    pair_a, pair_b, pair_pt, local_f = [], [], [], []
    # ordered (a, b) pairs of local-pose factors within each point group
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and pt_idx[order[j]] == pt_idx[order[i]]:
            j += 1
        group = [int(g) for g in order[i:j] if pose_idx[g] < n_local]
        for a in group:
            local_f.append(a)
            for b in group:
                pair_a.append(a)
                pair_b.append(b)
                pair_pt.append(int(pt_idx[a]))
        i = j
    return _Problem(
        pose_ids=pose_ids,
        n_local=n_local,
        point_ids=list(window.point_ids),
        pt_idx=pt_idx,
        pose_idx=pose_idx,
        obs=obs,
        inv_sigma=inv_sigma,
        fx=k.fx,
        fy=k.fy,
        cx=k.cx,
        cy=k.cy,
        pair_a=np.array(pair_a, dtype=np.int64),
        pair_b=np.array(pair_b, dtype=np.int64),
        pair_pt=np.array(pair_pt, dtype=np.int64),
        local_f=np.array(sorted(local_f), dtype=np.int64),
    )


def _linearize(prob: _Problem, rotations, translations, points, delta, pool: WorkerPool, chunk):
    """Per-factor scaled residuals and Jacobians; chunked, combined in order."""
    n = len(prob.pt_idx)
    rot_all = rotations[prob.pose_idx] if n else rotations[:0]
    t_all = translations[prob.pose_idx] if n else translations[:0]
    pts = points[prob.pt_idx] if n else points[:0]

    def run_chunk(s, e):
        rf = rot_all[s:e]
        tf = t_all[s:e]
        pw = pts[s:e]
        x, y, z = rotate_rows_batch(rf, pw)
        x = x + tf[:, 0]
        y = y + tf[:, 1]
        z = z + tf[:, 2]
        valid = z > _Z_EPS
        zs = np.where(valid, z, 1.0)
        inv_s = prob.inv_sigma[s:e]
        u = prob.fx * (x / zs) + prob.cx
        v = prob.fy * (y / zs) + prob.cy
        r = np.stack(
            [(u - prob.obs[s:e, 0]) * inv_s, (v - prob.obs[s:e, 1]) * inv_s], axis=1
        )
        a = np.zeros((e - s, 2, 3))
        a[:, 0, 0] = prob.fx / zs
        a[:, 0, 2] = -prob.fx * x / (zs * zs)
        a[:, 1, 1] = prob.fy / zs
        a[:, 1, 2] = -prob.fy * y / (zs * zs)
        jl = np.einsum("fab,fbc->fac", a, rf) * inv_s[:, np.newaxis, np.newaxis]
        sk = np.zeros((e - s, 3, 3))
        sk[:, 0, 1] = -pw[:, 2]
        sk[:, 0, 2] = pw[:, 1]
        sk[:, 1, 0] = pw[:, 2]
        sk[:, 1, 2] = -pw[:, 0]
        sk[:, 2, 0] = -pw[:, 1]
        sk[:, 2, 1] = pw[:, 0]
        jrot = -np.einsum("fab,fbc->fac", jl, sk)
        jp = np.concatenate([jrot, jl], axis=2)
        r = np.where(valid[:, np.newaxis], r, 0.0)
        jl = np.where(valid[:, np.newaxis, np.newaxis], jl, 0.0)
        jp = np.where(valid[:, np.newaxis, np.newaxis], jp, 0.0)
        return r, jp, jl, valid

    parts = pool.map_chunks(run_chunk, n, chunk)
    if not parts:
        return (np.zeros((0, 2)), np.zeros((0, 2, 6)), np.zeros((0, 2, 3)), np.zeros(0, dtype=bool))
    r = np.concatenate([p[0] for p in parts])
    jp = np.concatenate([p[1] for p in parts])
    jl = np.concatenate([p[2] for p in parts])
    valid = np.concatenate([p[3] for p in parts])
    return r, jp, jl, valid


def rotate_rows_batch(rot, p):
    """(F,3,3) @ (F,3) written out elementwise for bit-stable batching."""
    x = rot[:, 0, 0] * p[:, 0] + rot[:, 0, 1] * p[:, 1] + rot[:, 0, 2] * p[:, 2]
    y = rot[:, 1, 0] * p[:, 0] + rot[:, 1, 1] * p[:, 1] + rot[:, 1, 2] * p[:, 2]
    z = rot[:, 2, 0] * p[:, 0] + rot[:, 2, 1] * p[:, 1] + rot[:, 2, 2] * p[:, 2]
    return x, y, z


def _evaluate_cost(prob, rotations, translations, points, delta, pool, chunk) -> float:
    n = len(prob.pt_idx)
    rot_all = rotations[prob.pose_idx] if n else rotations[:0]
    t_all = translations[prob.pose_idx] if n else translations[:0]
    pts = points[prob.pt_idx] if n else points[:0]

    def run_chunk(s, e):
        rf, tf, pw = rot_all[s:e], t_all[s:e], pts[s:e]
        x, y, z = rotate_rows_batch(rf, pw)
        x = x + tf[:, 0]
        y = y + tf[:, 1]
        z = z + tf[:, 2]
        valid = z > _Z_EPS
        zs = np.where(valid, z, 1.0)
        inv_s = prob.inv_sigma[s:e]
        ru = (prob.fx * (x / zs) + prob.cx - prob.obs[s:e, 0]) * inv_s
        rv = (prob.fy * (y / zs) + prob.cy - prob.obs[s:e, 1]) * inv_s
        e_norm = np.sqrt(ru * ru + rv * rv)
        return np.where(valid, robust_cost(e_norm, delta), 0.0)

    parts = pool.map_chunks(run_chunk, n, chunk)
    if not parts:
        return 0.0
    return float(np.sum(np.concatenate(parts)))


@dataclass
class NormalEquations:
    """Per-pose, per-point, and coupling blocks of the damped normal system."""

    h_pp: np.ndarray  # (P,6,6) block diagonal (poses couple only through points)
    h_ll: np.ndarray  # (N,3,3)
    w: np.ndarray  # (F,6,3) coupling blocks, zero for fixed-pose factors
    b_p: np.ndarray  # (P,6)
    b_l: np.ndarray  # (N,3)


def _assemble(prob: _Problem, r, jp, jl, valid, delta) -> NormalEquations:
    n_pts = len(prob.point_ids)
    n_local = prob.n_local
    e = np.sqrt(r[:, 0] ** 2 + r[:, 1] ** 2)
    w_huber = np.where(e <= delta, 1.0, np.where(e > 0, delta / np.maximum(e, 1e-300), 1.0))
    wf = np.where(valid, w_huber, 0.0)

    h_ll = np.zeros((n_pts, 3, 3))
    contrib_ll = np.einsum("fab,fac->fbc", jl, jl) * wf[:, np.newaxis, np.newaxis]
    np.add.at(h_ll, prob.pt_idx, contrib_ll)
    b_l = np.zeros((n_pts, 3))
    np.add.at(b_l, prob.pt_idx, -np.einsum("fab,fa->fb", jl, r) * wf[:, np.newaxis])

    h_pp = np.zeros((n_local, 6, 6))
    b_p = np.zeros((n_local, 6))
    w_blocks = np.zeros((len(prob.pt_idx), 6, 3))
    lf = prob.local_f
    if len(lf):
        jp_l = jp[lf]
        wl = wf[lf]
        np.add.at(
            h_pp,
            prob.pose_idx[lf],
            np.einsum("fab,fac->fbc", jp_l, jp_l) * wl[:, np.newaxis, np.newaxis],
        )
        np.add.at(
            b_p, prob.pose_idx[lf], -np.einsum("fab,fa->fb", jp_l, r[lf]) * wl[:, np.newaxis]
        )
        w_blocks[lf] = np.einsum("fab,fac->fbc", jp_l, jl[lf]) * wl[:, np.newaxis, np.newaxis]
    return NormalEquations(h_pp, h_ll, w_blocks, b_p, b_l)


def _inv3(m: np.ndarray) -> np.ndarray:
    """Closed-form batched 3x3 inverse (adjugate / determinant)."""
    a, b, c = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    d, e, f = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    g, h, i = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    co00 = e * i - f * h
    co01 = c * h - b * i
    co02 = b * f - c * e
    co10 = f * g - d * i
    co11 = a * i - c * g
    co12 = c * d - a * f
    co20 = d * h - e * g
    co21 = b * g - a * h
    co22 = a * e - b * d
    det = a * co00 + b * co10 + c * co20
    out = np.empty_like(m)
    out[:, 0, 0] = co00
    out[:, 0, 1] = co01
    out[:, 0, 2] = co02
    out[:, 1, 0] = co10
    out[:, 1, 1] = co11
    out[:, 1, 2] = co12
    out[:, 2, 0] = co20
    out[:, 2, 1] = co21
    out[:, 2, 2] = co22
    return out / det[:, np.newaxis, np.newaxis]


def schur_reduce(
    prob: _Problem,
    normal: NormalEquations,
    lam: float,
    pool: WorkerPool | None = None,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Reduced pose system: S = Hpp+lamI - W (Hll+lamI)^-1 W^T, b_s likewise.

    Accumulated data-parallel over point chunks; partials are combined in
    chunk order so the result is bit-identical for any worker count.
    """
    pool = pool or SERIAL
    n_local = prob.n_local
    n_pts = len(prob.point_ids)
    eye = np.eye(3) * lam
    h_ll_d = normal.h_ll + eye[np.newaxis, :, :]
    inv_ll = _inv3(h_ll_d) if n_pts else np.zeros((0, 3, 3))
    y = (
        np.einsum("nab,nb->na", inv_ll, normal.b_l) if n_pts else np.zeros((0, 3))
    )  # (Hll+lamI)^-1 b_l

    s_mat = np.zeros((n_local, n_local, 6, 6))  # block-row, block-col layout
    for i in range(n_local):
        s_mat[i, i] = normal.h_pp[i] + np.eye(6) * lam
    b_s = normal.b_p.copy()

    pair_starts = np.searchsorted(prob.pair_pt, np.arange(n_pts + 1)) if n_pts else np.zeros(1, int)
    lf = prob.local_f
    lf_pts = prob.pt_idx[lf] if len(lf) else np.zeros(0, dtype=np.int64)
    lf_starts = np.searchsorted(lf_pts, np.arange(n_pts + 1)) if n_pts else np.zeros(1, int)

    def run_chunk(ps, pe):
        s_part = np.zeros_like(s_mat)
        b_part = np.zeros_like(b_s)
        a0, a1 = pair_starts[ps], pair_starts[pe]
        if a1 > a0:
            pa = prob.pair_a[a0:a1]
            pb = prob.pair_b[a0:a1]
            ppt = prob.pair_pt[a0:a1]
            contrib = np.einsum(
                "kab,kbc,kdc->kad", normal.w[pa], inv_ll[ppt], normal.w[pb]
            )
            np.add.at(s_part, (prob.pose_idx[pa], prob.pose_idx[pb]), -contrib)
        f0, f1 = lf_starts[ps], lf_starts[pe]
        if f1 > f0:
            fs = lf[f0:f1]
            contrib_b = np.einsum("kab,kb->ka", normal.w[fs], y[prob.pt_idx[fs]])
            np.add.at(b_part, prob.pose_idx[fs], -contrib_b)
        return s_part, b_part

    for s_part, b_part in pool.map_chunks(run_chunk, n_pts, chunk):
        s_mat += s_part
        b_s += b_part
    dense = s_mat.transpose(0, 2, 1, 3).reshape(n_local * 6, n_local * 6)
    return dense, b_s.reshape(-1)


def back_substitute(prob: _Problem, normal: NormalEquations, lam: float, delta_p: np.ndarray) -> np.ndarray:
    """Point updates given the pose update: dl = (Hll+lamI)^-1 (b_l - W^T dp)."""
    n_pts = len(prob.point_ids)
    if n_pts == 0:
        return np.zeros((0, 3))
    inv_ll = _inv3(normal.h_ll + np.eye(3)[np.newaxis] * lam)
    rhs = normal.b_l.copy()
    lf = prob.local_f
    if len(lf):
        dp_f = delta_p.reshape(-1, 6)[prob.pose_idx[lf]]
        contrib = np.einsum("kab,ka->kb", normal.w[lf], dp_f)
        np.add.at(rhs, prob.pt_idx[lf], -contrib)
    return np.einsum("nab,nb->na", inv_ll, rhs)


def dense_full_step(prob: _Problem, normal: NormalEquations, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Oracle: solve the undamped-structure full system (H + lam I) delta = b
    densely, returning (delta_p, delta_l). Only sensible for small windows."""
    n_local, n_pts = prob.n_local, len(prob.point_ids)
    np_dim, nl_dim = n_local * 6, n_pts * 3
    h = np.zeros((np_dim + nl_dim, np_dim + nl_dim))
    b = np.zeros(np_dim + nl_dim)
    for i in range(n_local):
        h[i * 6 : (i + 1) * 6, i * 6 : (i + 1) * 6] = normal.h_pp[i]
        b[i * 6 : (i + 1) * 6] = normal.b_p[i]
    for j in range(n_pts):
        sl = np_dim + j * 3
        h[sl : sl + 3, sl : sl + 3] = normal.h_ll[j]
        b[sl : sl + 3] = normal.b_l[j]
    for f in prob.local_f:
        i = prob.pose_idx[f]
        j = prob.pt_idx[f]
        blk = normal.w[f]
        h[i * 6 : (i + 1) * 6, np_dim + j * 3 : np_dim + j * 3 + 3] += blk
        h[np_dim + j * 3 : np_dim + j * 3 + 3, i * 6 : (i + 1) * 6] += blk.T
    h += np.eye(np_dim + nl_dim) * lam
    sol = np.linalg.solve(h, b)
    return sol[:np_dim].reshape(n_local, 6), sol[np_dim:].reshape(n_pts, 3)


def lm_optimize(
    model: MapModel,
    window: BAWindow,
    cfg: BAConfig | None = None,
    pool: WorkerPool | None = None,
) -> BAReport:
    """Standard LM loop; accepted state is written back to the map (local
    poses and window points), fixed poses untouched."""
    cfg = cfg or BAConfig()
    pool = pool or SERIAL
    report = BAReport()
    if not window.factors or not window.point_ids:
        report.reason = "empty-window"
        return report

    prob = _build_problem(model, window)
    poses = [model.keyframes[k].pose for k in prob.pose_ids]
    points = np.stack([model.points[p].position for p in prob.point_ids])

    def pose_arrays(ps):
        rot = np.stack([p.rotation_matrix() for p in ps])
        tr = np.stack([p.trans for p in ps])
        return rot, tr

    rot, tr = pose_arrays(poses)
    cost = _evaluate_cost(prob, rot, tr, points, cfg.huber_delta, pool, cfg.chunk_size)
    report.initial_cost = cost
    if not np.isfinite(cost):
        report.reason = "non-finite-cost"
        return report

    lam = cfg.lambda0
    reason = "max-iterations"
    n_local = prob.n_local
    for it in range(cfg.max_iters):
        report.iterations = it + 1
        r, jp, jl, valid = _linearize(
            prob, rot, tr, points, cfg.huber_delta, pool, cfg.chunk_size
        )
        if not valid.any():
            reason = "all-factors-deactivated"
            break
        normal = _assemble(prob, r, jp, jl, valid, cfg.huber_delta)
        accepted = False
        while lam <= cfg.lambda_max:
            s_mat, b_s = schur_reduce(prob, normal, lam, pool, cfg.chunk_size)
            try:
                delta_p = (
                    np.linalg.solve(s_mat, b_s).reshape(n_local, 6)
                    if n_local
                    else np.zeros((0, 6))
                )
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            delta_l = back_substitute(prob, normal, lam, delta_p)
            cand_poses = list(poses)
            for i in range(n_local):
                cand_poses[i] = poses[i].compose(se3_step(delta_p[i, :3], delta_p[i, 3:]))
            cand_points = points + delta_l
            cand_rot, cand_tr = pose_arrays(cand_poses)
            new_cost = _evaluate_cost(
                prob, cand_rot, cand_tr, cand_points, cfg.huber_delta, pool, cfg.chunk_size
            )
            report.steps.append((lam, new_cost, bool(new_cost < cost)))
            if np.isfinite(new_cost) and new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                poses, points = cand_poses, cand_points
                rot, tr = cand_rot, cand_tr
                cost = new_cost
                lam = max(lam / cfg.lambda_down, 1e-12)
                accepted = True
                if rel < cfg.cost_tol:
                    reason = "converged"
                break
            # rejected: a tiny relative gap also counts as converged
            if np.isfinite(new_cost) and abs(new_cost - cost) <= cfg.cost_tol * max(cost, 1e-300):
                reason = "converged"
                break
            lam *= cfg.lambda_up
        if lam > cfg.lambda_max:
            reason = "lambda-overflow"
            break
        if reason == "converged":
            break

    report.final_cost = cost
    report.reason = reason

    for i in range(n_local):
        model.keyframes[prob.pose_ids[i]].pose = poses[i]
    for j, mp_id in enumerate(prob.point_ids):
        model.points[mp_id].position = points[j].copy()
    return report


def optimize_local_window(model, current_kf_id, cfg=None, pool=None) -> BAReport:
    """Convenience wrapper: build the window around a keyframe and optimize."""
    window = build_local_window(model, current_kf_id, cfg)
    return lm_optimize(model, window, cfg, pool)
