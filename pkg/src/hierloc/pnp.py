"""Absolute pose from 2D-3D matches: P3P minimal solver inside RANSAC.

The P3P solver follows Grunert's three-distance formulation: the unknown
depths along the three bearings satisfy three law-of-cosines equations,
which reduce to a quartic in the depth ratio ``s3 / s1``. Real roots are
polished with Newton steps on the original equations and the pose is
recovered by aligning the two point triads.

RANSAC draws 4 matches per hypothesis: 3 feed the solver and the 4th picks
among its (up to 4) solutions. The winning hypothesis is refined with
Levenberg-Marquardt over its inliers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateConfigurationError, ValidationError
from .geometry import PinholeCamera, Pose, bearings as pixel_bearings, so3_exp

DEFAULT_SEED = 20180914
P3P_ANGLE_TOL = 1e-6


# ----------------------------------------------------------------------------
# P3P


@numba.njit(cache=True, nogil=True)
def _polymul(a, b):
    out = np.zeros(a.shape[0] + b.shape[0] - 1)
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i + j] += a[i] * b[j]
    return out


@numba.njit(cache=True, nogil=True)
def _quartic_real_roots(c):
    """Real roots of c[0] + c[1] v + ... + c[4] v^4 (ascending coefficients)."""
    roots = np.empty(4)
    count = 0
    lead = c[4]
    scale = 0.0
    for i in range(5):
        scale = max(scale, abs(c[i]))
    if scale == 0.0 or abs(lead) < 1e-14 * scale:
        return roots, 0
    comp = np.zeros((4, 4))
    for i in range(4):
        comp[0, i] = -c[3 - i] / lead
    for i in range(1, 4):
        comp[i, i - 1] = 1.0
    ev = np.linalg.eigvals(comp.astype(np.complex128))
    for i in range(4):
        r = ev[i]
        if abs(r.imag) > 1e-4 * (1.0 + abs(r.real)):
            continue
        v = r.real
        # Newton polish on the quartic
        for _ in range(8):
            p = (((c[4] * v + c[3]) * v + c[2]) * v + c[1]) * v + c[0]
            dp = ((4.0 * c[4] * v + 3.0 * c[3]) * v + 2.0 * c[2]) * v + c[1]
            if dp == 0.0:
                break
            step = p / dp
            v -= step
            if abs(step) <= 1e-15 * (1.0 + abs(v)):
                break
        roots[count] = v
        count += 1
    return roots, count


@numba.njit(cache=True, nogil=True)
def _triad(p0, p1, p2):
    e1 = p1 - p0
    e1 = e1 / np.sqrt(np.sum(e1 * e1))
    w = p2 - p0
    e3 = np.cross(e1, w)
    e3 = e3 / np.sqrt(np.sum(e3 * e3))
    e2 = np.cross(e3, e1)
    F = np.empty((3, 3))
    F[:, 0] = e1
    F[:, 1] = e2
    F[:, 2] = e3
    return F


@numba.njit(cache=True, nogil=True)
def _p3p(bear, pts, out_R, out_t):
    """Solve for up to 4 poses; returns the number written to out_R/out_t."""
    b1 = bear[0]
    b2 = bear[1]
    b3 = bear[2]
    P1 = pts[0]
    P2 = pts[1]
    P3 = pts[2]
    a2 = np.sum((P2 - P3) ** 2)
    b2_ = np.sum((P1 - P3) ** 2)
    c2 = np.sum((P1 - P2) ** 2)
    if a2 < 1e-18 or b2_ < 1e-18 or c2 < 1e-18:
        return 0
    ca = np.sum(b2 * b3)
    cb = np.sum(b1 * b3)
    cg = np.sum(b1 * b2)
    # normalize by b^2 to keep coefficients O(1)
    A = a2 / b2_
    C = c2 / b2_
    amc = A - C
    # u(v) = N(v) / Dn(v)
    N = np.array([amc + 1.0, -2.0 * cb * amc, amc - 1.0])
    Dn = np.array([2.0 * cg, -2.0 * ca])
    base = np.array([1.0, -2.0 * cb, 1.0])  # 1 + v^2 - 2 v cb
    Dn2 = _polymul(Dn, Dn)
    ND = _polymul(N, Dn)
    NN = _polymul(N, N)
    CD = _polymul(base, Dn2)
    # Dn^2 + N^2 - 2 cg N Dn - C (1 + v^2 - 2 v cb) Dn^2 = 0
    Q = NN - C * CD
    Q[:3] += Dn2
    Q[:4] -= 2.0 * cg * ND
    vs, nv = _quartic_real_roots(Q)
    b_len = np.sqrt(b2_)
    count = 0
    for r in range(nv):
        v = vs[r]
        if v <= 0.0:
            continue
        den = 1.0 + v * v - 2.0 * v * cb
        if den <= 0.0:
            continue
        dnv = Dn[0] + Dn[1] * v
        if abs(dnv) < 1e-12:
            continue
        u = (N[0] + N[1] * v + N[2] * v * v) / dnv
        if u <= 0.0:
            continue
        s1 = b_len / np.sqrt(den)
        s = np.array([s1, u * s1, v * s1])
        # Newton on the three distance equations
        for _ in range(10):
            F = np.array([
                s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * ca - a2,
                s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cb - b2_,
                s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cg - c2,
            ])
            J = np.array([
                [0.0, 2.0 * s[1] - 2.0 * s[2] * ca, 2.0 * s[2] - 2.0 * s[1] * ca],
                [2.0 * s[0] - 2.0 * s[2] * cb, 0.0, 2.0 * s[2] - 2.0 * s[0] * cb],
                [2.0 * s[0] - 2.0 * s[1] * cg, 2.0 * s[1] - 2.0 * s[0] * cg, 0.0],
            ])
            if abs(np.linalg.det(J)) < 1e-300:
                break
            step = np.linalg.solve(J, F)
            s = s - step
            if np.max(np.abs(step)) <= 1e-15 * (1.0 + np.max(np.abs(s))):
                break
        if s[0] <= 0.0 or s[1] <= 0.0 or s[2] <= 0.0:
            continue
        X1 = s[0] * b1
        X2 = s[1] * b2
        X3 = s[2] * b3
        Fc = _triad(X1, X2, X3)
        Fw = _triad(P1, P2, P3)
        R = Fc @ Fw.T
        t = X1 - R @ P1
        # keep only solutions that satisfy the bearing constraints
        good = True
        for i in range(3):
            pc = R @ pts[i] + t
            nrm = np.sqrt(np.sum(pc * pc))
            cosang = np.sum(pc * bear[i]) / nrm
            if cosang > 1.0:
                cosang = 1.0
            # angle via the cross product is accurate for tiny angles
            sinang = np.sqrt(np.sum(np.cross(pc, bear[i]) ** 2)) / nrm
            if math.atan2(sinang, cosang) > P3P_ANGLE_TOL:
                good = False
        if not good:
            continue
        dup = False
        for j in range(count):
            if np.max(np.abs(out_R[j] - R)) < 1e-12 and np.max(np.abs(out_t[j] - t)) < 1e-12:
                dup = True
        if dup:
            continue
        out_R[count] = R
        out_t[count] = t
        count += 1
        if count == 4:
            break
    return count


def _check_p3p_input(bearings: np.ndarray, points: np.ndarray) -> None:
    if bearings.shape != (3, 3) or points.shape != (3, 3):
        raise ValidationError(f"P3P needs 3 bearings and 3 points, got {bearings.shape} and {points.shape}")
    for i, j in ((0, 1), (0, 2), (1, 2)):
        if np.linalg.norm(points[i] - points[j]) <= 1e-9:
            raise DegenerateConfigurationError(f"points {i} and {j} coincide")
        if np.linalg.norm(bearings[i] - bearings[j]) <= 1e-9:
            raise DegenerateConfigurationError(f"bearings {i} and {j} coincide")
    area = 0.5 * np.linalg.norm(np.cross(points[1] - points[0], points[2] - points[0]))
    if area <= 1e-12:
        raise DegenerateConfigurationError("points are collinear")


def solve_p3p(bearings, points) -> list[Pose]:
    """All poses (at most 4) mapping each world point onto its bearing ray."""
    bearings = np.asarray(bearings, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    _check_p3p_input(bearings, points)
    bearings = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    out_R = np.empty((4, 3, 3))
    out_t = np.empty((4, 3))
    n = _p3p(np.ascontiguousarray(bearings), np.ascontiguousarray(points), out_R, out_t)
    return [Pose.from_Rt(out_R[i], out_t[i]) for i in range(n)]


# ----------------------------------------------------------------------------
# RANSAC kernel


@numba.njit(cache=True, nogil=True)
def _splitmix(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@numba.njit(cache=True, nogil=True)
def _reproj_sq(R, t, X, uv, fx, fy, cx, cy):
    pc0 = R[0, 0] * X[0] + R[0, 1] * X[1] + R[0, 2] * X[2] + t[0]
    pc1 = R[1, 0] * X[0] + R[1, 1] * X[1] + R[1, 2] * X[2] + t[1]
    pc2 = R[2, 0] * X[0] + R[2, 1] * X[1] + R[2, 2] * X[2] + t[2]
    if pc2 <= 1e-9:
        return np.inf
    du = fx * pc0 / pc2 + cx - uv[0]
    dv = fy * pc1 / pc2 + cy - uv[1]
    return du * du + dv * dv


@numba.njit(cache=True, nogil=True)
def _score(R, t, pts, uv, fx, fy, cx, cy, thresh_sq):
    count = 0
    total = 0.0
    for i in range(pts.shape[0]):
        e = _reproj_sq(R, t, pts[i], uv[i], fx, fy, cx, cy)
        if e <= thresh_sq:
            count += 1
            total += np.sqrt(e)
    return count, total


@numba.njit(cache=True, nogil=True)
def _ransac(pts, uv, bear, fx, fy, cx, cy, thresh_sq, confidence, max_iter, seed):
    n = pts.shape[0]
    state = np.uint64(seed)
    best_R = np.eye(3)
    best_t = np.zeros(3)
    best_count = 0
    best_err = np.inf
    out_R = np.empty((4, 3, 3))
    out_t = np.empty((4, 3))
    sample = np.empty(4, np.int64)
    sb = np.empty((3, 3))
    sp = np.empty((3, 3))
    log_fail = math.log(1.0 - confidence)
    required = max_iter
    it = 0
    while it < max_iter and it < required:
        it += 1
        k = 0
        while k < 4:
            state, z = _splitmix(state)
            cand = np.int64(z % np.uint64(n))
            fresh = True
            for j in range(k):
                if sample[j] == cand:
                    fresh = False
            if fresh:
                sample[k] = cand
                k += 1
        for j in range(3):
            sb[j] = bear[sample[j]]
            sp[j] = pts[sample[j]]
        ns = _p3p(sb, sp, out_R, out_t)
        chosen = -1
        chosen_err = np.inf
        for s in range(ns):
            e = _reproj_sq(out_R[s], out_t[s], pts[sample[3]], uv[sample[3]], fx, fy, cx, cy)
            if e < chosen_err:
                chosen_err = e
                chosen = s
        if chosen < 0:
            continue
        count, total = _score(out_R[chosen], out_t[chosen], pts, uv, fx, fy, cx, cy, thresh_sq)
        if count == 0:
            continue
        mean_err = total / count
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count = count
            best_err = mean_err
            best_R[:, :] = out_R[chosen]
            best_t[:] = out_t[chosen]
            w = best_count / n
            w4 = w * w * w * w
            if w4 >= 1.0:
                required = 0
            else:
                denom = math.log1p(-w4)
                if denom < 0.0:
                    req = log_fail / denom
                    if req < max_iter:
                        required = int(math.ceil(req))
    return best_R, best_t, best_count, it


# ----------------------------------------------------------------------------
# refinement


def perturb(pose: Pose, delta) -> Pose:
    """Apply a 6-vector update ``(omega, dt)``: R <- exp(omega) R, t <- t + dt."""
    delta = np.asarray(delta, dtype=float)
    return Pose.from_Rt(so3_exp(delta[:3]) @ pose.R, pose.t + delta[3:])


def reprojection_residuals(camera: PinholeCamera, pose: Pose, points: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Stacked (u, v) residuals, length 2n."""
    pc = pose.transform(points)
    proj = np.column_stack([camera.fx * pc[:, 0] / pc[:, 2] + camera.cx,
                            camera.fy * pc[:, 1] / pc[:, 2] + camera.cy])
    return (proj - pixels).reshape(-1)


def _residuals_Rt(camera, R, t, points, pixels):
    pc = points @ R.T + t
    proj = np.column_stack([camera.fx * pc[:, 0] / pc[:, 2] + camera.cx,
                            camera.fy * pc[:, 1] / pc[:, 2] + camera.cy])
    return (proj - pixels).reshape(-1)


def _jacobian_Rt(camera, R, t, points):
    rx = points @ R.T
    pc = rx + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    n = len(points)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = camera.fx / z
    dproj[:, 0, 2] = -camera.fx * x / z ** 2
    dproj[:, 1, 1] = camera.fy / z
    dproj[:, 1, 2] = -camera.fy * y / z ** 2
    # d(pc)/d(omega) = -[R X]_x, d(pc)/d(dt) = I
    dpc = np.zeros((n, 3, 6))
    dpc[:, 0, 1] = rx[:, 2]
    dpc[:, 0, 2] = -rx[:, 1]
    dpc[:, 1, 0] = -rx[:, 2]
    dpc[:, 1, 2] = rx[:, 0]
    dpc[:, 2, 0] = rx[:, 1]
    dpc[:, 2, 1] = -rx[:, 0]
    dpc[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dpc).reshape(2 * n, 6)


def reprojection_jacobian(camera: PinholeCamera, pose: Pose, points: np.ndarray) -> np.ndarray:
    """Analytic d(residuals)/d(delta) at delta = 0 for :func:`perturb` updates, shape (2n, 6)."""
    return _jacobian_Rt(camera, pose.R, pose.t, np.asarray(points, dtype=float))


def refine_pose(camera: PinholeCamera, pose: Pose, points, pixels, max_iterations: int = 50,
                tolerance: float = 1e-10) -> Pose:
    """Levenberg-Marquardt on the total squared reprojection error."""
    points = np.asarray(points, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    R, t = pose.R, pose.t.copy()
    r = _residuals_Rt(camera, R, t, points, pixels)
    cost = float(r @ r)
    lam = None
    for _ in range(max_iterations):
        J = _jacobian_Rt(camera, R, t, points)
        H = J.T @ J
        g = J.T @ r
        if lam is None:
            lam = 1e-3 * float(np.max(np.diag(H)))
        improved = False
        while lam < 1e32:
            try:
                step = -np.linalg.solve(H + lam * np.diag(np.diag(H)), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new = so3_exp(step[:3]) @ R
            t_new = t + step[3:]
            if np.all(points @ R_new[2] + t_new[2] > 1e-9):
                r_new = _residuals_Rt(camera, R_new, t_new, points, pixels)
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    improved = True
                    break
            lam *= 10
        if not improved:
            break
        decrease = cost - cost_new
        R, t, r, cost = R_new, t_new, r_new, cost_new
        lam = max(lam / 10, 1e-12)
        if np.linalg.norm(step) < tolerance or decrease <= tolerance * max(cost, 1e-300):
            break
    # re-orthonormalize accumulated rotation
    U, _, Vt = np.linalg.svd(R)
    return Pose.from_Rt(U @ Vt, t)


# ----------------------------------------------------------------------------
# public RANSAC


@dataclass(frozen=True)
class RansacParams:
    reprojection_threshold_px: float = 3.0
    confidence: float = 0.99
    max_iterations: int = 1000
    min_inliers: int = 12
    rng_seed: int = DEFAULT_SEED
    refine: bool = True

    def __post_init__(self):
        if not self.reprojection_threshold_px > 0:
            raise ValidationError("reprojection threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValidationError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.min_inliers < 4:
            raise ValidationError("min_inliers must be >= 4")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ValidationError("rng_seed must fit in an unsigned 64-bit integer")


class NoPoseReason(str, enum.Enum):
    INSUFFICIENT_MATCHES = "insufficient-matches"
    INSUFFICIENT_INLIERS = "insufficient-inliers"


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: Pose
    inlier_matches: list
    num_iterations_used: int

    @property
    def num_inliers(self) -> int:
        return len(self.inlier_matches)


@dataclass(frozen=True)
class NoPose:
    reason: NoPoseReason
    num_inliers: int = 0
    num_iterations_used: int = 0

    def __bool__(self) -> bool:
        return False


def _positions(landmarks, ids: np.ndarray) -> np.ndarray:
    if hasattr(landmarks, "landmark_positions"):
        return landmarks.landmark_positions(ids)
    return np.array([landmarks[int(i)] for i in ids], dtype=float).reshape(-1, 3)


def _inlier_mask(camera, pose, points, pixels, threshold):
    pc = pose.transform(points)
    front = pc[:, 2] > 1e-9
    z = np.where(front, pc[:, 2], 1.0)
    du = camera.fx * pc[:, 0] / z + camera.cx - pixels[:, 0]
    dv = camera.fy * pc[:, 1] / z + camera.cy - pixels[:, 1]
    return front & (du * du + dv * dv <= threshold * threshold)


def ransac_pnp(matches, landmarks, query, params: RansacParams = RansacParams()) -> PoseEstimate | NoPose:
    """Robust pose from matches.

    ``landmarks`` is a :class:`~hierloc.map_model.VisualMap` or a mapping from
    landmark id to its world position. ``query`` provides ``camera`` and
    ``keypoints``.
    """
    matches = list(matches)
    if len(matches) < 4:
        return NoPose(NoPoseReason.INSUFFICIENT_MATCHES)
    camera = query.camera
    kp_idx = np.array([m[0] for m in matches], dtype=np.int64)
    lm_ids = np.array([m[1] for m in matches], dtype=np.int64)
    pixels = np.ascontiguousarray(query.keypoints[kp_idx], dtype=np.float64)
    points = np.ascontiguousarray(_positions(landmarks, lm_ids), dtype=np.float64)
    bear = np.ascontiguousarray(pixel_bearings(camera, pixels))
    thr = params.reprojection_threshold_px
    R, t, count, iters = _ransac(points, pixels, bear, float(camera.fx), float(camera.fy), float(camera.cx),
                                 float(camera.cy), thr * thr, params.confidence, params.max_iterations,
                                 np.uint64(params.rng_seed))
    if count == 0:
        return NoPose(NoPoseReason.INSUFFICIENT_INLIERS, 0, int(iters))
    pose = Pose.from_Rt(R, t)
    mask = _inlier_mask(camera, pose, points, pixels, thr)
    if params.refine and mask.sum() >= 4:
        refined = refine_pose(camera, pose, points[mask], pixels[mask])
        refined_mask = _inlier_mask(camera, refined, points, pixels, thr)
        if refined_mask.sum() >= mask.sum():
            pose, mask = refined, refined_mask
    inliers = [matches[i] for i in np.flatnonzero(mask)]
    if len(inliers) < params.min_inliers:
        return NoPose(NoPoseReason.INSUFFICIENT_INLIERS, len(inliers), int(iters))
    return PoseEstimate(pose, inliers, int(iters))
