"""Robust camera pose from 2D-3D correspondences.

Pipeline: keep correspondences above the median confidence, hypothesise poses
from minimal triples with P3P inside RANSAC, then polish the best hypothesis
with Levenberg-Marquardt on its inliers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Z_MIN, CameraIntrinsics, Pose, hat, pose_inverse, se3_exp
from .seeding import stream

log = logging.getLogger(__name__)


class TooFewCorrespondences(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    pixels: np.ndarray      # (N, 2)
    points: np.ndarray      # (N, 3) world
    confidence: np.ndarray  # (N,)
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        if not (len(self.pixels) == len(self.points) == len(self.confidence)):
            raise ValueError("pixels, points and confidence must have equal length")

    def __len__(self):
        return len(self.pixels)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pixels[idx], self.points[idx], self.confidence[idx], self.intrinsics)


@dataclass
class RansacConfig:
    inlier_threshold_px: float = 10.0
    max_hypotheses: int = 256
    seed: int = 0
    min_inliers: int = 6

    def __post_init__(self):
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")


@dataclass
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray  # indices into the correspondence set given to ransac_pnp
    hypothesis_count: int
    converged: bool


# ------------------------------------------------------------ filtering


def confidence_filter(cs: CorrespondenceSet, min_inliers: int = 6):
    """Correspondences with confidence strictly above the median.

    Returns ``(filtered_set, kept_indices)``; the input is returned unchanged
    when fewer than ``min_inliers`` would survive.
    """
    if len(cs) == 0:
        raise TooFewCorrespondences("empty correspondence set")
    keep = np.flatnonzero(cs.confidence > np.median(cs.confidence))
    if len(keep) < min_inliers:
        log.info("confidence filter kept %d < %d correspondences; using all", len(keep), min_inliers)
        keep = np.arange(len(cs))
    return cs.subset(keep), keep


# ------------------------------------------------------------------ P3P


def _bearings(pixels, k: CameraIntrinsics):
    b = np.stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, np.ones(len(pixels))], axis=1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _absolute_orientation(world: np.ndarray, cam: np.ndarray):
    """Rigid (R, t) with ``cam = R @ world + t`` (Kabsch, no scale)."""
    mw, mc = world.mean(0), cam.mean(0)
    h = (world - mw).T @ (cam - mc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, mc - r @ mw


def _polish_root(coeffs, x, steps=3):
    d = np.polyder(coeffs)
    for _ in range(steps):
        fd = np.polyval(d, x)
        if fd == 0:
            break
        x = x - np.polyval(coeffs, x) / fd
    return x


def p3p(pixels: np.ndarray, points: np.ndarray, k: CameraIntrinsics) -> list[Pose]:
    """Grunert's P3P: up to four camera-to-world poses explaining three correspondences.

    Distances along the three bearing rays follow from the law of cosines,
    reduced to a quartic whose real roots are found from the companion matrix.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(3, 2)
    pts = np.asarray(points, dtype=float).reshape(3, 3)
    area = 0.5 * np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0]))
    if area <= 1e-9:
        return []
    j = _bearings(pixels, k)
    a = np.linalg.norm(pts[1] - pts[2])
    b = np.linalg.norm(pts[0] - pts[2])
    c = np.linalg.norm(pts[0] - pts[1])
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    a2, b2, c2 = a * a, b * b, c * c
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    coeffs = np.array([
        (amc - 1) ** 2 - 4 * c2 / b2 * ca**2,
        4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb),
        2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
             - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2),
        4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg),
        (1 + amc) ** 2 - 4 * a2 / b2 * cg**2,
    ])
    if not np.all(np.isfinite(coeffs)) or np.all(np.abs(coeffs) < 1e-15):
        return []
    nz = np.flatnonzero(np.abs(coeffs) > 1e-15 * np.abs(coeffs).max())
    roots = np.roots(coeffs[nz[0]:])
    poses = []
    seen = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = _polish_root(coeffs, root.real)
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        s1sq = b2 / (1 + v * v - 2 * v * cb)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        cam = np.stack([s1 * j[0], u * s1 * j[1], v * s1 * j[2]])
        if cam[:, 2].min() <= Z_MIN:
            continue  # could never be scored by projection
        r_cw, t_cw = _absolute_orientation(pts, cam)
        key = np.concatenate([r_cw.ravel(), t_cw])
        if any(np.allclose(key, s, atol=1e-9) for s in seen):
            continue
        seen.append(key)
        poses.append(pose_inverse(Pose(r_cw, t_cw)))
    return poses


# ------------------------------------------------------------ residuals


def _residuals(rcw, tcw, points, pixels, k: CameraIntrinsics):
    pc = points @ rcw.T + tcw
    z = pc[:, 2]
    ok = z > Z_MIN
    safe = np.where(ok, z, 1.0)
    uv = np.stack([k.fx * pc[:, 0] / safe + k.cx, k.fy * pc[:, 1] / safe + k.cy], axis=1)
    return uv - pixels, pc, ok


def reprojection_errors_cw(rcw, tcw, points, pixels, k):
    e, _, ok = _residuals(rcw, tcw, points, pixels, k)
    err = np.linalg.norm(e, axis=1)
    return np.where(ok, err, np.inf)


# ------------------------------------------------------------------ LM


def lm_refine(pose0: Pose, cs: CorrespondenceSet, max_iter: int = 100, lam0: float = 1e-3,
              return_costs: bool = False):
    """Minimise the summed squared reprojection error over SE(3).

    Steps are left-multiplied onto the world-to-camera transform through
    ``se3_exp``. The damping starts at ``lam0`` and is scaled by 10 on each
    rejected step and by 1/10 on each accepted one.
    """
    k = cs.intrinsics
    cw = pose_inverse(pose0)
    rcw, tcw = cw.rotation, cw.translation
    pts, px = cs.points, cs.pixels

    def cost(r, t):
        e, _, ok = _residuals(r, t, pts, px, k)
        if not ok.all():
            return np.inf
        return float(np.sum(e * e))

    cur = cost(rcw, tcw)
    costs = [cur]
    lam = lam0
    for _ in range(max_iter):
        e, pc, ok = _residuals(rcw, tcw, pts, px, k)
        if not ok.all():
            break
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        jp = np.zeros((len(pc), 2, 3))
        jp[:, 0, 0] = k.fx / z
        jp[:, 0, 2] = -k.fx * x / z**2
        jp[:, 1, 1] = k.fy / z
        jp[:, 1, 2] = -k.fy * y / z**2
        # d(exp(d) X)/d(rho, omega) at d = 0 is [I, -hat(X)]
        jx = np.zeros((len(pc), 3, 6))
        jx[:, :, :3] = np.eye(3)
        jx[:, 0, 4], jx[:, 0, 5] = z, -y
        jx[:, 1, 3], jx[:, 1, 5] = -z, x
        jx[:, 2, 3], jx[:, 2, 4] = y, -x
        jac = np.einsum("nij,njk->nik", jp, jx).reshape(-1, 6)
        res = e.reshape(-1)
        jtj = jac.T @ jac
        g = jac.T @ res
        if np.linalg.norm(g) == 0:
            break
        accepted = False
        while lam < 1e12:
            a = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = -np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            upd = se3_exp(step)
            r_new = upd.rotation @ rcw
            t_new = upd.rotation @ tcw + upd.translation
            new = cost(r_new, t_new)
            if new <= cur:
                decrease = cur - new
                rcw, tcw, cur = r_new, t_new, new
                costs.append(cur)
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or np.linalg.norm(step) < 1e-10 or decrease < 1e-12:
            break
    # re-orthonormalise to keep the pose invariants tight
    u, _, vt = np.linalg.svd(rcw)
    rcw = u @ vt
    out = pose_inverse(Pose(rcw, tcw))
    return (out, costs) if return_costs else out


# -------------------------------------------------------------- RANSAC


def ransac_pnp(cs: CorrespondenceSet, cfg: RansacConfig | None = None) -> PoseEstimate:
    """Best P3P hypothesis by inlier count (ties: lower mean inlier error), then LM on its inliers."""
    cfg = cfg or RansacConfig()
    n = len(cs)
    if n < 3:
        raise TooFewCorrespondences(f"need at least 3 correspondences, got {n}")
    rng = stream(cfg.seed, "ransac")
    k = cs.intrinsics
    thr = cfg.inlier_threshold_px
    triples = [rng.choice(n, size=3, replace=False) for _ in range(cfg.max_hypotheses)]
    best = None
    best_key = (-1, np.inf)
    count = 0
    for tri in triples:
        for pose in p3p(cs.pixels[tri], cs.points[tri], k):
            count += 1
            cw = pose_inverse(pose)
            err = reprojection_errors_cw(cw.rotation, cw.translation, cs.points, cs.pixels, k)
            inl = err <= thr
            n_in = int(inl.sum())
            mean_err = float(err[inl].mean()) if n_in else np.inf
            key = (n_in, mean_err)
            if n_in > best_key[0] or (n_in == best_key[0] and mean_err < best_key[1]):
                best_key, best = key, pose
    if best is None:
        return PoseEstimate(Pose.identity(), np.zeros(0, dtype=int), count, False)
    cw = pose_inverse(best)
    inl = np.flatnonzero(reprojection_errors_cw(cw.rotation, cw.translation, cs.points, cs.pixels, k) <= thr)
    pose = best
    if len(inl) >= cfg.min_inliers:
        pose = lm_refine(best, cs.subset(inl))
        cw = pose_inverse(pose)
        inl = np.flatnonzero(reprojection_errors_cw(cw.rotation, cw.translation, cs.points, cs.pixels, k) <= thr)
    return PoseEstimate(pose, inl, count, len(inl) >= cfg.min_inliers)


def estimate_pose(cs: CorrespondenceSet, cfg: RansacConfig | None = None, use_confidence: bool = True):
    """Full inference back end. Inlier indices refer to ``cs`` (before filtering)."""
    cfg = cfg or RansacConfig()
    keep = np.arange(len(cs))
    sub = cs
    if use_confidence:
        sub, keep = confidence_filter(cs, cfg.min_inliers)
    est = ransac_pnp(sub, cfg)
    est.inliers = keep[est.inliers]
    return est
