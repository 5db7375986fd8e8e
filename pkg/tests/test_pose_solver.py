import numpy as np
import pytest

from egfs_loc.evaluation import pose_error
from egfs_loc.geometry import CameraIntrinsics, Pose, pose_compose, pose_inverse, project_points, se3_exp
from egfs_loc.pose_solver import (
    CorrespondenceSet,
    RansacConfig,
    TooFewCorrespondences,
    confidence_filter,
    estimate_pose,
    lm_refine,
    p3p,
    ransac_pnp,
    reprojection_errors_cw,
)

from oracles import synthetic_correspondences

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def cset(px, pts, conf=None):
    return CorrespondenceSet(px, pts, np.ones(len(px)) if conf is None else conf, K)


def pose_gap(a: Pose, b: Pose):
    """Translation distance and Frobenius rotation gap (about sqrt(2) times the angle, no arccos floor)."""
    return np.linalg.norm(a.translation - b.translation), np.linalg.norm(a.rotation - b.rotation)


# --------------------------------------------------------------- filter


def test_filter_equal_confidence_falls_back():
    px = np.zeros((10, 2))
    sub, keep = confidence_filter(cset(px, np.zeros((10, 3)), np.full(10, 0.4)))
    assert len(sub) == 10 and keep.tolist() == list(range(10))


def test_filter_keeps_upper_half():
    conf = np.round(np.arange(1, 11) / 10, 1)
    sub, keep = confidence_filter(cset(np.zeros((10, 2)), np.zeros((10, 3)), conf), min_inliers=3)
    # median 0.55 by interpolation
    assert sub.confidence.tolist() == [0.6, 0.7, 0.8, 0.9, 1.0]


def test_filter_singleton_falls_back():
    sub, _ = confidence_filter(cset(np.zeros((1, 2)), np.zeros((1, 3)), np.array([0.9])))
    assert len(sub) == 1


def test_filter_empty_raises():
    with pytest.raises(TooFewCorrespondences):
        confidence_filter(cset(np.zeros((0, 2)), np.zeros((0, 3))))


# ------------------------------------------------------------------ P3P


def test_p3p_recovers_synthesized_pose():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pose, px, pts = synthetic_correspondences(rng, K, 3)
        cands = p3p(px, pts, K)
        assert 1 <= len(cands) <= 4
        gaps = [pose_gap(c, pose) for c in cands]
        assert min(t + r for t, r in gaps) < 1e-6
        for c in cands:
            uv, _ = project_points(pts, c, K)
            np.testing.assert_allclose(uv, px, atol=1e-6)


def test_p3p_collinear_is_empty():
    pts = np.array([[0, 0, 2.0], [1, 0, 2.0], [2, 0, 2.0]])
    px, _ = project_points(pts, Pose.identity(), K)
    assert p3p(px, pts, K) == []


def test_p3p_fronto_parallel_identity():
    pts = np.array([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.0, 0.5, 2.0]])
    px, _ = project_points(pts, Pose.identity(), K)
    gaps = [sum(pose_gap(c, Pose.identity())) for c in p3p(px, pts, K)]
    assert min(gaps) < 1e-9


# --------------------------------------------------------------- RANSAC


def test_ransac_exact_data():
    pose, px, pts = synthetic_correspondences(np.random.default_rng(1), K, 100)
    est = ransac_pnp(cset(px, pts))
    t, r = pose_gap(est.pose, pose)
    assert t < 1e-6 and r < 1e-6
    assert len(est.inliers) == 100 and est.converged


def contaminated(seed, n_in=60, n_out=40, noise=0.0):
    rng = np.random.default_rng(seed)
    pose, px, pts = synthetic_correspondences(rng, K, n_in + n_out)
    px = px + rng.normal(0, noise, px.shape) if noise else px.copy()
    px[n_in:] = rng.uniform([0, 0], [K.width, K.height], (n_out, 2))
    return pose, px, pts


def test_ransac_with_outliers():
    pose, px, pts = contaminated(2)
    est = ransac_pnp(cset(px, pts))
    e = pose_error(est.pose, pose)
    assert e.translation_cm < 0.5 and e.rotation_deg < 0.1
    assert len(est.inliers) >= 58
    assert set(range(60)) <= set(est.inliers.tolist())


def test_ransac_all_outliers_not_converged():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-3, 3, (50, 3)) + [0, 0, 8]
    px = rng.uniform([0, 0], [640, 480], (50, 2))
    est = ransac_pnp(cset(px, pts), RansacConfig(min_inliers=20, inlier_threshold_px=1.0))
    assert not est.converged


def test_ransac_deterministic():
    _, px, pts = contaminated(4, noise=1.0)
    a = ransac_pnp(cset(px, pts), RansacConfig(seed=9))
    b = ransac_pnp(cset(px, pts), RansacConfig(seed=9))
    np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())
    np.testing.assert_array_equal(a.inliers, b.inliers)


def test_reported_inliers_satisfy_threshold():
    _, px, pts = contaminated(5, noise=3.0)
    est = ransac_pnp(cset(px, pts))
    cw = pose_inverse(est.pose)
    err = reprojection_errors_cw(cw.rotation, cw.translation, pts, px, K)
    assert (err[est.inliers] <= 10.0).all()
    assert (np.delete(err, est.inliers) > 10.0).all()


def test_ransac_too_few():
    with pytest.raises(TooFewCorrespondences):
        ransac_pnp(cset(np.zeros((2, 2)), np.zeros((2, 3))))


def test_estimate_pose_maps_inliers_back():
    pose, px, pts = contaminated(6)
    conf = np.r_[np.full(60, 0.9), np.full(40, 0.1)]
    est = estimate_pose(cset(px, pts, conf), use_confidence=True)
    assert sorted(est.inliers.tolist()) == list(range(60))
    assert pose_error(est.pose, pose).translation_cm < 1e-4


# ------------------------------------------------------------------- LM


def test_lm_at_ground_truth_stays():
    pose, px, pts = synthetic_correspondences(np.random.default_rng(7), K, 50)
    out = lm_refine(pose, cset(px, pts))
    t, r = pose_gap(out, pose)
    assert t < 1e-12 and r < 1e-7


def test_lm_recovers_small_perturbation():
    rng = np.random.default_rng(8)
    for _ in range(10):
        pose, px, pts = synthetic_correspondences(rng, K, 50)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        tdir = rng.normal(size=3)
        tdir /= np.linalg.norm(tdir)
        kick = se3_exp(np.r_[0.05 * tdir, np.radians(1.0) * axis])
        out = lm_refine(pose_compose(pose, kick), cset(px, pts))
        t, r = pose_gap(out, pose)
        assert t < 1e-8 and r < 1e-8


def test_lm_noise_rms():
    rng = np.random.default_rng(9)
    for _ in range(20):
        pose, px, pts = synthetic_correspondences(rng, K, 200)
        noisy = px + rng.normal(0, 0.5, px.shape)
        out = lm_refine(pose, cset(noisy, pts))
        cw = pose_inverse(out)
        err = reprojection_errors_cw(cw.rotation, cw.translation, pts, noisy, K)
        # RMS over the 2N residual components
        assert np.sqrt(np.sum(err**2) / (2 * len(err))) <= 0.6


def test_lm_cost_monotone():
    rng = np.random.default_rng(10)
    pose, px, pts = synthetic_correspondences(rng, K, 80)
    noisy = px + rng.normal(0, 2.0, px.shape)
    start = pose_compose(pose, se3_exp(np.r_[0.2, -0.1, 0.1, 0.05, 0.02, -0.04]))
    out, costs = lm_refine(start, cset(noisy, pts), return_costs=True)
    assert len(costs) > 1
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert out.is_valid()
