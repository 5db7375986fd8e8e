"""Localization metrics, per-region analysis and point-cloud export."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import egfs
from . import regressor as reg
from .geometry import Pose
from .pose_solver import CorrespondenceSet, PoseEstimate, RansacConfig, estimate_pose
from .synth import Frame, RegionLabel, _atomic_write


@dataclass(frozen=True)
class PoseError:
    translation_cm: float
    rotation_deg: float


def pose_error(est: Pose, gt: Pose) -> PoseError:
    t = float(np.linalg.norm(est.center - gt.center) * 100.0)
    cos = np.clip((np.trace(est.rotation.T @ gt.rotation) - 1.0) / 2.0, -1.0, 1.0)
    return PoseError(t, float(np.degrees(np.arccos(cos))))


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise ValueError("median of an empty sequence")
    return float(v[(len(v) - 1) // 2])


def aggregate(errors: list[PoseError]) -> dict:
    if not errors:
        raise ValueError("no pose errors to aggregate")
    t = [e.translation_cm for e in errors]
    r = [e.rotation_deg for e in errors]
    within = sum(1 for e in errors if e.translation_cm < 5.0 and e.rotation_deg < 5.0)
    return {
        "median_cm": lower_median(t),
        "median_deg": lower_median(r),
        "pct_within_5cm_5deg": 100.0 * within / len(errors),
        "n_frames": len(errors),
    }


# ---------------------------------------------------------- localization


@dataclass
class Localization:
    frame_id: int
    estimate: PoseEstimate
    n_corr: int
    seconds: float


def correspondences(params: reg.RegressorParams, frame: Frame) -> CorrespondenceSet:
    y, c = egfs.predict_frame(params, frame)
    return CorrespondenceSet(frame.grid.pixels.reshape(-1, 2), y.reshape(-1, 3), c.reshape(-1), frame.intrinsics)


def localize_frames(params, frames: list[Frame], ransac: RansacConfig | None = None,
                    use_confidence: bool = True) -> list[Localization]:
    ransac = ransac or RansacConfig()
    out = []
    for f in frames:
        t0 = time.perf_counter()
        cs = correspondences(params, f)
        est = estimate_pose(cs, ransac, use_confidence=use_confidence)
        out.append(Localization(f.frame_id, est, len(cs), time.perf_counter() - t0))
    return out


def localization_errors(results: list[Localization], frames: list[Frame]) -> list[PoseError]:
    gt = {f.frame_id: f.pose_gt for f in frames}
    return [pose_error(r.estimate.pose, gt[r.frame_id]) for r in results]


def metrics_csv(results: list[Localization], errors: list[PoseError]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "trans_cm", "rot_deg", "n_inliers", "n_corr"])
    for r, e in zip(results, errors):
        w.writerow([r.frame_id, f"{e.translation_cm:.6f}", f"{e.rotation_deg:.6f}", len(r.estimate.inliers), r.n_corr])
    return buf.getvalue()


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------- region analysis


@dataclass(frozen=True)
class RegionStats:
    label: RegionLabel
    count: int
    median_error_px: float | None
    inlier_ratio: float | None


def region_analysis(params, frames: list[Frame], results: list[Localization]) -> dict[RegionLabel, RegionStats]:
    """Per-label median test reprojection error (against ground truth) and share of cells in the inlier set.

    Cells whose prediction lies behind the ground-truth camera have no error and are left out.
    """
    by_id = {r.frame_id: r for r in results}
    errs, labels, inl = [], [], []
    for f in frames:
        y, _ = egfs.predict_frame(params, f)
        e = egfs.frame_errors(y, f).reshape(-1)
        flag = np.zeros(e.shape, dtype=bool)
        flag[by_id[f.frame_id].estimate.inliers] = True
        ok = np.isfinite(e)
        errs.append(e[ok])
        labels.append(f.grid.labels.reshape(-1)[ok])
        inl.append(flag[ok])
    errs = np.concatenate(errs) if errs else np.zeros(0)
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.uint8)
    inl = np.concatenate(inl) if inl else np.zeros(0, dtype=bool)
    stats = {}
    for lab in RegionLabel:
        m = labels == lab
        n = int(m.sum())
        if n == 0:
            stats[lab] = RegionStats(lab, 0, None, None)
        else:
            stats[lab] = RegionStats(lab, n, float(np.median(errs[m])), float(inl[m].mean()))
    return stats


def region_csv(stats: dict[RegionLabel, RegionStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "count", "median_error_px", "inlier_ratio"])
    for s in stats.values():
        med = "" if s.median_error_px is None else f"{s.median_error_px:.6f}"
        ratio = "" if s.inlier_ratio is None else f"{s.inlier_ratio:.6f}"
        w.writerow([s.label.name, s.count, med, ratio])
    return buf.getvalue()


# ------------------------------------------------------------ point cloud


def point_cloud(params, frames: list[Frame], apply_filter: bool = False, masks=None):
    """Points (N, 3) and uint8 colours (N, 3).

    With ``apply_filter`` a cell is kept when its confidence reaches the
    frame median and, if ``masks`` is given, it lies inside that frame's mask.
    """
    pts, cols = [], []
    for i, f in enumerate(frames):
        y, c = egfs.predict_frame(params, f)
        keep = np.ones(c.shape, dtype=bool)
        if apply_filter:
            keep &= c >= np.median(c)
            if masks is not None:
                keep &= np.asarray(masks[i], dtype=bool)
        pts.append(y[keep])
        cols.append(f.grid.appearance[keep])
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    rgb = np.clip(np.rint(np.concatenate(cols).astype(float) * 255.0), 0, 255).astype(np.uint8)
    return np.concatenate(pts).astype(float), rgb


def ply_text(points: np.ndarray, colors: np.ndarray) -> str:
    head = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )
    body = "".join(
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n" for p, c in zip(points, colors)
    )
    return head + body


def export_point_cloud(path, params, frames: list[Frame], apply_filter: bool = False, masks=None) -> int:
    pts, rgb = point_cloud(params, frames, apply_filter, masks)
    _atomic_write(Path(path), ply_text(pts, rgb).encode())
    return len(pts)


def read_ply(path):
    """Vertices and colours of an ASCII PLY written by ``export_point_cloud``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError("not a PLY file")
    end = lines.index("end_header")
    n = next(int(l.split()[-1]) for l in lines[:end] if l.startswith("element vertex"))
    data = np.array([l.split() for l in lines[end + 1:end + 1 + n]], dtype=float).reshape(n, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)
