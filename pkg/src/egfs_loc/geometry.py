"""Pinhole camera, rigid poses and reprojection error.

Poses are camera-to-world: ``Pose.apply`` maps camera-frame points into the
world, so a world point ``y`` reaches the image as ``K @ inverse(h) @ y``.
Twists are ordered ``(rho, omega)``: translational part first, rotation last.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_MIN = 0.1
DUMMY_DEPTH = 10.0
_SMALL_ANGLE = 1e-6
_NEAR_PI = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # unit quaternion this rotation was built from; keeps text round-trips bit-exact
    source_quat: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, wxyz, translation) -> "Pose":
        q = np.array(wxyz, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-12:
            q = q / n
        return cls(quat_to_rotation(q), translation, q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        if self.source_quat is not None:
            return self.source_quat.copy()
        return rotation_to_quat(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def compose(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (camera-to-world translation)."""
        return self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        q = np.round(self.quaternion(), 6).tolist()
        t = np.round(self.translation, 6).tolist()
        return f"Pose(q_wxyz={q}, t={t})"


def pose_inverse(h: Pose) -> Pose:
    rt = h.rotation.T
    return Pose(rt, -rt @ h.translation)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def so3_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    s = vee(r - r.T) / 2.0  # sin(theta) * axis
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arctan2(np.linalg.norm(s), c)
    if theta < _SMALL_ANGLE:
        return s * (1.0 + theta**2 / 6.0)
    if np.pi - theta < _NEAR_PI:
        # sin(theta) ~ 0: recover the axis from the symmetric part instead
        b = (r + r.T) / 2.0 - c * np.eye(3)
        j = int(np.argmax(np.diag(b)))
        axis = b[:, j] / np.sqrt(b[j, j])
        if axis @ s < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / np.sin(theta) * s


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * k + b * k @ k


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k @ k / 12.0
    half = theta / 2.0
    coef = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * k + coef * k @ k


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, w = xi[:3], xi[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ rho)


def se3_log(h: Pose) -> np.ndarray:
    w = so3_log(h.rotation)
    return np.concatenate([_left_jacobian_inv(w) @ h.translation, w])


def quat_to_rotation(wxyz) -> np.ndarray:
    q = np.asarray(wxyz, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("quaternion must be finite and non-zero")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def world_to_camera(points: np.ndarray, h: Pose) -> np.ndarray:
    """Map world points (N, 3) into the camera frame of camera-to-world pose ``h``."""
    return (np.asarray(points, dtype=float) - h.translation) @ h.rotation


def project_points(points: np.ndarray, h: Pose, k: CameraIntrinsics):
    """Vectorised projection. Returns ``(uv, in_front)``; ``uv`` is NaN where depth <= Z_MIN."""
    pc = world_to_camera(np.atleast_2d(points), h)
    z = pc[:, 2]
    ok = z > Z_MIN
    safe_z = np.where(ok, z, 1.0)
    uv = np.stack([k.fx * pc[:, 0] / safe_z + k.cx, k.fy * pc[:, 1] / safe_z + k.cy], axis=1)
    uv[~ok] = np.nan
    return uv, ok


def project(y, h: Pose, k: CameraIntrinsics) -> np.ndarray | None:
    """Pixel of world point ``y`` seen from ``h``; ``None`` when the point is behind the camera."""
    uv, ok = project_points(np.asarray(y, dtype=float).reshape(1, 3), h, k)
    return uv[0] if ok[0] else None


def reprojection_errors(pixels: np.ndarray, points: np.ndarray, h: Pose, k: CameraIntrinsics):
    """Per-point pixel distances; NaN marks behind-camera points."""
    uv, _ = project_points(points, h, k)
    return np.linalg.norm(np.atleast_2d(pixels) - uv, axis=1)


def reprojection_error(p, y, h_star: Pose, k: CameraIntrinsics) -> float | None:
    uv = project(y, h_star, k)
    if uv is None:
        return None
    return float(np.linalg.norm(np.asarray(p, dtype=float) - uv))


def backproject(pixels: np.ndarray, depth: float, h: Pose, k: CameraIntrinsics) -> np.ndarray:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    x = (pixels[:, 0] - k.cx) / k.fx * depth
    y = (pixels[:, 1] - k.cy) / k.fy * depth
    pc = np.stack([x, y, np.full_like(x, depth)], axis=1)
    return h.apply(pc)


def dummy_coordinate(p, h_star: Pose, k: CameraIntrinsics) -> np.ndarray:
    """World point that back-projects ``p`` at a camera-frame depth of 10 m."""
    return backproject(np.asarray(p, dtype=float).reshape(1, 2), DUMMY_DEPTH, h_star, k)[0]


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``position`` whose optical axis points at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), position)
