"""Synthetic desk-scale scenes with labelled contamination.

A scene is a tiled room with a pillar at its centre. Every tile is a textured
rectangle carrying one region label. Cameras orbit the centre and look at it;
each frame is ray cast at patch centres to produce a feature grid:

* static tiles emit the positional encoding of the true surface point,
* texture-less tiles emit the encoding of their centroid for every patch,
* dynamic tiles slide within their own plane from frame to frame and emit the
  encoding of the *body-fixed* point, so features and world positions disagree
  across frames.

Dataset directory layout::

    scene.json          intrinsics, seed, surfaces, labels, trajectories
    poses.txt           frame_id qw qx qy qz tx ty tz   (17 significant digits)
    grids/<id>.bin      'EGFS' u32 version u32 rows u32 cols u32 D, then cells
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at, rotation_to_quat
from .seeding import stream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GRID_MAGIC = b"EGFS"
FEATURE_DIM = 32
PATCH = 8
APPEARANCE_NOISE = 0.02


class RegionLabel(IntEnum):
    StaticTextured = 0
    TextureLess = 1
    Dynamic = 2


class ConfigError(ValueError):
    pass


class DatasetError(Exception):
    """Malformed, truncated or incompatible dataset on disk."""


@dataclass
class SceneConfig:
    n_train_frames: int = 100
    n_test_frames: int = 20
    dynamic_fraction: float = 0.3
    textureless_fraction: float = 0.2
    feature_noise_sigma: float = 0.05
    seed: int = 0
    width: int = 320
    height: int = 240
    focal: float = 260.0
    room_half_size: float = 5.0
    room_height: float = 3.0
    tile_size: float = 1.0

    def validate(self):
        bad = []
        for name in ("dynamic_fraction", "textureless_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                bad.append(name)
        if bad:
            raise ConfigError(f"{', '.join(bad)} must lie in [0, 1)")
        if self.dynamic_fraction + self.textureless_fraction >= 1.0:
            raise ConfigError("dynamic_fraction + textureless_fraction must be < 1")
        if self.n_train_frames < 10:
            raise ConfigError("n_train_frames must be >= 10")
        if self.n_test_frames < 0:
            raise ConfigError("n_test_frames must be >= 0")
        if self.feature_noise_sigma < 0:
            raise ConfigError("feature_noise_sigma must be >= 0")


@dataclass(eq=False)
class Surface:
    """Rectangle ``origin + a*edge_u + b*edge_v`` for a, b in [0, 1]."""

    id: int
    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    label: RegionLabel = RegionLabel.StaticTextured
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    @property
    def corners(self) -> np.ndarray:
        o, u, v = self.origin, self.edge_u, self.edge_v
        return np.stack([o, o + u, o + u + v, o + v])

    @property
    def centroid(self) -> np.ndarray:
        return self.origin + 0.5 * (self.edge_u + self.edge_v)

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)


@dataclass(eq=False)
class Encoding:
    """Random sinusoidal positional code, ``sqrt(2) * sin(W x + phase)``."""

    frequencies: np.ndarray
    phases: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return math.sqrt(2.0) * np.sin(np.asarray(points) @ self.frequencies.T + self.phases)


@dataclass(eq=False)
class SyntheticScene:
    surfaces: list[Surface]
    dynamic_trajectories: dict[int, dict[int, Pose]]
    scene_center: np.ndarray
    scene_radius: float
    rng_seed: int
    intrinsics: CameraIntrinsics
    encoding: Encoding
    config: SceneConfig
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)

    def surface(self, sid: int) -> Surface:
        return self.surfaces[sid]


@dataclass(eq=False)
class FeatureGrid:
    frame_id: int
    pixels: np.ndarray       # (R, C, 2) float64 patch centres
    features: np.ndarray     # (R, C, D) float32
    gt_coords: np.ndarray    # (R, C, 3) float64
    labels: np.ndarray       # (R, C) uint8
    appearance: np.ndarray   # (R, C, 3) float32
    surface_ids: np.ndarray  # (R, C) int32, derived by ray casting, not stored on disk

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(eq=False)
class Frame:
    frame_id: int
    pose_gt: Pose
    intrinsics: CameraIntrinsics
    grid: FeatureGrid


def grid_shape(k: CameraIntrinsics, patch: int = PATCH) -> tuple[int, int]:
    return math.ceil(k.height / patch), math.ceil(k.width / patch)


def patch_centers(k: CameraIntrinsics, patch: int = PATCH) -> np.ndarray:
    rows, cols = grid_shape(k, patch)
    u = np.array([(j * patch + min((j + 1) * patch, k.width)) / 2.0 for j in range(cols)])
    v = np.array([(i * patch + min((i + 1) * patch, k.height)) / 2.0 for i in range(rows)])
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def _pose_from_rotation(rotation, translation) -> Pose:
    return Pose.from_quaternion(rotation_to_quat(rotation), translation)


def _room_surfaces(cfg: SceneConfig, center: np.ndarray) -> list[Surface]:
    h, H, s = cfg.room_half_size, cfg.room_height, cfg.tile_size
    n = max(1, round(2 * h / s))
    nz = max(1, round(H / s))
    du, dz = 2 * h / n, H / nz
    ex, ey, ez = np.eye(3)
    quads = []
    for i in range(n):
        for j in range(n):
            # floor faces up, ceiling faces down
            quads.append((np.array([-h + i * du, -h + j * du, 0.0]), du * ex, du * ey))
            quads.append((np.array([-h + i * du, -h + j * du, H]), du * ey, du * ex))
    for i in range(n):
        for j in range(nz):
            z = j * dz
            quads.append((np.array([-h + i * du, -h, z]), du * ex, dz * ez))
            quads.append((np.array([h - i * du, h, z]), -du * ex, dz * ez))
            quads.append((np.array([-h, h - i * du, z]), -du * ey, dz * ez))
            quads.append((np.array([h, -h + i * du, z]), du * ey, dz * ez))
    # pillar at the scene centre
    w, ph = 0.4, 2.4
    npz = 3
    cx, cy = center[0], center[1]
    faces = [
        (np.array([cx - w, cy - w]), 2 * w * ex),
        (np.array([cx + w, cy - w]), 2 * w * ey),
        (np.array([cx + w, cy + w]), -2 * w * ex),
        (np.array([cx - w, cy + w]), -2 * w * ey),
    ]
    for base, edge in faces:
        for j in range(npz):
            z = j * ph / npz
            quads.append((np.array([base[0], base[1], z]), edge, (ph / npz) * ez))
    return [Surface(i, o, u, v) for i, (o, u, v) in enumerate(quads)]


def _camera_poses(rng, n: int, offset: float, center, radius_range=(2.0, 2.8)) -> list[Pose]:
    poses = []
    for i in range(n):
        theta = 2 * np.pi * (i + offset) / n + rng.uniform(-0.15, 0.15)
        radius = rng.uniform(*radius_range)
        pos = np.array(
            [center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta), rng.uniform(1.2, 1.8)]
        )
        target = center + rng.normal(0.0, 0.2, size=3)
        h = look_at(pos, target)
        poses.append(_pose_from_rotation(h.rotation, h.translation))
    return poses


def cast_rays(surfaces: list[Surface], pose: Pose, k: CameraIntrinsics, pixels: np.ndarray):
    """Nearest surface hit for each pixel ray. Returns ``(points, surface_ids)``."""
    px = pixels.reshape(-1, 2)
    d_cam = np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(px))], axis=1)
    d = d_cam @ pose.rotation.T
    c = pose.translation
    origins = np.stack([s.origin for s in surfaces])
    eu = np.stack([s.edge_u for s in surfaces])
    ev = np.stack([s.edge_v for s in surfaces])
    normals = np.cross(eu, ev)
    denom = normals @ d.T                                    # (Q, N)
    num = np.einsum("qk,qk->q", normals, origins - c)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    uu = np.einsum("qk,qk->q", eu, eu)[:, None]
    vv = np.einsum("qk,qk->q", ev, ev)[:, None]
    a = ((c - origins) * eu).sum(1)[:, None] / uu + t * (eu @ d.T) / uu
    b = ((c - origins) * ev).sum(1)[:, None] / vv + t * (ev @ d.T) / vv
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    t = np.where(ok, t, np.inf)
    sid = np.argmin(t, axis=0)
    tmin = t[sid, np.arange(len(px))]
    if not np.all(np.isfinite(tmin)):
        raise RuntimeError("ray escaped the scene")
    points = c + tmin[:, None] * d
    shape = pixels.shape[:-1]
    return points.reshape(*shape, 3), sid.reshape(shape).astype(np.int32)


def _assign_labels(rng, counts: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    total = counts.sum()
    labels = np.full(len(counts), RegionLabel.StaticTextured, dtype=np.uint8)
    free = list(rng.permutation(len(counts)))
    for label, frac in ((RegionLabel.Dynamic, cfg.dynamic_fraction), (RegionLabel.TextureLess, cfg.textureless_fraction)):
        target = frac * total
        acc = 0.0
        rest = []
        for sid in free:
            if counts[sid] > 0 and acc + counts[sid] <= target:
                labels[sid] = label
                acc += counts[sid]
            else:
                rest.append(sid)
        # top up with the single visible tile that lands closest to the target
        visible = [sid for sid in rest if counts[sid] > 0]
        if visible:
            best = min(visible, key=lambda sid: abs(acc + counts[sid] - target))
            if abs(acc + counts[best] - target) < abs(acc - target):
                labels[best] = label
                rest.remove(best)
        free = rest
    static_seen = counts[labels == RegionLabel.StaticTextured].sum()
    if static_seen == 0:
        raise ConfigError("no static textured surface is visible; lower the contamination fractions")
    return labels


def _in_plane_motion(rng, surface: Surface, frame_ids) -> dict[int, Pose]:
    u = surface.edge_u / np.linalg.norm(surface.edge_u)
    v = surface.edge_v / np.linalg.norm(surface.edge_v)
    n = surface.normal
    amp = rng.uniform(0.3, 0.8, size=2)
    freq = rng.uniform(0.5, 2.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    spin = rng.uniform(0.0, 0.35)
    c = surface.centroid
    out = {}
    for f in frame_ids:
        shift = amp[0] * np.sin(freq[0] * f + phase[0]) * u + amp[1] * np.sin(freq[1] * f + phase[1]) * v
        ang = spin * np.sin(freq[2] * f + phase[2])
        kx = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
        rot = np.eye(3) + np.sin(ang) * kx + (1 - np.cos(ang)) * kx @ kx
        out[int(f)] = _pose_from_rotation(rot, c + shift - rot @ c)
    return out


def feature_source_points(scene: SyntheticScene, frame: Frame) -> np.ndarray:
    """World points whose encoding produced each patch feature (before noise)."""
    g = frame.grid
    src = g.gt_coords.copy()
    for sid in np.unique(g.surface_ids):
        s = scene.surfaces[sid]
        sel = g.surface_ids == sid
        if s.label == RegionLabel.TextureLess:
            src[sel] = s.centroid
        elif s.label == RegionLabel.Dynamic:
            motion = scene.dynamic_trajectories[int(sid)][frame.frame_id]
            src[sel] = (g.gt_coords[sel] - motion.translation) @ motion.rotation
    return src


def _render_frame(scene: SyntheticScene, frame_id: int, pose: Pose, rng, sigma: float, hits=None) -> Frame:
    k = scene.intrinsics
    pixels = patch_centers(k)
    points, sids = hits if hits is not None else cast_rays(scene.surfaces, pose, k, pixels)
    labels = np.array([s.label for s in scene.surfaces], dtype=np.uint8)[sids]
    colors = np.stack([s.color for s in scene.surfaces])[sids]
    grid = FeatureGrid(frame_id, pixels, None, points, labels, None, sids)
    frame = Frame(frame_id, pose, k, grid)
    src = feature_source_points(scene, frame)
    feats = scene.encoding(src) + sigma * rng.standard_normal(src.shape[:-1] + (FEATURE_DIM,))
    app = np.clip(colors + APPEARANCE_NOISE * rng.standard_normal(colors.shape), 0.0, 1.0)
    grid.features = feats.astype(np.float32)
    grid.appearance = app.astype(np.float32)
    return frame


def generate_scene(config: SceneConfig | dict | None = None):
    """Build a scene and its train/test frames. Returns ``(scene, train, test)``."""
    if config is None:
        config = SceneConfig()
    elif isinstance(config, dict):
        config = SceneConfig(**config)
    config.validate()
    rng = stream(config.seed, "scene")
    k = CameraIntrinsics(config.focal, config.focal, config.width / 2.0, config.height / 2.0, config.width, config.height)
    center = np.array([0.0, 0.0, 1.2])
    surfaces = _room_surfaces(config, center)
    corners = np.concatenate([s.corners for s in surfaces])
    radius = float(np.max(np.linalg.norm(corners - center, axis=1)))

    n_tr, n_te = config.n_train_frames, config.n_test_frames
    train_poses = _camera_poses(rng, n_tr, 0.0, center)
    test_poses = _camera_poses(rng, n_te, 0.5, center) if n_te else []
    train_ids = list(range(n_tr))
    test_ids = list(range(n_tr, n_tr + n_te))

    pixels = patch_centers(k)
    counts = np.zeros(len(surfaces))
    train_hits = [cast_rays(surfaces, pose, k, pixels) for pose in train_poses]
    for _, sids in train_hits:
        counts += np.bincount(sids.ravel(), minlength=len(surfaces))
    labels = _assign_labels(rng, counts, config)
    for s, lab in zip(surfaces, labels):
        s.label = RegionLabel(int(lab))
        s.color = rng.uniform(0.05, 0.95, size=3)

    dirs = rng.standard_normal((FEATURE_DIM, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mags = rng.uniform(0.2, 0.9, size=FEATURE_DIM)
    encoding = Encoding(dirs * mags[:, None], rng.uniform(0, 2 * np.pi, size=FEATURE_DIM))

    all_ids = train_ids + test_ids
    trajectories = {
        s.id: _in_plane_motion(rng, s, all_ids) for s in surfaces if s.label == RegionLabel.Dynamic
    }
    scene = SyntheticScene(
        surfaces, trajectories, center, radius, config.seed, k, encoding, config, train_ids, test_ids
    )
    train = [
        _render_frame(scene, f, p, rng, config.feature_noise_sigma, hits)
        for f, p, hits in zip(train_ids, train_poses, train_hits)
    ]
    test = [_render_frame(scene, f, p, rng, config.feature_noise_sigma) for f, p in zip(test_ids, test_poses)]
    return scene, train, test


def label_shares(frames: list[Frame]) -> dict[RegionLabel, float]:
    labels = np.concatenate([f.grid.labels.ravel() for f in frames])
    return {lab: float(np.mean(labels == lab)) for lab in RegionLabel}


# --------------------------------------------------------------------------- I/O

_CELL_DTYPE_CACHE: dict[int, np.dtype] = {}


def cell_dtype(dim: int) -> np.dtype:
    if dim not in _CELL_DTYPE_CACHE:
        _CELL_DTYPE_CACHE[dim] = np.dtype(
            [
                ("feature", "<f4", (dim,)),
                ("appearance", "<f4", (3,)),
                ("gt_coord", "<f4", (3,)),
                ("gt_label", "u1"),
                ("pixel", "<f4", (2,)),
            ]
        )
    return _CELL_DTYPE_CACHE[dim]


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _pose_line(frame_id: int, pose: Pose) -> str:
    vals = list(pose.quaternion()) + list(pose.translation)
    return f"{frame_id} " + " ".join(f"{v:.17g}" for v in vals)


def _parse_pose(fields: list[str]) -> Pose:
    vals = [float(x) for x in fields]
    return Pose.from_quaternion(vals[:4], vals[4:7])


def encode_grid(grid: FeatureGrid) -> bytes:
    rows, cols = grid.shape
    dim = grid.features.shape[-1]
    cells = np.zeros(rows * cols, dtype=cell_dtype(dim))
    cells["feature"] = grid.features.reshape(-1, dim)
    cells["appearance"] = grid.appearance.reshape(-1, 3)
    cells["gt_coord"] = grid.gt_coords.reshape(-1, 3)
    cells["gt_label"] = grid.labels.ravel()
    cells["pixel"] = grid.pixels.reshape(-1, 2)
    header = GRID_MAGIC + np.array([SCHEMA_VERSION, rows, cols, dim], dtype="<u4").tobytes()
    return header + cells.tobytes()


def decode_grid(data: bytes, frame_id: int) -> FeatureGrid:
    if len(data) < 20 or data[:4] != GRID_MAGIC:
        raise DatasetError(f"grid {frame_id}: bad magic or truncated header")
    version, rows, cols, dim = (int(x) for x in np.frombuffer(data[4:20], dtype="<u4"))
    if version != SCHEMA_VERSION:
        raise DatasetError(f"grid {frame_id}: schema version {version}, expected {SCHEMA_VERSION}")
    dt = cell_dtype(dim)
    expected = 20 + rows * cols * dt.itemsize
    if len(data) != expected:
        raise DatasetError(f"grid {frame_id}: expected {expected} bytes, found {len(data)}")
    cells = np.frombuffer(data[20:], dtype=dt)
    return FeatureGrid(
        frame_id,
        cells["pixel"].astype(np.float64).reshape(rows, cols, 2),
        cells["feature"].reshape(rows, cols, dim).copy(),
        cells["gt_coord"].astype(np.float64).reshape(rows, cols, 3),
        cells["gt_label"].reshape(rows, cols).copy(),
        cells["appearance"].reshape(rows, cols, 3).copy(),
        np.full((rows, cols), -1, dtype=np.int32),
    )


def scene_to_json(scene: SyntheticScene) -> dict:
    k = scene.intrinsics
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": scene.rng_seed,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
        "patch_size": PATCH,
        "feature_dim": int(scene.encoding.frequencies.shape[0]),
        "scene_center": scene.scene_center.tolist(),
        "scene_radius": scene.scene_radius,
        "config": asdict(scene.config),
        "encoding": {
            "frequencies": scene.encoding.frequencies.tolist(),
            "phases": scene.encoding.phases.tolist(),
        },
        "surfaces": [
            {
                "id": s.id,
                "label": RegionLabel(s.label).name,
                "corners": s.corners.tolist(),
                "color": np.asarray(s.color).tolist(),
            }
            for s in scene.surfaces
        ],
        "dynamic_trajectories": {
            str(sid): [_pose_line(f, p).split(" ") for f, p in sorted(traj.items())]
            for sid, traj in sorted(scene.dynamic_trajectories.items())
        },
        "train_frames": list(scene.train_ids),
        "test_frames": list(scene.test_ids),
    }


def scene_from_json(doc: dict) -> SyntheticScene:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"scene.json schema version {version}, expected {SCHEMA_VERSION}")
    try:
        k = CameraIntrinsics(**doc["intrinsics"])
        surfaces = []
        for s in doc["surfaces"]:
            c = np.array(s["corners"], dtype=float)
            surfaces.append(
                Surface(int(s["id"]), c[0], c[1] - c[0], c[3] - c[0], RegionLabel[s["label"]], np.array(s["color"]))
            )
        traj = {
            int(sid): {int(row[0]): _parse_pose(row[1:]) for row in rows}
            for sid, rows in doc["dynamic_trajectories"].items()
        }
        enc = Encoding(np.array(doc["encoding"]["frequencies"]), np.array(doc["encoding"]["phases"]))
        return SyntheticScene(
            surfaces,
            traj,
            np.array(doc["scene_center"], dtype=float),
            float(doc["scene_radius"]),
            int(doc["seed"]),
            k,
            enc,
            SceneConfig(**doc["config"]),
            [int(x) for x in doc["train_frames"]],
            [int(x) for x in doc["test_frames"]],
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DatasetError(f"scene.json is malformed: {exc}") from exc


def write_dataset(path, scene: SyntheticScene, train: list[Frame], test: list[Frame] = ()):
    path = Path(path)
    (path / "grids").mkdir(parents=True, exist_ok=True)
    scene.train_ids = [f.frame_id for f in train]
    scene.test_ids = [f.frame_id for f in test]
    doc = scene_to_json(scene)
    _atomic_write(path / "scene.json", json.dumps(doc, indent=1).encode("utf-8"))
    lines = [_pose_line(f.frame_id, f.pose_gt) for f in list(train) + list(test)]
    _atomic_write(path / "poses.txt", ("\n".join(lines) + "\n").encode("utf-8"))
    for f in list(train) + list(test):
        _atomic_write(path / "grids" / f"{f.frame_id}.bin", encode_grid(f.grid))


def read_dataset(path, with_surface_ids: bool = True):
    """Load ``(scene, train, test)``. Surface ids are recovered by re-casting rays."""
    path = Path(path)
    try:
        doc = json.loads((path / "scene.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"scene.json is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise DatasetError(f"cannot read {path / 'scene.json'}: {exc}") from exc
    scene = scene_from_json(doc)
    poses = {}
    try:
        for line in (path / "poses.txt").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 8:
                raise DatasetError(f"poses.txt: expected 8 fields, got {len(fields)}")
            poses[int(fields[0])] = _parse_pose(fields[1:])
    except OSError as exc:
        raise DatasetError(f"cannot read poses.txt: {exc}") from exc
    except ValueError as exc:
        raise DatasetError(f"poses.txt is malformed: {exc}") from exc

    def load(fid: int) -> Frame:
        if fid not in poses:
            raise DatasetError(f"frame {fid} has no pose")
        try:
            data = (path / "grids" / f"{fid}.bin").read_bytes()
        except OSError as exc:
            raise DatasetError(f"cannot read grid for frame {fid}: {exc}") from exc
        grid = decode_grid(data, fid)
        if grid.shape != grid_shape(scene.intrinsics):
            raise DatasetError(f"grid {fid}: shape {grid.shape} does not match intrinsics")
        if with_surface_ids:
            _, grid.surface_ids = cast_rays(scene.surfaces, poses[fid], scene.intrinsics, grid.pixels)
        return Frame(fid, poses[fid], scene.intrinsics, grid)

    train = [load(f) for f in scene.train_ids]
    test = [load(f) for f in scene.test_ids]
    return scene, train, test
