"""Error-guided feature selection.

Each training iteration after the first:

1. predict coordinates and confidences for every patch of every training frame,
2. measure reprojection errors against the ground-truth poses,
3. take the lowest ``tau`` percent of each frame's errors as point prompts,
4. grow every prompt into a coherent region with a region expander,
5. drop cells whose confidence is below the frame's median confidence,
6. refill the training buffer from the surviving cells only.

Error maps are ``(rows, cols)`` float arrays with NaN marking cells whose
prediction lands behind the camera.
"""
from __future__ import annotations

import copy
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import regressor as reg
from .geometry import Z_MIN
from .seeding import stream
from .synth import Frame, RegionLabel, _atomic_write

log = logging.getLogger(__name__)

N_MAX = 2_000_000
MODES = ("random", "egfs", "quantile")


class ExpanderError(RuntimeError):
    pass


# ------------------------------------------------------------ error maps


def frame_tables(frames: list[Frame]):
    rot = np.stack([f.pose_gt.rotation for f in frames]) if frames else np.zeros((0, 3, 3))
    trans = np.stack([f.pose_gt.translation for f in frames]) if frames else np.zeros((0, 3))
    kk = np.array([[f.intrinsics.fx, f.intrinsics.fy, f.intrinsics.cx, f.intrinsics.cy] for f in frames]).reshape(-1, 4)
    return rot, trans, kk


def predict_frame(params: reg.RegressorParams, frame: Frame):
    """Per-cell ``(coords (R,C,3), confidence (R,C))``."""
    rows, cols = frame.grid.shape
    y, c = reg.predict_batched(params, frame.grid.features)
    return y.reshape(rows, cols, 3), c.reshape(rows, cols)


def frame_errors(coords: np.ndarray, frame: Frame) -> np.ndarray:
    rows, cols = frame.grid.shape
    y = coords.reshape(-1, 3)
    n = len(y)
    rot = np.broadcast_to(frame.pose_gt.rotation, (n, 3, 3))
    trans = np.broadcast_to(frame.pose_gt.translation, (n, 3))
    k = frame.intrinsics
    kk = np.broadcast_to(np.array([k.fx, k.fy, k.cx, k.cy]), (n, 4))
    pc, _, _, r = reg.camera_terms(y, rot, trans, kk, frame.grid.pixels.reshape(-1, 2))
    r = np.where(pc[:, 2] > Z_MIN, r, np.nan)
    return r.reshape(rows, cols)


def compute_maps(params: reg.RegressorParams, frames: list[Frame]):
    """Error maps and confidence maps for every frame, in frame order."""
    errors, confs = [], []
    for f in frames:
        y, c = predict_frame(params, f)
        errors.append(frame_errors(y, f))
        confs.append(c)
    return errors, confs


def compute_error_maps(params: reg.RegressorParams, frames: list[Frame]) -> list[np.ndarray]:
    return compute_maps(params, frames)[0]


# --------------------------------------------------------------- prompts


def prompt_count(tau_pct: float, n_valid: int) -> int:
    # round before ceil so e.g. 15% of 100 stays 15 despite float noise
    return min(n_valid, math.ceil(round(tau_pct * n_valid / 100.0, 9)))


def select_prompts(error_map: np.ndarray, tau_pct: float) -> np.ndarray:
    """Cells with the lowest errors, as an (n, 2) array of (row, col).

    Ties go to the lexicographically smaller (row, col). Frames without a valid
    cell yield an empty prompt set.
    """
    flat = error_map.ravel()
    valid = np.flatnonzero(np.isfinite(flat))
    if len(valid) == 0:
        return np.zeros((0, 2), dtype=int)
    n = prompt_count(tau_pct, len(valid))
    order = valid[np.argsort(flat[valid], kind="stable")[:n]]
    order.sort()
    return np.stack(np.unravel_index(order, error_map.shape), axis=1)


# ------------------------------------------------------------- expanders

_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def connected_component(allowed: np.ndarray, seed: tuple[int, int]) -> np.ndarray:
    rows, cols = allowed.shape
    out = np.zeros_like(allowed, dtype=bool)
    if not allowed[seed]:
        return out
    out[seed] = True
    queue = deque([seed])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols and allowed[rr, cc] and not out[rr, cc]:
                out[rr, cc] = True
                queue.append((rr, cc))
    return out


@dataclass
class GrowExpander:
    """Flood fill over cells whose appearance stays within ``tolerance`` (L-inf) of the running region mean."""

    tolerance: float = 0.05
    name: str = "grow"

    def grow(self, appearance: np.ndarray, seed: tuple[int, int]) -> np.ndarray:
        rows, cols = appearance.shape[:2]
        app = appearance.astype(np.float64)
        region = np.zeros((rows, cols), dtype=bool)
        region[seed] = True
        total = app[seed].copy()
        count = 1
        queue = deque([seed])
        while queue:
            r, c = queue.popleft()
            for dr, dc in _NEIGHBOURS:
                rr, cc = r + dr, c + dc
                if not (0 <= rr < rows and 0 <= cc < cols) or region[rr, cc]:
                    continue
                if np.max(np.abs(app[rr, cc] - total / count)) < self.tolerance:
                    region[rr, cc] = True
                    total += app[rr, cc]
                    count += 1
                    queue.append((rr, cc))
        return region

    def expand(self, prompts: np.ndarray, frame: Frame) -> np.ndarray:
        mask = np.zeros(frame.grid.shape, dtype=bool)
        for r, c in prompts:
            if not mask[r, c]:
                mask |= self.grow(frame.grid.appearance, (int(r), int(c)))
        return mask


@dataclass
class OracleExpander:
    """Ground-truth stand-in: the connected part of the prompt's surface (or label, when surface ids are unknown)."""

    name: str = "oracle"

    def expand(self, prompts: np.ndarray, frame: Frame) -> np.ndarray:
        g = frame.grid
        ids = g.surface_ids if g.surface_ids is not None and np.all(g.surface_ids >= 0) else g.labels
        mask = np.zeros(g.shape, dtype=bool)
        for r, c in prompts:
            r, c = int(r), int(c)
            if not mask[r, c]:
                mask |= connected_component(ids == ids[r, c], (r, c))
        return mask


@dataclass
class FileExpander:
    """Regions precomputed offline, one or more PBM files per frame.

    ``<mask_dir>/<frame_id>.pbm`` and ``<mask_dir>/<frame_id>_<k>.pbm`` are read;
    each connected component of a file is a candidate region and the result is
    the union of candidates that contain a prompt.
    """

    mask_dir: str | Path
    name: str = "file"

    def regions(self, frame_id: int) -> list[np.ndarray]:
        d = Path(self.mask_dir)
        pat = re.compile(rf"^{frame_id}(_\d+)?\.pbm$")
        files = sorted(p for p in d.glob(f"{frame_id}*.pbm") if pat.match(p.name)) if d.is_dir() else []
        if not files:
            raise ExpanderError(f"no precomputed mask for frame {frame_id} in {d}")
        return [read_pbm(p) for p in files]

    def expand(self, prompts: np.ndarray, frame: Frame) -> np.ndarray:
        mask = np.zeros(frame.grid.shape, dtype=bool)
        for region in self.regions(frame.frame_id):
            if region.shape != frame.grid.shape:
                raise ExpanderError(f"mask for frame {frame.frame_id} has shape {region.shape}, expected {frame.grid.shape}")
            for r, c in prompts:
                r, c = int(r), int(c)
                if region[r, c] and not mask[r, c]:
                    mask |= connected_component(region, (r, c))
        return mask


def make_expander(name: str, **kwargs):
    if name == "grow":
        return GrowExpander(tolerance=float(kwargs.get("tolerance", 0.05)))
    if name == "oracle":
        return OracleExpander()
    if name == "file":
        if not kwargs.get("mask_dir"):
            raise ValueError("file expander needs mask_dir")
        return FileExpander(kwargs["mask_dir"])
    raise ValueError(f"unknown expander {name!r}")


def expand(prompts: np.ndarray, frame: Frame, expander) -> np.ndarray:
    return expander.expand(prompts, frame)


# ------------------------------------------------------------ refinement


def refine_with_confidence(mask: np.ndarray, conf: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Keep masked cells whose confidence reaches the frame median; fall back to ``mask`` if nothing survives."""
    if valid is None:
        valid = np.ones(mask.shape, dtype=bool)
    if not valid.any():
        return mask.copy()
    sigma = np.median(conf[valid])
    refined = mask & (conf >= sigma)
    if mask.any() and not refined.any():
        log.warning("confidence refinement emptied a mask; keeping the unrefined mask")
        return mask.copy()
    return refined


# ---------------------------------------------------------------- buffer


def build_buffer(
    frames: list[Frame],
    masks: list[np.ndarray] | None,
    rng: np.random.Generator,
    scene_center,
    scene_radius: float,
    cap: int = N_MAX,
) -> reg.TrainingBuffer:
    """Collect the masked cells of every frame (all cells when ``masks`` is None)."""
    if not frames:
        raise ValueError("no frames to sample from")
    if masks is not None and not any(m.any() for m in masks):
        log.warning("every mask is empty; sampling from all cells instead")
        masks = None
    feats, pix, fidx, rows, cols = [], [], [], [], []
    for i, f in enumerate(frames):
        g = f.grid
        sel = np.ones(g.shape, dtype=bool) if masks is None else masks[i]
        rr, cc = np.nonzero(sel)
        feats.append(g.features[rr, cc])
        pix.append(g.pixels[rr, cc])
        fidx.append(np.full(len(rr), i, dtype=np.int32))
        rows.append(rr.astype(np.int16))
        cols.append(cc.astype(np.int16))
    rot, trans, kk = frame_tables(frames)
    buf = reg.TrainingBuffer(
        np.concatenate(feats),
        np.concatenate(pix),
        np.concatenate(fidx),
        np.concatenate(rows),
        np.concatenate(cols),
        np.array([f.frame_id for f in frames]),
        rot,
        trans,
        kk,
        np.asarray(scene_center, dtype=float),
        float(scene_radius),
    )
    if len(buf) > cap:
        keep = np.sort(rng.choice(len(buf), size=cap, replace=False))
        buf = buf.subset(keep)
    return buf


def quantile_masks(error_maps: list[np.ndarray], q: float) -> list[np.ndarray]:
    """Cells whose error is below the q-quantile of all valid errors in the dataset."""
    allv = np.concatenate([e[np.isfinite(e)] for e in error_maps]) if error_maps else np.zeros(0)
    if len(allv) == 0:
        return [np.zeros(e.shape, dtype=bool) for e in error_maps]
    thr = np.quantile(allv, q)
    return [np.isfinite(e) & (np.nan_to_num(e, nan=np.inf) < thr) for e in error_maps]


def egfs_masks(frames, error_maps, conf_maps, tau_pct, expander, refine=True):
    """Prompts, expanded masks and refined masks for every frame."""
    prompts, expanded, refined = [], [], []
    for f, e, c in zip(frames, error_maps, conf_maps):
        p = select_prompts(e, tau_pct)
        m = expander.expand(p, f) if len(p) else np.zeros(f.grid.shape, dtype=bool)
        prompts.append(p)
        expanded.append(m)
        refined.append(refine_with_confidence(m, c, np.isfinite(e)) if refine else m)
    return prompts, expanded, refined


def label_share(frames: list[Frame], masks: list[np.ndarray], label=RegionLabel.Dynamic) -> float:
    """Share of masked cells carrying ``label``."""
    hit = sum(int(np.sum(m & (f.grid.labels == label))) for f, m in zip(frames, masks))
    total = sum(int(m.sum()) for m in masks)
    return hit / total if total else 0.0


# -------------------------------------------------------------- training


@dataclass
class IterationRecord:
    iteration: int
    sampling: str
    buffer_size: int
    epochs: list[dict] = field(default_factory=list)
    prompts: list[np.ndarray] | None = None
    masks: list[np.ndarray] | None = None
    expanded: list[np.ndarray] | None = None
    error_maps: list[np.ndarray] | None = None
    dynamic_share: float | None = None


class Trainer:
    """Iterative training: ``k`` epochs per iteration, masks regenerated between iterations.

    ``mode`` is ``"random"`` (every cell, every iteration), ``"egfs"`` or
    ``"quantile"``. The first iteration always samples every cell. The state
    after any iteration can be forked so several variants share a prefix.
    """

    def __init__(self, frames, scene_center, scene_radius, cfg: reg.TrainConfig, expander=None,
                 mode: str = "egfs", quantile: float | None = None, refine: bool | None = None):
        cfg.validate()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "quantile" and quantile is None:
            raise ValueError("quantile mode needs a quantile")
        if not frames:
            raise ValueError("no training frames")
        self.frames = frames
        self.scene_center = np.asarray(scene_center, dtype=float)
        self.scene_radius = float(scene_radius)
        self.cfg = cfg
        self.expander = expander or GrowExpander()
        self.mode = mode
        self.quantile = quantile
        self.refine = cfg.use_confidence if refine is None else refine
        self.train_rng = stream(cfg.seed, "train")
        self.buffer_rng = stream(cfg.seed, "buffer")
        self.params = reg.init_params(
            frames[0].grid.features.shape[-1], self.scene_center, self.scene_radius, self.train_rng,
            cfg.hidden, cfg.conf_hidden, cfg.dtype, cfg.use_confidence,
        )
        self.adam = reg.AdamState()
        self.epoch_samples = min(sum(f.grid.labels.size for f in frames), N_MAX)
        self.history: list[IterationRecord] = []

    @property
    def done(self) -> bool:
        return len(self.history) >= self.cfg.n_iterations

    def fork(self, **changes) -> "Trainer":
        other = copy.copy(self)
        other.params = self.params.copy()
        other.adam = copy.deepcopy(self.adam)
        other.train_rng = copy.deepcopy(self.train_rng)
        other.buffer_rng = copy.deepcopy(self.buffer_rng)
        other.history = list(self.history)
        for k, v in changes.items():
            if not hasattr(other, k):
                raise AttributeError(k)
            setattr(other, k, v)
        return other

    def _next_buffer(self, it: int, rec: IterationRecord):
        if it == 0 or self.mode == "random":
            rec.sampling = "random"
            return build_buffer(self.frames, None, self.buffer_rng, self.scene_center, self.scene_radius)
        errors, confs = compute_maps(self.params, self.frames)
        rec.error_maps = errors
        if self.mode == "quantile":
            masks = quantile_masks(errors, self.quantile)
            rec.sampling = f"quantile({self.quantile:g})"
        else:
            prompts, expanded, masks = egfs_masks(
                self.frames, errors, confs, self.cfg.tau_prompt_pct, self.expander, self.refine
            )
            rec.prompts, rec.expanded = prompts, expanded
            rec.sampling = "egfs"
        rec.masks = masks
        rec.dynamic_share = label_share(self.frames, masks)
        return build_buffer(self.frames, masks, self.buffer_rng, self.scene_center, self.scene_radius)

    def run_iteration(self) -> IterationRecord:
        it = len(self.history)
        if self.done:
            raise RuntimeError("training already finished")
        rec = IterationRecord(it + 1, "", 0)
        buffer = self._next_buffer(it, rec)
        rec.buffer_size = len(buffer)
        k, total = self.cfg.epochs_per_iteration, self.cfg.epochs_total
        n_samples = self.epoch_samples if self.cfg.fixed_epoch_length else None
        for e in range(it * k, (it + 1) * k):
            self.params, stats = reg.train_epoch(
                self.params, buffer, (e / total, (e + 1) / total), self.cfg, self.adam, self.train_rng, n_samples
            )
            stats.update(epoch=e + 1, iteration=it + 1)
            rec.epochs.append(stats)
            log.info("iter %d epoch %d loss %.4f valid %.3f buffer %d", it + 1, e + 1,
                     stats["mean_loss"], stats["valid_fraction"], len(buffer))
        self.history.append(rec)
        return rec

    def run(self):
        while not self.done:
            self.run_iteration()
        return self.params, self.history


def run_training(frames, scene_center, scene_radius, cfg: reg.TrainConfig, expander=None,
                 mode: str = "egfs", quantile: float | None = None, refine: bool | None = None):
    """Train from scratch; returns ``(params, per-iteration records)``."""
    return Trainer(frames, scene_center, scene_radius, cfg, expander, mode, quantile, refine).run()


# ------------------------------------------------------------------ dumps


def write_pbm(path, mask: np.ndarray):
    rows, cols = mask.shape
    lines = ["P1", f"{cols} {rows}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("ascii"))


def read_pbm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] == b"P4":
        tokens = re.split(rb"\s+", data[:64].split(b"#")[0], maxsplit=3)
        cols, rows = int(tokens[1]), int(tokens[2])
        header_len = len(b" ".join(tokens[:3])) + 1
        raw = np.frombuffer(data[header_len:], dtype=np.uint8)
        bits = np.unpackbits(raw.reshape(rows, -1), axis=1)[:, :cols]
        return bits.astype(bool)
    if data[:2] != b"P1":
        raise ExpanderError(f"{path}: not a PBM file")
    text = re.sub(rb"#[^\n]*", b"", data[2:]).decode("ascii")
    vals = re.findall(r"\d+", text)
    cols, rows = int(vals[0]), int(vals[1])
    bits = "".join(vals[2:])
    if len(bits) != rows * cols:
        raise ExpanderError(f"{path}: expected {rows * cols} pixels, found {len(bits)}")
    return np.array([b == "1" for b in bits], dtype=bool).reshape(rows, cols)


def write_prompts_csv(path, frames, prompts, error_maps):
    lines = ["frame_id,row,col,error_px"]
    for f, p, e in zip(frames, prompts, error_maps):
        for r, c in p:
            lines.append(f"{f.frame_id},{int(r)},{int(c)},{e[r, c]:.6f}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def dump_iteration(out_dir, frames, rec: IterationRecord):
    if rec.masks is None:
        return
    d = Path(out_dir) / "masks" / f"iter{rec.iteration}"
    d.mkdir(parents=True, exist_ok=True)
    for f, m in zip(frames, rec.masks):
        write_pbm(d / f"{f.frame_id}.pbm", m)
    if rec.prompts is not None:
        write_prompts_csv(Path(out_dir) / f"prompts_iter{rec.iteration}.csv", frames, rec.prompts, rec.error_maps)
