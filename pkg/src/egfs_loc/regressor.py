"""Scene-specific coordinate regressor with a confidence head.

Every patch is processed independently by the same weights. The trunk is a
stack of ReLU layers; a linear head predicts the scene coordinate as an offset
from the scene centre and a two-layer head predicts a confidence logit.

Training minimises, per sample,

    valid:    c * w*tanh(r/w) - alpha * log(c)
    invalid:  ||y - y_dummy|| - alpha * log(1 - c)

where ``r`` is the reprojection error under the ground-truth pose, ``w`` a
clamp width that decays over training, and ``y_dummy`` the back-projection of
the patch centre at 10 m depth. Gradients are derived by hand.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DUMMY_DEPTH, Z_MIN

LOG_EPS = 1e-12
MAX_DEPTH = 1000.0
MAX_REPROJ = 1000.0
RADIUS_FACTOR = 10.0
CKPT_MAGIC = b"EGFSW"
CKPT_VERSION = 1

TRUNK = ("trunk0", "trunk1", "trunk2", "trunk3")
LAYERS = TRUNK + ("coord", "conf0", "conf1")


@dataclass
class TrainConfig:
    alpha: float = 10.0
    tau_prompt_pct: float = 10.0
    epochs_total: int = 20
    epochs_per_iteration: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 512
    clamp_w_max: float = 50.0
    clamp_w_min: float = 1.0
    seed: int = 0
    use_confidence: bool = True
    fixed_epoch_length: bool = True  # masked epochs draw as many samples as a full one
    hidden: int = 128
    conf_hidden: int = 64
    dtype: str = "float32"

    def validate(self):
        if self.epochs_per_iteration <= 0 or self.epochs_total % self.epochs_per_iteration:
            raise ValueError("epochs_total must be a positive multiple of epochs_per_iteration")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.tau_prompt_pct <= 100:
            raise ValueError("tau_prompt_pct must lie in (0, 100]")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if not 0 < self.clamp_w_min <= self.clamp_w_max:
            raise ValueError("need 0 < clamp_w_min <= clamp_w_max")

    @property
    def n_iterations(self) -> int:
        return self.epochs_total // self.epochs_per_iteration


@dataclass(eq=False)
class RegressorParams:
    """Layer weights keyed by layer name: ``weights[name] = (W, b)`` with ``W`` of shape (in, out)."""

    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    scene_center: np.ndarray
    scene_radius: float
    use_confidence: bool = True

    @property
    def dtype(self):
        return self.weights["trunk0"][0].dtype

    @property
    def feature_dim(self) -> int:
        return self.weights["trunk0"][0].shape[0]

    def copy(self) -> "RegressorParams":
        return RegressorParams(
            {k: (w.copy(), b.copy()) for k, (w, b) in self.weights.items()},
            self.scene_center.copy(),
            self.scene_radius,
            self.use_confidence,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in (self.weights[k] for k in LAYERS)])

    def with_flat(self, vec: np.ndarray) -> "RegressorParams":
        out, i = {}, 0
        for k in LAYERS:
            w, b = self.weights[k]
            nw, nb = w.size, b.size
            out[k] = (vec[i : i + nw].reshape(w.shape).astype(w.dtype), vec[i + nw : i + nw + nb].astype(b.dtype))
            i += nw + nb
        return RegressorParams(out, self.scene_center.copy(), self.scene_radius, self.use_confidence)


def init_params(
    feature_dim: int,
    scene_center,
    scene_radius: float,
    rng: np.random.Generator,
    hidden: int = 128,
    conf_hidden: int = 64,
    dtype="float32",
    use_confidence: bool = True,
) -> RegressorParams:
    dims = [(feature_dim, hidden)] + [(hidden, hidden)] * (len(TRUNK) - 1)
    weights = {}
    for name, (i, o) in zip(TRUNK, dims):
        weights[name] = (rng.normal(0.0, np.sqrt(2.0 / i), size=(i, o)), np.zeros(o))
    weights["coord"] = (rng.normal(0.0, 0.1 / np.sqrt(hidden), size=(hidden, 3)), np.zeros(3))
    weights["conf0"] = (rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, conf_hidden)), np.zeros(conf_hidden))
    weights["conf1"] = (rng.normal(0.0, 0.1 / np.sqrt(conf_hidden), size=(conf_hidden, 1)), np.zeros(1))
    weights = {k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in weights.items()}
    return RegressorParams(weights, np.asarray(scene_center, dtype=float), float(scene_radius), use_confidence)


def zero_params(feature_dim: int, scene_center, scene_radius: float, hidden=128, conf_hidden=64, dtype="float64"):
    p = init_params(feature_dim, scene_center, scene_radius, np.random.default_rng(0), hidden, conf_hidden, dtype)
    return p.with_flat(np.zeros_like(p.flat()))


def sigmoid(x):
    # exp(-log(1 + e^-x)) keeps both tails accurate
    return np.exp(-np.logaddexp(0.0, -np.asarray(x)))


def _forward_cache(params: RegressorParams, features: np.ndarray):
    x = np.asarray(features, dtype=params.dtype)
    if x.ndim == 1:
        x = x[None]
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    acts = [x]
    h = x
    for name in TRUNK:
        w, b = params.weights[name]
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    wc, bc = params.weights["coord"]
    offset = h @ wc + bc
    w0, b0 = params.weights["conf0"]
    g = np.maximum(h @ w0 + b0, 0.0)
    w1, b1 = params.weights["conf1"]
    logit = (g @ w1 + b1)[:, 0]
    return acts, g, offset, logit


def forward(params: RegressorParams, features: np.ndarray):
    """Predict ``(coords, confidence)`` for a batch of features (N, D) -> (N, 3), (N,)."""
    _, _, offset, logit = _forward_cache(params, features)
    y = params.scene_center + offset.astype(np.float64)
    c = sigmoid(logit.astype(np.float64))
    if not params.use_confidence:
        c = np.ones_like(c)
    return y, c


def predict_batched(params: RegressorParams, features: np.ndarray, chunk: int = 65536):
    features = np.asarray(features).reshape(-1, params.feature_dim)
    ys, cs = [], []
    for i in range(0, len(features), chunk):
        y, c = forward(params, features[i : i + chunk])
        ys.append(y)
        cs.append(c)
    if not ys:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(ys), np.concatenate(cs)


def clamp_width(t: float, cfg: TrainConfig) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError("training progress must lie in [0, 1]")
    return cfg.clamp_w_max * (1.0 - t) + cfg.clamp_w_min * t


def soft_clamp(r, w: float):
    return w * np.tanh(np.asarray(r) / w)


def camera_terms(y, rotations, translations, intrinsics, pixels):
    """Camera-frame point, projected pixel residual and its norm for each sample.

    ``rotations``/``translations`` are camera-to-world; ``intrinsics`` rows are (fx, fy, cx, cy).
    """
    pc = np.einsum("nji,nj->ni", rotations, y - translations)
    z = pc[:, 2]
    safe_z = np.where(np.abs(z) > 1e-12, z, 1e-12)
    u = intrinsics[:, 0] * pc[:, 0] / safe_z + intrinsics[:, 2]
    v = intrinsics[:, 1] * pc[:, 1] / safe_z + intrinsics[:, 3]
    e = np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1)
    r = np.linalg.norm(e, axis=1)
    return pc, safe_z, e, r


def validity(y, pc, r, scene_center, scene_radius):
    z = pc[:, 2]
    dist = np.linalg.norm(y - scene_center, axis=1)
    return (z >= Z_MIN) & (z <= MAX_DEPTH) & (r < MAX_REPROJ) & (dist < scene_radius * RADIUS_FACTOR)


def dummy_targets(pixels, rotations, translations, intrinsics):
    x = (pixels[:, 0] - intrinsics[:, 2]) / intrinsics[:, 0] * DUMMY_DEPTH
    yy = (pixels[:, 1] - intrinsics[:, 3]) / intrinsics[:, 1] * DUMMY_DEPTH
    pc = np.stack([x, yy, np.full_like(x, DUMMY_DEPTH)], axis=1)
    return np.einsum("nij,nj->ni", rotations, pc) + translations


def per_sample_loss(y, c, batch, w: float, alpha: float, use_confidence: bool = True):
    """Loss per sample and the validity flags; a direct evaluation used by tests and diagnostics."""
    pc, _, _, r = camera_terms(y, batch["rotations"], batch["translations"], batch["intrinsics"], batch["pixels"])
    valid = validity(y, pc, r, batch["scene_center"], batch["scene_radius"])
    ybar = dummy_targets(batch["pixels"], batch["rotations"], batch["translations"], batch["intrinsics"])
    dist = np.linalg.norm(y - ybar, axis=1)
    rhat = soft_clamp(np.where(valid, r, 0.0), w)
    if use_confidence:
        lv = c * rhat - alpha * np.log(c + LOG_EPS)
        li = dist - alpha * np.log(1.0 - c + LOG_EPS)
    else:
        lv, li = rhat, dist
    return np.where(valid, lv, li), valid


def loss_and_grad(params: RegressorParams, batch: dict, t: float, cfg: TrainConfig):
    """Mean loss over the batch and its exact gradient as a dict ``{layer: (dW, db)}``."""
    feats = batch["features"]
    n = len(feats)
    if n == 0:
        raise ValueError("empty batch")
    acts, g, offset, logit = _forward_cache(params, feats)
    y = params.scene_center + offset.astype(np.float64)
    logit64 = logit.astype(np.float64)
    use_conf = params.use_confidence and cfg.use_confidence
    c = sigmoid(logit64) if use_conf else np.ones(n)
    omc = sigmoid(-logit64) if use_conf else np.zeros(n)  # 1 - c without cancellation
    w = clamp_width(t, cfg)
    alpha = cfg.alpha

    rot, trans, kk, px = batch["rotations"], batch["translations"], batch["intrinsics"], batch["pixels"]
    pc, z, e, r = camera_terms(y, rot, trans, kk, px)
    valid = validity(y, pc, r, params.scene_center, params.scene_radius)
    ybar = dummy_targets(px, rot, trans, kk)
    diff = y - ybar
    dist = np.linalg.norm(diff, axis=1)

    th = np.tanh(np.where(valid, r, 0.0) / w)
    rhat = w * th
    if use_conf:
        lv = c * rhat - alpha * np.log(c + LOG_EPS)
        li = dist - alpha * np.log(omc + LOG_EPS)
        dl_dc = np.where(valid, rhat - alpha / (c + LOG_EPS), alpha / (omc + LOG_EPS))
        dl_dlogit = dl_dc * c * omc / n
        weight = c
    else:
        lv, li = rhat, dist
        dl_dlogit = np.zeros(n)
        weight = np.ones(n)
    losses = np.where(valid, lv, li)
    loss = float(np.mean(losses))

    # valid branch: d(w tanh(r/w))/dr = 1 - tanh^2, dr/de = e / r
    dr = weight * (1.0 - th**2) / np.maximum(r, 1e-12)
    de = e * dr[:, None]
    fx, fy = kk[:, 0], kk[:, 1]
    dpc = np.stack(
        [de[:, 0] * fx / z, de[:, 1] * fy / z, -(de[:, 0] * fx * pc[:, 0] + de[:, 1] * fy * pc[:, 1]) / z**2],
        axis=1,
    )
    dy_valid = np.einsum("nij,nj->ni", rot, dpc)
    dy_invalid = diff / np.maximum(dist, 1e-12)[:, None]
    dy = np.where(valid[:, None], dy_valid, dy_invalid) / n

    return loss, _backward(params, acts, g, dy, dl_dlogit), {"valid_fraction": float(valid.mean()), "losses": losses}


def _backward(params, acts, g, dy, dlogit):
    dt = params.dtype
    grads = {}
    h = acts[-1]
    dy = dy.astype(dt)
    dlogit = dlogit.astype(dt)[:, None]
    wc, _ = params.weights["coord"]
    grads["coord"] = (h.T @ dy, dy.sum(0))
    w1, _ = params.weights["conf1"]
    grads["conf1"] = (g.T @ dlogit, dlogit.sum(0))
    dg = (dlogit @ w1.T) * (g > 0)
    w0, _ = params.weights["conf0"]
    grads["conf0"] = (h.T @ dg, dg.sum(0))
    dh = dy @ wc.T + dg @ w0.T
    for i in range(len(TRUNK) - 1, -1, -1):
        name = TRUNK[i]
        w, _ = params.weights[name]
        dz = dh * (acts[i + 1] > 0)
        grads[name] = (acts[i].T @ dz, dz.sum(0))
        if i:
            dh = dz @ w.T
    return grads


@dataclass(eq=False)
class TrainingBuffer:
    """Flat sample arrays plus per-frame pose tables indexed by ``frame_index``."""

    features: np.ndarray        # (N, D)
    pixels: np.ndarray          # (N, 2)
    frame_index: np.ndarray     # (N,) index into the per-frame tables
    rows: np.ndarray
    cols: np.ndarray
    frame_ids: np.ndarray       # (F,)
    rotations: np.ndarray       # (F, 3, 3) camera-to-world
    translations: np.ndarray    # (F, 3)
    intrinsics: np.ndarray      # (F, 4) fx, fy, cx, cy
    scene_center: np.ndarray
    scene_radius: float

    def __len__(self):
        return len(self.features)

    def take(self, idx) -> dict:
        fi = self.frame_index[idx]
        return {
            "features": self.features[idx],
            "pixels": self.pixels[idx],
            "rotations": self.rotations[fi],
            "translations": self.translations[fi],
            "intrinsics": self.intrinsics[fi],
            "scene_center": self.scene_center,
            "scene_radius": self.scene_radius,
        }

    def subset(self, idx) -> "TrainingBuffer":
        return TrainingBuffer(
            self.features[idx], self.pixels[idx], self.frame_index[idx], self.rows[idx], self.cols[idx],
            self.frame_ids, self.rotations, self.translations, self.intrinsics, self.scene_center, self.scene_radius,
        )

    def cells(self) -> list[tuple[int, int, int]]:
        """(frame_id, row, col) of every entry."""
        fids = self.frame_ids[self.frame_index]
        return list(zip(fids.tolist(), self.rows.tolist(), self.cols.tolist()))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: RegressorParams, grads: dict, state: AdamState, lr: float) -> RegressorParams:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    new = {}
    for name, (w, b) in params.weights.items():
        gw, gb = grads[name]
        out = []
        for j, (p, gp) in enumerate(((w, gw), (b, gb))):
            key = (name, j)
            m = state.m.get(key)
            v = state.v.get(key)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = b1 * m + (1 - b1) * gp
            v = b2 * v + (1 - b2) * gp * gp
            state.m[key], state.v[key] = m, v
            out.append((p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype))
        new[name] = tuple(out)
    return RegressorParams(new, params.scene_center, params.scene_radius, params.use_confidence)


def train_epoch(params, buffer, t_range, cfg: TrainConfig, state: AdamState, rng: np.random.Generator,
                n_samples: int | None = None):
    """Shuffled passes over ``buffer``. Returns ``(params, {"mean_loss", "valid_fraction"})``.

    ``n_samples`` fixes the epoch length; a smaller buffer is cycled through
    fresh permutations until that many samples have been drawn.
    """
    n = len(buffer)
    if n == 0:
        raise ValueError("training buffer is empty")
    if n_samples is None or n_samples == n:
        order = rng.permutation(n)
    else:
        reps = -(-n_samples // n)
        order = np.concatenate([rng.permutation(n) for _ in range(reps)])[:n_samples]
    n = len(order)
    bs = cfg.batch_size
    n_batches = (n + bs - 1) // bs
    t0, t1 = t_range
    loss_sum = 0.0
    valid_sum = 0.0
    for i in range(n_batches):
        idx = order[i * bs : (i + 1) * bs]
        batch = buffer.take(idx)
        t = t0 + (t1 - t0) * i / n_batches
        loss, grads, info = loss_and_grad(params, batch, t, cfg)
        params = adam_step(params, grads, state, cfg.learning_rate)
        loss_sum += loss * len(idx)
        valid_sum += info["valid_fraction"] * len(idx)
    return params, {"mean_loss": loss_sum / n, "valid_fraction": valid_sum / n}


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, params: RegressorParams, extra: dict | None = None):
    path = Path(path)
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(LAYERS))]
    for name in LAYERS:
        w, b = params.weights[name]
        out.append(struct.pack("<II", *w.shape))
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    meta = {
        "layers": list(LAYERS),
        "scene_center": params.scene_center.tolist(),
        "scene_radius": params.scene_radius,
        "use_confidence": params.use_confidence,
    }
    if extra:
        meta.update(extra)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class CheckpointError(Exception):
    pass


def load_checkpoint(path, dtype="float32"):
    """Returns ``(params, metadata)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:5] != CKPT_MAGIC:
        raise CheckpointError("not an EGFSW checkpoint")
    try:
        version, n_layers = struct.unpack_from("<II", data, 5)
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        off = 13
        tensors = []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
            w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
            off += 4 * rows * cols
            b = np.frombuffer(data, dtype="<f4", count=cols, offset=off)
            off += 4 * cols
            tensors.append((w.astype(dtype), b.astype(dtype)))
        (n_meta,) = struct.unpack_from("<I", data, off)
        meta = json.loads(data[off + 4 : off + 4 + n_meta].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    params = RegressorParams(
        dict(zip(meta["layers"], tensors)),
        np.array(meta["scene_center"], dtype=float),
        float(meta["scene_radius"]),
        bool(meta["use_confidence"]),
    )
    return params, meta


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
