"""``egfs-loc`` command line.

Every subcommand reads one YAML config; flags override it and the CLI seed
overrides the config seed. The resolved config is written next to the outputs.
Exit codes: 0 success, 2 usage or config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import egfs, evaluation as ev, experiments as ex, plotting
from . import regressor as reg
from .geometry import Pose
from .pose_solver import RansacConfig
from .synth import ConfigError, DatasetError, RegionLabel, SceneConfig, _atomic_write, generate_scene, read_dataset, write_dataset

log = logging.getLogger("egfs_loc")

DEFAULTS = {
    "seed": 0,
    "dataset": "data/scene",
    "out": "runs/default",
    "mode": "egfs",
    "quantile": 0.5,
    "masks": True,
    "confidence": True,
    "confidence_filter": True,
    "split": "test",
    "scene": {},
    "train": {},
    "expander": {"name": "grow", "tolerance": 0.05},
    "ransac": {},
    "figures": True,
}
CHECKPOINT = "model.egfsw"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _pick(cls, section: dict, what: str, **extra):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise UsageError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**{**section, **extra})


def load_config(path, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config must be a mapping")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = _merge(cfg, doc)
    for key in ("seed", "dataset", "out", "mode", "quantile", "split"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "no_masks", False):
        cfg["masks"] = False
    if getattr(args, "no_confidence", False):
        cfg["confidence"] = False
    if getattr(args, "no_confidence_filter", False):
        cfg["confidence_filter"] = False
    if getattr(args, "no_figures", False):
        cfg["figures"] = False
    if getattr(args, "expander", None):
        cfg["expander"] = {"name": args.expander}
    if getattr(args, "mask_dir", None):
        cfg["expander"] = {"name": "file", "mask_dir": args.mask_dir}
    if cfg["mode"] not in egfs.MODES:
        raise UsageError(f"mode must be one of {', '.join(egfs.MODES)}")
    if cfg["split"] not in ("train", "test"):
        raise UsageError("split must be train or test")
    return cfg


def scene_config(cfg) -> SceneConfig:
    sc = _pick(SceneConfig, {k: v for k, v in cfg["scene"].items() if k != "seed"}, "scene", seed=int(cfg["seed"]))
    sc.validate()
    return sc


def train_config(cfg) -> reg.TrainConfig:
    tc = _pick(reg.TrainConfig, {k: v for k, v in cfg["train"].items() if k not in ("seed", "use_confidence")},
               "train", seed=int(cfg["seed"]), use_confidence=bool(cfg["confidence"]))
    try:
        tc.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return tc


def ransac_config(cfg) -> RansacConfig:
    try:
        return _pick(RansacConfig, {k: v for k, v in cfg["ransac"].items() if k != "seed"}, "ransac",
                     seed=int(cfg["seed"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def expander_from(cfg):
    spec = dict(cfg["expander"])
    try:
        return egfs.make_expander(spec.pop("name", "grow"), **spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def sampling_mode(cfg) -> str:
    return cfg["mode"] if cfg["masks"] else "random"


def write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode("utf-8"))


def write_resolved(out: Path, cfg: dict, name: str):
    write_text(out / f"{name}.resolved.yaml", yaml.safe_dump(cfg, sort_keys=True))


def _load_dataset(cfg):
    path = Path(cfg["dataset"])
    if not (path / "scene.json").is_file():
        raise UsageError(f"no dataset at {path} (run gen-data first)")
    return read_dataset(path)


def _load_checkpoint(cfg, args):
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(cfg["out"]) / CHECKPOINT
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return reg.load_checkpoint(path)  # a corrupt file is a runtime failure


def _split(cfg, train, test):
    return test if cfg["split"] == "test" else train


# ------------------------------------------------------------ subcommands


def cmd_gen_data(cfg, args):
    sc = scene_config(cfg)
    scene, train, test = generate_scene(sc)
    out = Path(cfg["dataset"])
    write_dataset(out, scene, train, test)
    write_resolved(out, cfg, "gen-data")
    counts = {lab: sum(int(np.sum(f.grid.labels == lab)) for f in train) for lab in RegionLabel}
    total = sum(counts.values())
    print(f"dataset {out}: {len(scene.surfaces)} surfaces, {len(train)} train / {len(test)} test frames")
    for lab, n in counts.items():
        print(f"  {lab.name:<15} {n:>7} patches ({n / total:.3f})")


def _loss_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "iteration", "mean_loss", "valid_fraction"])
    for rec in history:
        for e in rec.epochs:
            w.writerow([e["epoch"], e["iteration"], f"{e['mean_loss']:.9g}", f"{e['valid_fraction']:.9g}"])
    return buf.getvalue()


def _iterations_csv(frames, history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "sampling", "buffer_size", "dynamic_share", "textureless_share", "static_share"])
    for rec in history:
        shares = [""] * 3
        if rec.masks is not None:
            shares = [f"{egfs.label_share(frames, rec.masks, lab):.6f}"
                      for lab in (RegionLabel.Dynamic, RegionLabel.TextureLess, RegionLabel.StaticTextured)]
        w.writerow([rec.iteration, rec.sampling, rec.buffer_size, *shares])
    return buf.getvalue()


def _save_run(out: Path, params, history, train, cfg, tc, figures: bool):
    out.mkdir(parents=True, exist_ok=True)
    reg.save_checkpoint(out / CHECKPOINT, params, {"train": reg.config_dict(tc), "mode": sampling_mode(cfg)})
    write_text(out / "loss.csv", _loss_csv(history))
    write_text(out / "iterations.csv", _iterations_csv(train, history))
    for rec in history:
        egfs.dump_iteration(out, train, rec)
    if figures:
        plotting.loss_curve([e for rec in history for e in rec.epochs], out / "figures" / "loss.png")
        masked = [rec for rec in history if rec.masks is not None]
        if masked:
            shares = {lab.name: [egfs.label_share(train, rec.masks, lab) for rec in masked] for lab in RegionLabel}
            plotting.mask_dynamics(shares, out / "figures" / "mask_dynamics.png")


def cmd_train(cfg, args):
    scene, train, test = _load_dataset(cfg)
    tc = train_config(cfg)
    expander = expander_from(cfg)
    out = Path(cfg["out"])
    write_resolved(out, cfg, "train")
    compare = "tau" if args.tau_sweep else args.compare
    t0 = time.perf_counter()
    if compare:
        variants = {"ablation": ex.ABLATION, "quantile": ex.QUANTILE_BASELINES + (ex.ABLATION[3],),
                    "tau": ex.tau_variants()}[compare]
        results = ex.run_variants(scene, train, test, tc, variants, ransac_config(cfg), expander)
        for name, r in results.items():
            _save_run(out / name, r.params, r.history, train, cfg, tc, False)
        write_text(out / f"compare_{compare}.csv", ex.comparison_csv(results))
        if cfg["figures"] and test:
            plotting.error_cdf({n: [e.translation_cm for e in r.errors] for n, r in results.items()},
                               out / "figures" / f"compare_{compare}_cdf.png")
        print(ex.comparison_csv(results), end="")
    else:
        params, history = egfs.run_training(train, scene.scene_center, scene.scene_radius, tc, expander,
                                            sampling_mode(cfg), cfg["quantile"], tc.use_confidence)
        _save_run(out, params, history, train, cfg, tc, cfg["figures"])
        print(f"trained {len(history)} iterations ({sampling_mode(cfg)}); checkpoint {out / CHECKPOINT}")
    write_text(out / "timing.json", json.dumps({"train_seconds": time.perf_counter() - t0}) + "\n")


POSE_FIELDS = ["frame_id", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "n_inliers", "n_corr", "converged",
               "confidence_filter"]


def cmd_localize(cfg, args):
    params, _ = _load_checkpoint(cfg, args)
    scene, train, test = _load_dataset(cfg)
    frames = _split(cfg, train, test)
    use_filter = bool(cfg["confidence_filter"] and params.use_confidence)
    results = ev.localize_frames(params, frames, ransac_config(cfg), use_filter)
    out = Path(cfg["out"])
    write_resolved(out, cfg, "localize")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_FIELDS)
    for r in results:
        p = r.estimate.pose
        vals = list(p.quaternion()) + list(p.translation)
        w.writerow([r.frame_id, *(f"{v:.17g}" for v in vals), len(r.estimate.inliers), r.n_corr,
                    int(r.estimate.converged), int(use_filter)])
    write_text(out / "poses.csv", buf.getvalue())
    write_text(out / "localize_timing.csv",
               "frame_id,seconds\n" + "".join(f"{r.frame_id},{r.seconds:.6f}\n" for r in results))
    bad = [r.frame_id for r in results if not r.estimate.converged]
    print(f"localized {len(results)} frames (confidence filter {'on' if use_filter else 'off'}); "
          f"{len(bad)} unconverged")


def read_poses_csv(path):
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                pose = Pose.from_quaternion([float(row[k]) for k in ("qw", "qx", "qy", "qz")],
                                            [float(row[k]) for k in ("tx", "ty", "tz")])
                rows.append((int(row["frame_id"]), pose, int(row["n_inliers"]), int(row["n_corr"])))
    except OSError as exc:
        raise UsageError(f"cannot read poses {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise UsageError(f"malformed poses file {path}: {exc}") from exc
    return rows


def cmd_eval(cfg, args):
    out = Path(cfg["out"])
    poses = Path(args.poses) if args.poses else out / "poses.csv"
    rows = read_poses_csv(poses)
    scene, train, test = _load_dataset(cfg)
    gt = {f.frame_id: f.pose_gt for f in train + test}
    missing = [fid for fid, *_ in rows if fid not in gt]
    if missing:
        raise UsageError(f"frames not in dataset: {missing[:5]}")
    if not rows:
        raise UsageError("no poses to evaluate")
    errors = [ev.pose_error(p, gt[fid]) for fid, p, _, _ in rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "trans_cm", "rot_deg", "n_inliers", "n_corr"])
    for (fid, _, n_in, n_corr), e in zip(rows, errors):
        w.writerow([fid, f"{e.translation_cm:.6f}", f"{e.rotation_deg:.6f}", n_in, n_corr])
    summary = ev.aggregate(errors)
    write_text(out / "metrics.csv", buf.getvalue())
    write_text(out / "summary.json", ev.summary_json(summary))
    write_resolved(out, cfg, "eval")
    if cfg["figures"]:
        plotting.error_cdf({"translation": [e.translation_cm for e in errors]}, out / "figures" / "error_cdf.png")
    print(f"median {summary['median_cm']:.2f} cm / {summary['median_deg']:.3f} deg, "
          f"{summary['pct_within_5cm_5deg']:.1f}% within 5 cm / 5 deg over {summary['n_frames']} frames")


def cmd_analyze(cfg, args):
    params, _ = _load_checkpoint(cfg, args)
    scene, train, test = _load_dataset(cfg)
    frames = _split(cfg, train, test)
    use_filter = bool(cfg["confidence_filter"] and params.use_confidence)
    results = ev.localize_frames(params, frames, ransac_config(cfg), use_filter)
    stats = ev.region_analysis(params, frames, results)
    out = Path(cfg["out"])
    text = ev.region_csv(stats)
    write_text(out / "regions.csv", text)
    write_resolved(out, cfg, "analyze")
    if cfg["figures"]:
        plotting.region_bars(stats, out / "figures" / "regions.png")
    print(text, end="")


def _final_masks(out: Path, frames):
    iters = sorted((p for p in (out / "masks").glob("iter*") if p.is_dir()), key=lambda p: int(p.name[4:]))
    if not iters:
        return None
    masks = []
    for f in frames:
        p = iters[-1] / f"{f.frame_id}.pbm"
        if not p.is_file():
            return None
        masks.append(egfs.read_pbm(p))
    return masks


def cmd_export_cloud(cfg, args):
    params, _ = _load_checkpoint(cfg, args)
    scene, train, test = _load_dataset(cfg)
    split = args.split or "train"
    frames = train if split == "train" else test
    out = Path(cfg["out"])
    masks = None
    if args.filter:
        masks = _final_masks(out, frames)
        if masks is None:
            log.warning("no final masks found under %s; filtering by confidence only", out / "masks")
    name = args.ply or ("cloud_filtered.ply" if args.filter else "cloud.ply")
    n = ev.export_point_cloud(out / name, params, frames, args.filter, masks)
    write_resolved(out, cfg, "export-cloud")
    print(f"wrote {n} points to {out / name}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "export-cloud": cmd_export_cloud,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=egfs.MODES)
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--no-figures", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="egfs-loc", description="Error-guided scene coordinate regression at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train a regressor")
    t.add_argument("--quantile", type=float)
    t.add_argument("--no-masks", action="store_true", help="random sampling in every iteration")
    t.add_argument("--no-confidence", action="store_true", help="plain clamped loss, no confidence head")
    t.add_argument("--expander", choices=("grow", "oracle", "file"))
    t.add_argument("--mask-dir", help="precomputed PBM masks (implies --expander file)")
    t.add_argument("--compare", choices=("ablation", "quantile", "tau"), help="train and localize a set of variants")
    t.add_argument("--tau-sweep", action="store_true", help="same as --compare tau")

    for name, help_ in (("localize", "estimate poses"), ("analyze", "per-region error and inlier analysis")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint")
        s.add_argument("--split", choices=("train", "test"))
        s.add_argument("--no-confidence-filter", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="pose metrics against ground truth")
    e.add_argument("--poses", help="poses CSV (default: <out>/poses.csv)")

    c = sub.add_parser("export-cloud", parents=[common], help="write predicted scene coordinates as PLY")
    c.add_argument("--checkpoint")
    c.add_argument("--split", choices=("train", "test"))
    c.add_argument("--filter", action="store_true", help="keep confident cells inside the final masks")
    c.add_argument("--ply", help="file name inside --out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args)
        COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"egfs-loc: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, reg.CheckpointError, egfs.ExpanderError, OSError, RuntimeError, ValueError) as exc:
        print(f"egfs-loc: failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
