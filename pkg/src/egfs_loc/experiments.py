"""Training variants compared side by side: component ablation, quantile samplers, prompt-share sweep.

Variants that use the same loss share the first (random-sampling) iteration,
which is trained once and forked.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

from . import egfs
from . import evaluation as ev
from . import regressor as reg
from .pose_solver import RansacConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    mode: str = "egfs"
    use_confidence: bool = True
    quantile: float | None = None
    tau_pct: float | None = None

    @property
    def filter_at_inference(self) -> bool:
        return self.use_confidence


ABLATION = (
    Variant("random", "random", False),
    Variant("masks_only", "egfs", False),
    Variant("confidence_only", "random", True),
    Variant("full", "egfs", True),
)
QUANTILES = (0.3, 0.4, 0.5, 0.6, 0.7)
QUANTILE_BASELINES = tuple(Variant(f"q{q:g}", "quantile", True, quantile=q) for q in QUANTILES)
TAU_SWEEP = (5.0, 10.0, 15.0, 20.0)


def tau_variants(taus=TAU_SWEEP):
    return tuple(Variant(f"tau{t:g}", "egfs", True, tau_pct=t) for t in taus)


@dataclass
class VariantResult:
    variant: Variant
    params: reg.RegressorParams
    history: list
    localizations: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def train_variants(frames, scene_center, scene_radius, cfg: reg.TrainConfig, variants, expander=None):
    """Train every variant; returns ``{name: (params, history)}`` in input order."""
    out = {}
    bases = {}
    for v in variants:
        vcfg = replace(cfg, use_confidence=v.use_confidence,
                       tau_prompt_pct=cfg.tau_prompt_pct if v.tau_pct is None else v.tau_pct)
        if v.use_confidence not in bases:
            base = egfs.Trainer(frames, scene_center, scene_radius, replace(cfg, use_confidence=v.use_confidence),
                                expander, mode="random")
            if not base.done:
                base.run_iteration()
            bases[v.use_confidence] = base
        t = bases[v.use_confidence].fork(mode=v.mode, quantile=v.quantile, cfg=vcfg, refine=v.use_confidence)
        log.info("training variant %s", v.name)
        out[v.name] = t.run()
    return out


def run_variants(scene, train, test, cfg: reg.TrainConfig, variants, ransac: RansacConfig | None = None,
                 expander=None) -> dict[str, VariantResult]:
    ransac = ransac or RansacConfig(seed=cfg.seed)
    trained = train_variants(train, scene.scene_center, scene.scene_radius, cfg, variants, expander)
    results = {}
    for v in variants:
        params, history = trained[v.name]
        res = VariantResult(v, params, history)
        if test:
            res.localizations = ev.localize_frames(params, test, ransac, v.filter_at_inference)
            res.errors = ev.localization_errors(res.localizations, test)
            res.summary = ev.aggregate(res.errors)
        results[v.name] = res
    return results


def comparison_csv(results: dict[str, VariantResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mode", "use_confidence", "quantile", "tau_pct", "median_cm", "median_deg",
                "pct_within_5cm_5deg"])
    for name, r in results.items():
        v, s = r.variant, r.summary
        w.writerow([
            name, v.mode, int(v.use_confidence), "" if v.quantile is None else f"{v.quantile:g}",
            "" if v.tau_pct is None else f"{v.tau_pct:g}",
            f"{s.get('median_cm', float('nan')):.6f}", f"{s.get('median_deg', float('nan')):.6f}",
            f"{s.get('pct_within_5cm_5deg', float('nan')):.6f}",
        ])
    return buf.getvalue()
