"""End-to-end orchestration shared by the CLI, the demos, and the tests:
feature assembly, training, gate calibration, and the report builders."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import (CohortTable, PreprocessStats, apply_preprocess_table,
                   fit_preprocess, generate_trajectory)
from .errors import DataError
from .fairness import calibrate_groups, fairness_report, group_metrics
from .gate import GateConfig, GateRun, ensemble_over_table, run_gate
from .metrics import (coverage_accuracy_curve, dynamic_warning,
                      mean_absolute_error, metrics_at_threshold, roc_auc)
from .model import (DCCEConfig, DualStreamModel, FusionConfig, VisualFeatConfig,
                    predict_arrays, visual_features_batch)
from .rng import Rng
from .train import (SplitResult, TauSearchResult, TrainConfig, TrainHistory,
                    grid_search_alpha, grid_search_tau_unc, split_dataset,
                    train_multitask)


@dataclass
class AblationFlags:
    no_clinical: bool = False
    no_tta: bool = False
    no_mc_dropout: bool = False

    def apply(self, fusion: FusionConfig, gate_cfg: GateConfig
              ) -> tuple[FusionConfig, GateConfig]:
        if self.no_clinical:
            fusion = FusionConfig(alpha_vis=1.0, alpha_clin=0.0)
        tta = ("identity",) if self.no_tta else gate_cfg.tta_set
        p = 0.0 if self.no_mc_dropout else gate_cfg.dropout_p
        gate_cfg = GateConfig(tau_blur=gate_cfg.tau_blur, tau_unc=gate_cfg.tau_unc,
                              n_passes=gate_cfg.n_passes, dropout_p=p, tta_set=tta)
        return fusion, gate_cfg


def feature_matrices(table: CohortTable, stats: PreprocessStats,
                     model: DualStreamModel,
                     batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Clinical matrix and visual feature matrix for a table; rasters are
    generated and consumed in batches to bound memory."""
    x = apply_preprocess_table(stats, table)
    n = len(table)
    v = np.empty((n, model.visual.proj_dim))
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        rasters = np.stack([table.raster(i) for i in idx])
        v[start : start + len(rasters)] = visual_features_batch(
            model.visual, rasters, model.proj)
    return x, v


@dataclass
class TrainedPipeline:
    model: DualStreamModel
    stats: PreprocessStats
    fusion: FusionConfig
    split: SplitResult
    history: TrainHistory
    train_cfg: TrainConfig
    train_seconds: float


def run_training_pipeline(
    cohort: CohortTable,
    train_cfg: TrainConfig | None = None,
    dcce_cfg: DCCEConfig | None = None,
    visual_cfg: VisualFeatConfig | None = None,
    fusion: FusionConfig | None = None,
    search_alpha: bool = False,
) -> TrainedPipeline:
    """Split, fit preprocessing on train only, train, and (optionally) grid
    search the fusion weights on validation. A provided dcce_cfg acts as a
    template: its input_dim is always replaced by the fitted feature count.
    """
    from dataclasses import replace

    train_cfg = train_cfg or TrainConfig()
    split = split_dataset(cohort, train_cfg)
    stats = fit_preprocess(split.train)
    visual_cfg = visual_cfg or VisualFeatConfig()
    if dcce_cfg is None:
        dcce_cfg = DCCEConfig(input_dim=len(stats.feature_names))
    else:
        dcce_cfg = replace(dcce_cfg, input_dim=len(stats.feature_names))
    model = DualStreamModel(dcce_cfg, visual_cfg,
                            init_rng=Rng(train_cfg.seed, "model-init"))
    fusion = fusion or FusionConfig()

    t0 = time.perf_counter()
    x_tr, v_tr = feature_matrices(split.train, stats, model)
    x_va, v_va = feature_matrices(split.val, stats, model)
    history = train_multitask(model, train_cfg, x_tr, v_tr, split.train,
                              x_va, v_va, split.val, fusion)
    if search_alpha:
        arrs = predict_arrays(model, FusionConfig(0.5, 0.5), x_va, v_va)
        fusion = grid_search_alpha(arrs["p_vis"], arrs["p_clin"], split.val.label)
    elapsed = time.perf_counter() - t0
    return TrainedPipeline(model=model, stats=stats, fusion=fusion, split=split,
                           history=history, train_cfg=train_cfg,
                           train_seconds=elapsed)


def deterministic_scores(tp: TrainedPipeline, table: CohortTable,
                         fusion: FusionConfig | None = None) -> dict[str, np.ndarray]:
    """Single-pass predictions (dropout off, identity augmentation)."""
    x, v = feature_matrices(table, tp.stats, tp.model)
    return predict_arrays(tp.model, fusion or tp.fusion, x, v)


def calibrate_gate(tp: TrainedPipeline, gate_cfg: GateConfig, gamma: float,
                   seed: int, fusion: FusionConfig | None = None
                   ) -> tuple[GateConfig, TauSearchResult, GateRun]:
    """Set tau_unc from the validation ensemble."""
    fusion = fusion or tp.fusion
    val_run = ensemble_over_table(tp.model, tp.split.val, tp.stats, gate_cfg,
                                  seed, fusion)
    sharp = ~np.isnan(val_run.u)
    result = grid_search_tau_unc(val_run.u[sharp],
                                 val_run.mu[sharp],
                                 tp.split.val.label[sharp], gamma)
    calibrated = GateConfig(tau_blur=gate_cfg.tau_blur, tau_unc=result.tau_unc,
                            n_passes=gate_cfg.n_passes,
                            dropout_p=gate_cfg.dropout_p, tta_set=gate_cfg.tta_set)
    return calibrated, result, val_run


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def screening_report(tp: TrainedPipeline, table: CohortTable,
                     threshold: float = 0.5) -> dict:
    arrs = deterministic_scores(tp, table)
    labels = table.label
    rates = metrics_at_threshold(arrs["p_final"], labels, threshold)
    per_group = {
        gm.group: {"n": gm.n, "n_pos": gm.n_pos, "fnr": gm.fnr,
                   "fpr": gm.fpr, "auc": gm.auc}
        for gm in group_metrics(arrs["p_final"], labels, np.asarray(table.race),
                                threshold)
    }
    return {
        "auc": roc_auc(arrs["p_final"], labels),
        "accuracy": rates["accuracy"],
        "sensitivity": rates["sensitivity"],
        "specificity": rates["specificity"],
        "f1": rates["f1"],
        "md_mae": mean_absolute_error(arrs["md_hat"], table.md),
        "per_group": per_group,
        "n": len(table),
        "threshold": threshold,
    }


def coverage_report(gate_run: GateRun, labels, threshold: float = 0.5,
                    coverages=None) -> dict:
    """Coverage-accuracy points over the gated (sharp) subset."""
    sharp = ~np.isnan(gate_run.u)
    points = coverage_accuracy_curve(
        gate_run.u[sharp],
        gate_run.mu[sharp],
        np.asarray(labels)[sharp],
        sample_ids=[s for s, ok in zip(gate_run.sample_ids, sharp) if ok],
        coverages=coverages,
    )
    return {"points": [[c, a] for c, a in points],
            "n_gated": int(sharp.sum()), "threshold": threshold}


def fairness_calibration_report(tp: TrainedPipeline, table: CohortTable,
                                acc_tolerance: float) -> dict:
    arrs = deterministic_scores(tp, table)
    result = calibrate_groups(arrs["p_final"], table.label,
                              np.asarray(table.race), acc_tolerance)
    return fairness_report(arrs["p_final"], table.label,
                           np.asarray(table.race), result)


def ablation_report(tp: TrainedPipeline, gate_cfg: GateConfig, gamma: float,
                    seed: int, flags: AblationFlags,
                    top_fraction: float = 0.3) -> dict:
    """Table-shaped ablation row: AUC / sensitivity / specificity / FNR gap
    on the top confidence subset (lowest-U fraction of gated test samples)."""
    fusion, cfg = flags.apply(tp.fusion, gate_cfg)
    cfg, tau_result, _ = calibrate_gate(tp, cfg, gamma, seed, fusion)
    test_run = run_gate(tp.model, tp.split.test, tp.stats, cfg, seed, fusion)
    labels = tp.split.test.label
    groups = np.asarray(tp.split.test.race)

    sharp = ~np.isnan(test_run.u)
    u = test_run.u[sharp]
    mu = test_run.mu[sharp]
    y = labels[sharp]
    g = groups[sharp]
    sids = [s for s, ok in zip(test_run.sample_ids, sharp) if ok]
    order = np.lexsort((sids, u))
    k = max(int(np.ceil(top_fraction * u.size)), 1)
    keep = order[:k]

    try:
        auc = roc_auc(mu[keep], y[keep])
    except DataError:
        auc = None
    try:
        rates = metrics_at_threshold(mu[keep], y[keep], 0.5)
    except DataError:
        rates = {"sensitivity": None, "specificity": None,
                 "accuracy": None, "f1": None}
    from .fairness import fnr_gap, group_fnr

    fnrs = group_fnr(mu[keep], y[keep], g[keep], 0.5)
    defined = [v for v in fnrs.values() if v is not None]
    gap = fnr_gap(fnrs) if len(defined) >= 2 else None
    accepted = sum(d.kind == "accept" for d in test_run.decisions)
    return {
        "flags": {"no_clinical": flags.no_clinical, "no_tta": flags.no_tta,
                  "no_mc_dropout": flags.no_mc_dropout},
        "top_fraction": top_fraction,
        "n_subset": int(k),
        "auc": auc,
        "sensitivity": rates["sensitivity"],
        "specificity": rates["specificity"],
        "fnr_gap": gap,
        "tau_unc": cfg.tau_unc,
        "accept_rate": accepted / len(test_run.decisions),
        "max_u": float(np.nanmax(test_run.u)) if sharp.any() else None,
    }


def warning_report(tp: TrainedPipeline, seeds, n_visits: int = 8) -> dict:
    """Run the three simulated follow-up scenarios for each seed and apply
    the dynamic warning rule to the deterministic risk trajectory."""
    kinds = ("stable", "slow", "rapid")
    per_kind = {k: [] for k in kinds}
    for seed in seeds:
        for kind in kinds:
            traj = generate_trajectory(kind, n_visits, seed)
            arrs = deterministic_scores(tp, traj.table)
            w = dynamic_warning(traj.table.visit_time, arrs["p_final"],
                                traj.onset_time)
            per_kind[kind].append({
                "seed": int(seed),
                "fired": w.fired,
                "first_warning_index": w.first_warning_index,
                "first_warning_time": w.first_warning_time,
                "lead_time_months": w.lead_time_months,
                "delta_risk": w.delta_risk,
                "peak_risk": w.peak_risk,
                "mean_risk": float(np.mean(arrs["p_final"])),
            })
    summary = {}
    for kind in kinds:
        rows = per_kind[kind]
        summary[kind] = {
            "fire_rate": sum(r["fired"] for r in rows) / len(rows),
            "mean_delta_risk": float(np.mean([r["delta_risk"] for r in rows])),
            "mean_peak_risk": float(np.mean([r["peak_risk"] for r in rows])),
        }
    return {"per_kind": per_kind, "summary": summary, "n_visits": n_visits}
