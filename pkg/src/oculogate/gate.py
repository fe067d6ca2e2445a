"""Hierarchical gating: a physical blur firewall, then an MC-dropout +
test-time-augmentation ensemble whose predictive variance drives the
accept/reject decision, and a triage ordering for the rejected queue.

Every ensemble pass draws its dropout masks from the substream
(seed, sample_id, pass_index), so results are identical no matter how the
passes are batched or scheduled. Pass i applies tta_set[i mod len(tta_set)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import DualStreamModel, FusionConfig, visual_features_batch
from .numerics import sigmoid
from .rng import Rng

TTA_DEFAULT = (
    "identity", "hflip", "vflip",
    "brightness+0.2", "brightness-0.2",
    "contrast+0.2", "contrast-0.2",
)


@dataclass
class GateConfig:
    tau_blur: float = 100.0
    tau_unc: float | None = None    # calibrated on validation, never a constant
    n_passes: int = 15
    dropout_p: float = 0.3
    tta_set: tuple[str, ...] = TTA_DEFAULT

    def validate(self) -> None:
        if self.n_passes < 2:
            raise ConfigError("n_passes must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.tau_blur <= 0:
            raise ConfigError("tau_blur must be positive")
        for name in self.tta_set:
            if name not in TTA_TRANSFORMS:
                raise ConfigError(f"unknown TTA transform '{name}'")


@dataclass
class UncertaintyEstimate:
    mu: float
    u: float
    passes: np.ndarray
    md_passes: np.ndarray = field(default_factory=lambda: np.empty(0))


@dataclass
class GateDecision:
    kind: str                       # accept | reject_blur | reject_uncertain
    mu: float | None = None
    u: float | None = None
    lap_var: float | None = None

    @property
    def y_hat(self) -> float | None:
        return self.mu if self.kind == "accept" else None


# ---------------------------------------------------------------------------
# physical firewall
# ---------------------------------------------------------------------------

def laplacian_variance(raster: np.ndarray) -> float:
    """Population variance of the 4-neighbour Laplacian over the valid
    interior (no padding), with the raster scaled to 0-255 first."""
    r = np.asarray(raster, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 3 or r.shape[1] < 3:
        raise ConfigError("laplacian_variance needs a raster of at least 3x3")
    a = r * 255.0
    resp = (-4.0 * a[1:-1, 1:-1] + a[:-2, 1:-1] + a[2:, 1:-1]
            + a[1:-1, :-2] + a[1:-1, 2:])
    return float(resp.var())


def quality_gate(raster: np.ndarray, cfg: GateConfig) -> GateDecision | None:
    """None when the raster is sharp enough; a reject_blur decision otherwise.
    Runs before any model inference."""
    lv = laplacian_variance(raster)
    if lv < cfg.tau_blur:
        return GateDecision(kind="reject_blur", lap_var=lv)
    return None


# ---------------------------------------------------------------------------
# test-time augmentation
# ---------------------------------------------------------------------------

def _brightness(r, delta):
    return np.clip(r + delta, 0.0, 1.0)


def _contrast(r, delta):
    return np.clip((r - 0.5) * (1.0 + delta) + 0.5, 0.0, 1.0)


TTA_TRANSFORMS = {
    "identity": lambda r: r,
    "hflip": lambda r: r[..., :, ::-1],
    "vflip": lambda r: r[..., ::-1, :],
    "brightness+0.2": lambda r: _brightness(r, 0.2),
    "brightness-0.2": lambda r: _brightness(r, -0.2),
    "contrast+0.2": lambda r: _contrast(r, 0.2),
    "contrast-0.2": lambda r: _contrast(r, -0.2),
}


def apply_tta(name: str, raster: np.ndarray) -> np.ndarray:
    return TTA_TRANSFORMS[name](raster)


# ---------------------------------------------------------------------------
# stochastic ensemble
# ---------------------------------------------------------------------------

def _pass_masks(model: DualStreamModel, sample_ids, pass_index: int,
                seed: int, p: float) -> dict | None:
    """Per-sample masks for one ensemble pass, one substream per sample."""
    if p <= 0.0:
        return None
    total = sum(w for _, w in model.mask_segments())
    u = np.empty((len(sample_ids), total))
    for row, sid in enumerate(sample_ids):
        u[row] = Rng(seed, f"mc/{sid}/{pass_index}").uniform(total)
    return model.masks_from_uniform(u, p)


def ensemble_passes(model: DualStreamModel, fusion: FusionConfig,
                    x_clin: np.ndarray, rasters: np.ndarray, sample_ids,
                    cfg: GateConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(p_passes, md_passes), each (n_samples, n_passes)."""
    cfg.validate()
    n = x_clin.shape[0]
    p_passes = np.empty((n, cfg.n_passes))
    md_passes = np.empty((n, cfg.n_passes))
    for i in range(cfg.n_passes):
        aug = cfg.tta_set[i % len(cfg.tta_set)]
        v = visual_features_batch(model.visual, apply_tta(aug, rasters), model.proj)
        masks = _pass_masks(model, sample_ids, i, seed, cfg.dropout_p)
        out, _ = model.forward(x_clin, v, masks)
        p_passes[:, i] = (fusion.alpha_vis * sigmoid(out["logit_vis"])
                          + fusion.alpha_clin * sigmoid(out["logit_clin"]))
        md_passes[:, i] = out["md_hat"]
    return p_passes, md_passes


def summarize_passes(p_passes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Streaming (Welford) mean and population variance along the pass axis."""
    n_samples, n_passes = p_passes.shape
    mean = np.zeros(n_samples)
    m2 = np.zeros(n_samples)
    for i in range(n_passes):
        delta = p_passes[:, i] - mean
        mean += delta / (i + 1)
        m2 += delta * (p_passes[:, i] - mean)
    return mean, m2 / n_passes


def stochastic_ensemble(sample, model: DualStreamModel, cfg: GateConfig,
                        seed: int, fusion: FusionConfig | None = None,
                        stats=None) -> UncertaintyEstimate:
    """Uncertainty estimate for one sample that already passed the firewall."""
    from .data import apply_preprocess

    fusion = fusion or FusionConfig()
    x = apply_preprocess(stats, sample)[None, :]
    p_passes, md_passes = ensemble_passes(
        model, fusion, x, sample.image[None, :, :], [sample.sample_id], cfg, seed)
    mu, u = summarize_passes(p_passes)
    return UncertaintyEstimate(mu=float(mu[0]), u=float(u[0]),
                               passes=p_passes[0], md_passes=md_passes[0])


def gate_decide(est: UncertaintyEstimate, cfg: GateConfig) -> GateDecision:
    """Accept iff U < tau_unc; the boundary U == tau_unc rejects."""
    if cfg.tau_unc is None:
        raise ConfigError("tau_unc is unset; calibrate it on validation first")
    if est.u < cfg.tau_unc:
        return GateDecision(kind="accept", mu=est.mu, u=est.u)
    return GateDecision(kind="reject_uncertain", mu=est.mu, u=est.u)


# ---------------------------------------------------------------------------
# table-level gating
# ---------------------------------------------------------------------------

@dataclass
class GateRun:
    sample_ids: list[str]
    groups: list[str]
    lap_var: np.ndarray
    mu: np.ndarray            # NaN for blur rejects
    u: np.ndarray             # NaN for blur rejects
    mts_prob: np.ndarray      # NaN for blur rejects
    decisions: list[GateDecision]

    def audit_records(self) -> list[dict]:
        recs = []
        for i, sid in enumerate(self.sample_ids):
            recs.append({
                "sample_id": sid,
                "lap_var": float(self.lap_var[i]),
                "mu": None if math.isnan(self.mu[i]) else float(self.mu[i]),
                "u": None if math.isnan(self.u[i]) else float(self.u[i]),
                "decision": self.decisions[i].kind,
                "group": self.groups[i],
            })
        return recs


def ensemble_over_table(model: DualStreamModel, table, stats, cfg: GateConfig,
                        seed: int, fusion: FusionConfig | None = None,
                        batch_size: int = 256) -> GateRun:
    """Firewall plus ensemble statistics for every sample of a table,
    without the accept/reject call (tau_unc may still be unset). Blur
    rejects never reach the model; their mu/u/mts stay NaN."""
    from .data import apply_preprocess_table

    fusion = fusion or FusionConfig()
    cfg.validate()
    n = len(table)
    sample_ids = table.sample_ids()
    lap = np.empty(n)
    rasters = [table.raster(i) for i in range(n)]
    for i in range(n):
        lap[i] = laplacian_variance(rasters[i])
    sharp = np.flatnonzero(lap >= cfg.tau_blur)

    mu = np.full(n, np.nan)
    u = np.full(n, np.nan)
    mts = np.full(n, np.nan)
    x_all = apply_preprocess_table(stats, table)
    for start in range(0, sharp.size, batch_size):
        idx = sharp[start : start + batch_size]
        x = x_all[idx]
        r = np.stack([rasters[i] for i in idx])
        sids = [sample_ids[i] for i in idx]
        p_passes, md_passes = ensemble_passes(model, fusion, x, r, sids, cfg, seed)
        b_mu, b_u = summarize_passes(p_passes)
        mu[idx] = b_mu
        u[idx] = b_u
        mts[idx] = (md_passes <= -6.0).mean(axis=1)

    blur_only = [
        GateDecision(kind="reject_blur", lap_var=float(lap[i]))
        if lap[i] < cfg.tau_blur else GateDecision(kind="accept")
        for i in range(n)
    ]
    return GateRun(sample_ids=sample_ids, groups=list(table.race), lap_var=lap,
                   mu=mu, u=u, mts_prob=mts, decisions=blur_only)


def run_gate(model: DualStreamModel, table, stats, cfg: GateConfig, seed: int,
             fusion: FusionConfig | None = None,
             batch_size: int = 256) -> GateRun:
    """Gate every sample of a table: firewall first (no model pass for blur
    rejects), then the ensemble and the uncertainty decision."""
    run = ensemble_over_table(model, table, stats, cfg, seed, fusion, batch_size)
    decisions: list[GateDecision] = []
    for i in range(len(run.sample_ids)):
        if run.lap_var[i] < cfg.tau_blur:
            decisions.append(GateDecision(kind="reject_blur",
                                          lap_var=float(run.lap_var[i])))
        else:
            est = UncertaintyEstimate(mu=float(run.mu[i]), u=float(run.u[i]),
                                      passes=np.empty(0))
            decisions.append(gate_decide(est, cfg))
    run.decisions = decisions
    return run


# ---------------------------------------------------------------------------
# triage
# ---------------------------------------------------------------------------

def triage_queue(rejects, priority_groups) -> list:
    """Stable total order for manual review: priority group first, then
    higher uncertainty; blur rejects (no U) sort after uncertainty rejects
    within a group; patient id breaks remaining ties."""
    rank = {g: i for i, g in enumerate(priority_groups)}

    def key(item):
        sample, decision = item
        u_eff = decision.u if decision.kind == "reject_uncertain" else -math.inf
        return (rank.get(sample.group, len(priority_groups)), -u_eff,
                sample.patient_id)

    return sorted(rejects, key=key)
