"""Multi-task optimization and the two validation-set grid searches.

The total loss is mean screening cross-entropy (averaged over the two
stream logits) plus lambda times the mean progression term over
slope-labeled samples; the progression term averages the Smooth-L1 of the
current-MD and slope outputs. The two terms are backpropagated separately
so their gradient norms on the shared clinical trunk can be logged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import CohortTable
from .errors import ConfigError, NumericError
from .metrics import mean_absolute_error, roc_auc
from .model import DualStreamModel, FusionConfig
from .numerics import adamw_step, binary_cross_entropy, sigmoid, smooth_l1, smooth_l1_grad
from .rng import Rng


@dataclass
class TrainConfig:
    lambda_weight: float = 5.0
    lr: float = 1e-4
    wd: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 10
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 7
    include_md_in_regression: bool = True

    def validate(self) -> None:
        if self.lambda_weight < 0:
            raise ConfigError("lambda_weight must be >= 0")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f <= 0 for f in self.split):
            raise ConfigError("split fractions must be positive and sum to 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs, patience must be >= 1")


@dataclass
class SplitResult:
    train: CohortTable
    val: CohortTable
    test: CohortTable
    assignment: dict[str, str]    # patient_id -> split name


def _apportion(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment with every split non-empty."""
    k = len(fractions)
    counts = [1] * k
    remaining = n - k
    raw = [remaining * f for f in fractions]
    floors = [int(x) for x in raw]
    counts = [c + f for c, f in zip(counts, floors)]
    left = remaining - sum(floors)
    order = sorted(range(k), key=lambda j: (-(raw[j] - floors[j]), j))
    for j in order[:left]:
        counts[j] += 1
    return counts


def split_dataset(cohort: CohortTable, cfg: TrainConfig) -> SplitResult:
    """Patient-level split stratified on (ever-positive label, group).

    No patient spans splits. A stratum with fewer than 3 patients cannot
    appear in every split and raises a config error naming it.
    """
    cfg.validate()
    if len(cohort) == 0:
        raise ConfigError("split_dataset: empty cohort")
    per_patient: dict[str, dict] = {}
    for i, pid in enumerate(cohort.patient_id):
        entry = per_patient.setdefault(pid, {"label": 0, "group": cohort.race[i]})
        entry["label"] = max(entry["label"], int(cohort.label[i]))
    strata: dict[tuple[str, int], list[str]] = {}
    for pid in sorted(per_patient):
        e = per_patient[pid]
        strata.setdefault((e["group"], e["label"]), []).append(pid)

    names = ("train", "val", "test")
    assignment: dict[str, str] = {}
    for (group, label), pids in sorted(strata.items()):
        if len(pids) < len(names):
            raise ConfigError(
                f"stratum (group={group}, label={label}) has {len(pids)} patients; "
                f"too small to appear in all splits")
        rng = Rng(cfg.seed, f"split/{group}/{label}")
        order = rng.permutation(len(pids))
        counts = _apportion(len(pids), cfg.split)
        cursor = 0
        for name, count in zip(names, counts):
            for j in order[cursor : cursor + count]:
                assignment[pids[j]] = name
            cursor += count

    idx = {name: [] for name in names}
    for i, pid in enumerate(cohort.patient_id):
        idx[assignment[pid]].append(i)
    return SplitResult(
        train=cohort.subset(idx["train"]),
        val=cohort.subset(idx["val"]),
        test=cohort.subset(idx["test"]),
        assignment=assignment,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _dcce_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name, g in grads.items():
        if name.startswith("dcce."):
            total += float((g * g).sum())
    return total


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = -np.inf

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records) + "\n"


def train_multitask(
    model: DualStreamModel,
    cfg: TrainConfig,
    x_train: np.ndarray, v_train: np.ndarray, train_table: CohortTable,
    x_val: np.ndarray, v_val: np.ndarray, val_table: CohortTable,
    fusion: FusionConfig | None = None,
) -> TrainHistory:
    """AdamW on the multi-task loss with early stopping on validation AUC.

    Feature matrices are precomputed by the caller (preprocessing must be
    fitted on the training split only). Returns the history; the model is
    left holding the best-validation-AUC parameters.
    """
    cfg.validate()
    fusion = fusion or FusionConfig()
    rng = Rng(cfg.seed, "train")
    n = len(train_table)
    y = train_table.label.astype(np.float64)
    md_t = train_table.md
    m_t = train_table.slope_target
    has_slope = ~np.isnan(m_t)

    y_val = val_table.label
    md_val = val_table.md
    total_mask_width = sum(w for _, w in model.mask_segments())

    history = TrainHistory()
    best_values = model.params.clone_values()
    since_best = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        norm_scr = 0.0
        norm_prog = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            b = idx.size
            masks = None
            if model.dcce.dropout_p > 0:
                masks = model.masks_from_uniform(
                    rng.uniform((b, total_mask_width)), model.dcce.dropout_p)
            out, cache = model.forward(x_train[idx], v_train[idx], masks)

            yb = y[idx]
            l_scr = 0.5 * (binary_cross_entropy(out["logit_vis"], yb)
                           + binary_cross_entropy(out["logit_clin"], yb)).mean()
            d_lv = 0.5 * (sigmoid(out["logit_vis"]) - yb) / b
            d_lc = 0.5 * (sigmoid(out["logit_clin"]) - yb) / b

            labeled = has_slope[idx]
            m_count = int(labeled.sum())
            l_prog = 0.0
            d_md = d_sl = None
            if m_count > 0 and cfg.lambda_weight > 0:
                w_md = 0.5 if cfg.include_md_in_regression else 0.0
                w_sl = 0.5 if cfg.include_md_in_regression else 1.0
                sl_md = smooth_l1(out["md_hat"][labeled], md_t[idx][labeled])
                sl_sl = smooth_l1(out["slope_hat"][labeled], m_t[idx][labeled])
                l_prog = float((w_md * sl_md + w_sl * sl_sl).mean())
                d_md = np.zeros(b)
                d_sl = np.zeros(b)
                d_md[labeled] = w_md * smooth_l1_grad(
                    out["md_hat"][labeled], md_t[idx][labeled]) / m_count
                d_sl[labeled] = w_sl * smooth_l1_grad(
                    out["slope_hat"][labeled], m_t[idx][labeled]) / m_count

            if n_batches % 8 == 0:
                # per-term trunk norms on every 8th batch (epoch diagnostic)
                g_scr = model.backward(cache, d_logit_vis=d_lv, d_logit_clin=d_lc)
                norm_scr += _dcce_norm(g_scr)
                if d_md is not None:
                    g_prog = model.backward(cache, d_md=d_md, d_slope=d_sl)
                    norm_prog += cfg.lambda_weight ** 2 * _dcce_norm(g_prog)

            lam = cfg.lambda_weight
            grads = model.backward(
                cache, d_logit_vis=d_lv, d_logit_clin=d_lc,
                d_md=None if d_md is None else lam * d_md,
                d_slope=None if d_sl is None else lam * d_sl)

            loss = float(l_scr) + lam * l_prog
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}")
            epoch_loss += loss
            n_batches += 1

            model.set_grads(grads)
            adamw_step(model.params, lr=cfg.lr, wd=cfg.wd)

        val_out, _ = model.forward(x_val, v_val, masks=None)
        p_val = (fusion.alpha_vis * sigmoid(val_out["logit_vis"])
                 + fusion.alpha_clin * sigmoid(val_out["logit_clin"]))
        val_auc = roc_auc(p_val, y_val)
        val_mae = mean_absolute_error(val_out["md_hat"], md_val)
        grad_ratio = (float(np.sqrt(norm_scr) / np.sqrt(norm_prog))
                      if norm_prog > 0 else None)
        history.records.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_auc": val_auc,
            "val_mae": val_mae,
            "grad_ratio": grad_ratio,
        })

        if val_auc > history.best_val_auc:
            history.best_val_auc = val_auc
            history.best_epoch = epoch
            best_values = model.params.clone_values()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.params.load_values(best_values)
    return history


# ---------------------------------------------------------------------------
# validation grid searches
# ---------------------------------------------------------------------------

def grid_search_alpha(p_vis, p_clin, labels) -> FusionConfig:
    """Pick the fusion weight alpha_vis on an 11-point grid by validation
    AUC; exact ties prefer (0.6, 0.4), then the larger alpha_vis."""
    p_vis = np.asarray(p_vis, dtype=np.float64)
    p_clin = np.asarray(p_clin, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("grid_search_alpha: empty validation set")
    grid = [(i / 10.0, (10 - i) / 10.0) for i in range(11)]
    aucs = [roc_auc(a * p_vis + c * p_clin, labels) for a, c in grid]
    best = max(aucs)
    winners = [i for i, v in enumerate(aucs) if v == best]
    if any(grid[i][0] == 0.6 for i in winners):
        choice = next(i for i in winners if grid[i][0] == 0.6)
    else:
        choice = max(winners, key=lambda i: grid[i][0])
    return FusionConfig(alpha_vis=grid[choice][0], alpha_clin=grid[choice][1])


@dataclass
class TauSearchResult:
    tau_unc: float
    objective: float
    retained_accuracy: float
    referral_rate: float
    candidates: np.ndarray


def grid_search_tau_unc(u_values, mu_values, labels, gamma: float,
                        threshold: float = 0.5) -> TauSearchResult:
    """Pick the uncertainty threshold maximizing retained accuracy minus
    gamma times the referral rate.

    Candidates are the 5th..95th percentiles of the validation U plus one
    accept-everything sentinel just above max(U); without the sentinel a
    degenerate all-equal U (e.g. the no-MC-dropout ablation) could only
    reject everything, since the boundary U == tau rejects.
    """
    u = np.asarray(u_values, dtype=np.float64)
    mu = np.asarray(mu_values, dtype=np.float64)
    labels = np.asarray(labels)
    if u.size == 0:
        raise ConfigError("grid_search_tau_unc: empty validation set")
    pct = np.percentile(u, np.arange(5, 100, 5))
    sentinel = float(u.max()) * (1.0 + 1e-9) + 1e-12
    candidates = np.append(pct, sentinel)
    correct = (mu >= threshold).astype(int) == labels

    best = None
    for tau in candidates:
        retained = u < tau
        k = int(retained.sum())
        acc = float(correct[retained].mean()) if k else 0.0
        referral = 1.0 - k / u.size
        objective = acc - gamma * referral
        entry = (objective, -referral, -tau)
        if best is None or entry > best[0]:
            best = (entry, tau, acc, referral, objective)
    _, tau, acc, referral, objective = best
    return TauSearchResult(tau_unc=float(tau), objective=objective,
                           retained_accuracy=acc, referral_rate=referral,
                           candidates=candidates)
