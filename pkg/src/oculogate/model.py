"""Dual-stream network: densely connected clinical encoder, a fixed
patch-statistics visual extractor behind the image->2048-vector interface,
per-stream diagnostic heads, a shared regression head, and probability-level
fusion.

The visual extractor is a deterministic stand-in: per-patch mean/std over an
8x8 tiling, a fixed seeded linear projection to proj_dim, then tanh. A real
convolutional backbone can replace it behind the same interface.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .metrics import grade_md
from .numerics import ParamStore, affine_backward, relu, sigmoid
from .rng import Rng

REG_HIDDEN = (256, 128)


@dataclass
class DCCEConfig:
    input_dim: int
    n_blocks: int = 2
    layers_per_block: int = 2
    growth_k: int = 32
    dropout_p: float = 0.3

    @property
    def output_dim(self) -> int:
        return self.input_dim + self.n_blocks * self.layers_per_block * self.growth_k


@dataclass
class VisualFeatConfig:
    patch_grid: int = 8
    proj_dim: int = 2048
    proj_seed: int = 7_040_125


@dataclass
class FusionConfig:
    alpha_vis: float = 0.6
    alpha_clin: float = 0.4

    def validate(self) -> None:
        if self.alpha_vis < 0 or self.alpha_clin < 0:
            raise ConfigError("fusion weights must be non-negative")
        if abs(self.alpha_vis + self.alpha_clin - 1.0) > 1e-9:
            raise ConfigError("fusion weights must sum to 1")


@dataclass
class Prediction:
    p_final: float
    p_vis: float
    p_clin: float
    md_hat: float
    slope_hat: float
    severity: str
    vfd_prob: float
    mts_prob: float


def fuse(cfg: FusionConfig, logit_vis, logit_clin):
    """Probability-level weighted fusion of the two stream logits."""
    cfg.validate()
    return cfg.alpha_vis * sigmoid(logit_vis) + cfg.alpha_clin * sigmoid(logit_clin)


# ---------------------------------------------------------------------------
# visual stand-in
# ---------------------------------------------------------------------------

def projection_matrix(cfg: VisualFeatConfig) -> np.ndarray:
    """Fixed seeded projection from patch statistics to proj_dim features."""
    feat_dim = 2 * cfg.patch_grid * cfg.patch_grid
    rng = Rng(cfg.proj_seed, "visual-projection")
    scale = 1.0 / np.sqrt(feat_dim)
    return rng.normal((feat_dim, cfg.proj_dim)) * scale


def patch_stats(rasters: np.ndarray, grid: int) -> np.ndarray:
    """Per-patch mean then std over a grid x grid tiling. rasters (n, H, W)."""
    n, h, w = rasters.shape
    if h < grid or w < grid or h % grid or w % grid:
        raise ConfigError(f"raster {h}x{w} does not tile into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    tiles = rasters.reshape(n, grid, ph, grid, pw)
    means = tiles.mean(axis=(2, 4))
    stds = tiles.std(axis=(2, 4))
    return np.concatenate([means.reshape(n, -1), stds.reshape(n, -1)], axis=1)


def visual_features(cfg: VisualFeatConfig, raster: np.ndarray,
                    proj: np.ndarray | None = None) -> np.ndarray:
    """2048-d feature vector for one raster in [0, 1]."""
    return visual_features_batch(cfg, raster[None, :, :], proj)[0]


def visual_features_batch(cfg: VisualFeatConfig, rasters: np.ndarray,
                          proj: np.ndarray | None = None) -> np.ndarray:
    if proj is None:
        proj = projection_matrix(cfg)
    return np.tanh(patch_stats(np.asarray(rasters, dtype=np.float64),
                               cfg.patch_grid) @ proj)


# ---------------------------------------------------------------------------
# trainable network
# ---------------------------------------------------------------------------

class DualStreamModel:
    """Owns the ParamStore; forward is pure given parameters and masks."""

    def __init__(self, dcce: DCCEConfig, visual: VisualFeatConfig,
                 init_rng: Rng | None = None):
        self.dcce = dcce
        self.visual = visual
        self.proj = projection_matrix(visual)
        self.params = ParamStore()
        self.forward_count = 0
        rng = init_rng or Rng(visual.proj_seed, "model-init")
        self._build(rng)

    # layer input width for block b, layer l
    def _in_dim(self, b: int, l: int) -> int:
        d = self.dcce.input_dim + b * self.dcce.layers_per_block * self.dcce.growth_k
        return d + l * self.dcce.growth_k

    def _build(self, rng: Rng) -> None:
        k = self.dcce.growth_k
        for b in range(self.dcce.n_blocks):
            for l in range(self.dcce.layers_per_block):
                d = self._in_dim(b, l)
                w = rng.normal((d, k)) * np.sqrt(2.0 / d)
                self.params.add(f"dcce.b{b}.l{l}.W", w)
                self.params.add(f"dcce.b{b}.l{l}.b", np.zeros(k))
        emb = self.dcce.output_dim
        # heads get small random inits so both loss terms reach the shared
        # trunk from the first step
        self.params.add("vis_head.W",
                        rng.normal((self.visual.proj_dim, 1)) / np.sqrt(self.visual.proj_dim))
        self.params.add("vis_head.b", np.zeros(1))
        self.params.add("clin_head.W", rng.normal((emb, 1)) / np.sqrt(emb))
        self.params.add("clin_head.b", np.zeros(1))
        reg_in = self.visual.proj_dim + emb
        h0, h1 = REG_HIDDEN
        self.params.add("reg.W0", rng.normal((reg_in, h0)) * np.sqrt(2.0 / reg_in))
        self.params.add("reg.b0", np.zeros(h0))
        self.params.add("reg.W1", rng.normal((h0, h1)) * np.sqrt(2.0 / h0))
        self.params.add("reg.b1", np.zeros(h1))
        self.params.add("reg.W2", rng.normal((h1, 2)) / np.sqrt(h1))
        self.params.add("reg.b2", np.zeros(2))

    def mask_segments(self) -> list[tuple[str, int]]:
        """Dropout sites: visual features, every DCCE hidden layer, and both
        regression hidden layers."""
        segs = [("vis", self.visual.proj_dim)]
        for b in range(self.dcce.n_blocks):
            for l in range(self.dcce.layers_per_block):
                segs.append((f"dcce.b{b}.l{l}", self.dcce.growth_k))
        segs.append(("reg.h0", REG_HIDDEN[0]))
        segs.append(("reg.h1", REG_HIDDEN[1]))
        return segs

    def masks_from_uniform(self, u: np.ndarray, p: float) -> dict | None:
        """Inverted-dropout masks from one (n, total_width) uniform draw."""
        if p <= 0.0:
            return None
        masks = {}
        offset = 0
        for name, width in self.mask_segments():
            masks[name] = (u[:, offset : offset + width] >= p) / (1.0 - p)
            offset += width
        return masks

    def draw_masks(self, rng: Rng, n: int, p: float | None = None) -> dict | None:
        p = self.dcce.dropout_p if p is None else p
        if p <= 0.0:
            return None
        total = sum(w for _, w in self.mask_segments())
        return self.masks_from_uniform(rng.uniform((n, total)), p)

    def forward(self, x_clin: np.ndarray, v_feats: np.ndarray,
                masks: dict | None = None) -> tuple[dict, dict]:
        """Returns (outputs, cache). x_clin (n, d), v_feats (n, proj_dim)."""
        if x_clin.shape[1] != self.dcce.input_dim:
            raise SchemaError(
                f"clinical width {x_clin.shape[1]} != input_dim {self.dcce.input_dim}")
        self.forward_count += 1
        p = self.params
        v_used = v_feats if masks is None else v_feats * masks["vis"]

        feats_blocks: list[list[np.ndarray]] = []
        pres: dict[tuple[int, int], np.ndarray] = {}
        block_in = x_clin
        for b in range(self.dcce.n_blocks):
            feats = [block_in]
            for l in range(self.dcce.layers_per_block):
                z_in = np.concatenate(feats, axis=1)
                pre = z_in @ p[f"dcce.b{b}.l{l}.W"].value + p[f"dcce.b{b}.l{l}.b"].value
                h = relu(pre)
                if masks is not None:
                    h = h * masks[f"dcce.b{b}.l{l}"]
                pres[(b, l)] = pre
                feats.append(h)
            feats_blocks.append(feats)
            block_in = np.concatenate(feats, axis=1)
        emb = block_in

        logit_vis = (v_used @ p["vis_head.W"].value + p["vis_head.b"].value)[:, 0]
        logit_clin = (emb @ p["clin_head.W"].value + p["clin_head.b"].value)[:, 0]

        r_in = np.concatenate([v_used, emb], axis=1)
        pre0 = r_in @ p["reg.W0"].value + p["reg.b0"].value
        h0 = relu(pre0)
        if masks is not None:
            h0 = h0 * masks["reg.h0"]
        pre1 = h0 @ p["reg.W1"].value + p["reg.b1"].value
        h1 = relu(pre1)
        if masks is not None:
            h1 = h1 * masks["reg.h1"]
        out2 = h1 @ p["reg.W2"].value + p["reg.b2"].value

        outputs = {
            "logit_vis": logit_vis,
            "logit_clin": logit_clin,
            "md_hat": out2[:, 0],
            "slope_hat": out2[:, 1],
            "embedding": emb,
        }
        cache = {
            "x": x_clin, "v_used": v_used, "emb": emb, "masks": masks,
            "feats_blocks": feats_blocks, "pres": pres,
            "r_in": r_in, "pre0": pre0, "h0": h0, "pre1": pre1, "h1": h1,
        }
        return outputs, cache

    def backward(self, cache: dict, d_logit_vis=None, d_logit_clin=None,
                 d_md=None, d_slope=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given upstream derivatives (each (n,)
        or None). Unused branches are skipped entirely."""
        p = self.params
        masks = cache["masks"]
        n = cache["x"].shape[0]
        grads: dict[str, np.ndarray] = {}

        def bump(name: str, g: np.ndarray) -> None:
            grads[name] = grads.get(name, 0.0) + g

        d_v_used = np.zeros_like(cache["v_used"])
        d_emb = np.zeros_like(cache["emb"])

        if d_logit_vis is not None:
            g = np.asarray(d_logit_vis).reshape(n, 1)
            bump("vis_head.W", cache["v_used"].T @ g)
            bump("vis_head.b", g.sum(axis=0))
            d_v_used += g @ p["vis_head.W"].value.T
        if d_logit_clin is not None:
            g = np.asarray(d_logit_clin).reshape(n, 1)
            bump("clin_head.W", cache["emb"].T @ g)
            bump("clin_head.b", g.sum(axis=0))
            d_emb += g @ p["clin_head.W"].value.T

        if d_md is not None or d_slope is not None:
            g2 = np.zeros((n, 2))
            if d_md is not None:
                g2[:, 0] = d_md
            if d_slope is not None:
                g2[:, 1] = d_slope
            dh1, dw2, db2 = affine_backward(g2, cache["h1"], p["reg.W2"].value)
            bump("reg.W2", dw2)
            bump("reg.b2", db2)
            if masks is not None:
                dh1 = dh1 * masks["reg.h1"]
            dpre1 = dh1 * (cache["pre1"] > 0)
            dh0, dw1, db1 = affine_backward(dpre1, cache["h0"], p["reg.W1"].value)
            bump("reg.W1", dw1)
            bump("reg.b1", db1)
            if masks is not None:
                dh0 = dh0 * masks["reg.h0"]
            dpre0 = dh0 * (cache["pre0"] > 0)
            dr_in, dw0, db0 = affine_backward(dpre0, cache["r_in"], p["reg.W0"].value)
            bump("reg.W0", dw0)
            bump("reg.b0", db0)
            pd = self.visual.proj_dim
            d_v_used += dr_in[:, :pd]
            d_emb += dr_in[:, pd:]

        # back through the dense blocks
        k = self.dcce.growth_k
        L = self.dcce.layers_per_block
        g_out = d_emb
        for b in reversed(range(self.dcce.n_blocks)):
            feats = cache["feats_blocks"][b]
            d_block_in = feats[0].shape[1]
            # split the block-output gradient into its concat segments
            acc = [g_out[:, :d_block_in]]
            for l in range(L):
                acc.append(g_out[:, d_block_in + l * k : d_block_in + (l + 1) * k])
            acc = [a.copy() for a in acc]
            for l in reversed(range(L)):
                g_h = acc[l + 1]
                if masks is not None:
                    g_h = g_h * masks[f"dcce.b{b}.l{l}"]
                g_pre = g_h * (cache["pres"][(b, l)] > 0)
                z_in = np.concatenate(feats[: l + 1], axis=1)
                bump(f"dcce.b{b}.l{l}.W", z_in.T @ g_pre)
                bump(f"dcce.b{b}.l{l}.b", g_pre.sum(axis=0))
                g_z = g_pre @ p[f"dcce.b{b}.l{l}.W"].value.T
                acc[0] += g_z[:, :d_block_in]
                for j in range(l):
                    acc[j + 1] += g_z[:, d_block_in + j * k : d_block_in + (j + 1) * k]
            g_out = acc[0]

        if masks is not None:
            d_v_used = d_v_used * masks["vis"]
        grads["_d_visual_features"] = d_v_used  # for diagnostics, not a param
        return grads

    def accumulate(self, grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        for name, g in grads.items():
            if name.startswith("_"):
                continue
            self.params[name].grad += scale * g

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        """Rebind gradients in place of zero+accumulate (hot path)."""
        for name, g in grads.items():
            if name.startswith("_"):
                continue
            self.params[name].grad = np.ascontiguousarray(g)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_arrays(model: DualStreamModel, fusion: FusionConfig,
                   x_clin: np.ndarray, v_feats: np.ndarray) -> dict[str, np.ndarray]:
    """Deterministic pass (dropout off, identity augmentation) over a batch."""
    out, _ = model.forward(x_clin, v_feats, masks=None)
    p_vis = sigmoid(out["logit_vis"])
    p_clin = sigmoid(out["logit_clin"])
    fusion.validate()
    return {
        "p_vis": p_vis,
        "p_clin": p_clin,
        "p_final": fusion.alpha_vis * p_vis + fusion.alpha_clin * p_clin,
        "md_hat": out["md_hat"],
        "slope_hat": out["slope_hat"],
    }


def predict(sample, stats, model: DualStreamModel, fusion: FusionConfig,
            mts_prob: float | None = None) -> Prediction:
    """Single-sample Prediction; mts_prob may be supplied by a gate ensemble,
    otherwise it degrades to the indicator md_hat < -6."""
    from .data import apply_preprocess

    x = apply_preprocess(stats, sample)[None, :]
    v = visual_features_batch(model.visual, sample.image[None, :, :], model.proj)
    arrs = predict_arrays(model, fusion, x, v)
    md_hat = float(arrs["md_hat"][0])
    return Prediction(
        p_final=float(arrs["p_final"][0]),
        p_vis=float(arrs["p_vis"][0]),
        p_clin=float(arrs["p_clin"][0]),
        md_hat=md_hat,
        slope_hat=float(arrs["slope_hat"][0]),
        severity=grade_md(md_hat),
        vfd_prob=float(arrs["p_final"][0]),
        mts_prob=float(md_hat < -6.0) if mts_prob is None else mts_prob,
    )


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat binary of float64 LE in manifest order
# ---------------------------------------------------------------------------

def save_checkpoint(model: DualStreamModel, fusion: FusionConfig, out_dir,
                    extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = model.params.names()
    manifest = {
        "dcce": {
            "input_dim": model.dcce.input_dim,
            "n_blocks": model.dcce.n_blocks,
            "layers_per_block": model.dcce.layers_per_block,
            "growth_k": model.dcce.growth_k,
            "dropout_p": model.dcce.dropout_p,
        },
        "visual": {
            "patch_grid": model.visual.patch_grid,
            "proj_dim": model.visual.proj_dim,
            "proj_seed": model.visual.proj_seed,
        },
        "fusion": {"alpha_vis": fusion.alpha_vis, "alpha_clin": fusion.alpha_clin},
        "params": [{"name": n, "shape": list(model.params[n].value.shape)}
                   for n in names],
        "extra": extra or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "params.bin"), "wb") as f:
        for n in names:
            f.write(model.params[n].value.astype("<f8").tobytes())


def load_checkpoint(in_dir) -> tuple[DualStreamModel, FusionConfig, dict]:
    with open(os.path.join(in_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    dcce = DCCEConfig(**manifest["dcce"])
    visual = VisualFeatConfig(**manifest["visual"])
    fusion = FusionConfig(**manifest["fusion"])
    model = DualStreamModel(dcce, visual)
    raw = open(os.path.join(in_dir, "params.bin"), "rb").read()
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        model.params[entry["name"]].value[...] = arr.reshape(shape)
    if offset != len(raw):
        raise SchemaError("params.bin length does not match the manifest")
    return model, fusion, manifest.get("extra", {})
