import numpy as np
import pytest

from oculogate.errors import ConfigError, SchemaError
from oculogate.model import (DCCEConfig, DualStreamModel, FusionConfig,
                             VisualFeatConfig, fuse, load_checkpoint,
                             predict, predict_arrays, projection_matrix,
                             save_checkpoint, visual_features)
from oculogate.numerics import (binary_cross_entropy, grad_check, sigmoid,
                                smooth_l1, smooth_l1_grad)
from oculogate.rng import Rng


def small_model(input_dim=5, k=4, proj_dim=6, seed=3, dropout_p=0.0):
    dcce = DCCEConfig(input_dim=input_dim, n_blocks=2, layers_per_block=2,
                      growth_k=k, dropout_p=dropout_p)
    vis = VisualFeatConfig(patch_grid=2, proj_dim=proj_dim, proj_seed=11)
    return DualStreamModel(dcce, vis, init_rng=Rng(seed, "test-model"))


class TestDCCE:
    def test_embedding_dim_formula(self):
        m = small_model(input_dim=16, k=32)
        assert m.dcce.output_dim == 16 + 4 * 32 == 144
        x = Rng(1, "x").normal((3, 16))
        v = Rng(1, "v").normal((3, 6))
        out, _ = m.forward(x, v)
        assert out["embedding"].shape == (3, 144)

    def test_zero_weights_pass_input_through(self):
        m = small_model()
        for name in m.params.names():
            if name.startswith("dcce."):
                m.params[name].value[...] = 0.0
        x = Rng(2, "x").normal((4, 5))
        v = np.zeros((4, 6))
        out, _ = m.forward(x, v)
        emb = out["embedding"]
        assert np.array_equal(emb[:, :5], x)
        assert np.all(emb[:, 5:] == 0.0)

    def test_dense_connectivity_perturbation_propagates(self):
        m = small_model()
        x = Rng(4, "x").normal((2, 5))
        v = Rng(4, "v").normal((2, 6))
        _, cache0 = m.forward(x, v)
        # nudging the first layer's bias must move every later pre-activation
        m.params["dcce.b0.l0.b"].value[:] += 0.37
        _, cache1 = m.forward(x, v)
        for key in ((0, 1), (1, 0), (1, 1)):
            assert not np.allclose(cache0["pres"][key], cache1["pres"][key])

    def test_dimension_mismatch(self):
        m = small_model()
        with pytest.raises(SchemaError):
            m.forward(np.zeros((2, 7)), np.zeros((2, 6)))


class TestVisualFeatures:
    def test_deterministic(self):
        cfg = VisualFeatConfig(patch_grid=4, proj_dim=32, proj_seed=5)
        raster = Rng(5, "r").uniform((64, 64))
        assert np.array_equal(visual_features(cfg, raster),
                              visual_features(cfg, raster))

    def test_constant_raster_uses_mean_channel_only(self):
        cfg = VisualFeatConfig(patch_grid=4, proj_dim=32, proj_seed=5)
        proj = projection_matrix(cfg)
        f1 = visual_features(cfg, np.full((32, 32), 0.2), proj)
        f2 = visual_features(cfg, np.full((32, 32), 0.8), proj)
        n_patches = 16
        means1 = np.full(n_patches, 0.2)
        means2 = np.full(n_patches, 0.8)
        assert np.allclose(f1, np.tanh(
            np.concatenate([means1, np.zeros(n_patches)]) @ proj))
        assert not np.allclose(f1, f2)

    def test_sensitive_to_cup_radius(self):
        from oculogate.data import generate_image

        cfg = VisualFeatConfig()
        a = visual_features(cfg, generate_image(0.0, 9))
        b = visual_features(cfg, generate_image(0.8, 9))
        assert np.linalg.norm(a - b) > 0.0

    def test_raster_smaller_than_grid_rejected(self):
        cfg = VisualFeatConfig(patch_grid=8, proj_dim=16, proj_seed=1)
        with pytest.raises(ConfigError):
            visual_features(cfg, np.zeros((4, 4)))

    def test_lipschitz_bound_via_projection_norm(self):
        cfg = VisualFeatConfig(patch_grid=4, proj_dim=64, proj_seed=2)
        proj = projection_matrix(cfg)
        op_norm = np.linalg.svd(proj, compute_uv=False)[0]
        rng = Rng(6, "lip")
        for _ in range(10):
            a = rng.uniform((32, 32))
            b = np.clip(a + rng.normal((32, 32)) * 0.05, 0, 1)
            fa = visual_features(cfg, a, proj)
            fb = visual_features(cfg, b, proj)
            assert np.linalg.norm(fa - fb) <= op_norm * np.linalg.norm(a - b) + 1e-12


class TestFusion:
    def test_reference_arithmetic(self):
        # sigma(lv) = 0.9, sigma(lc) = 0.5
        lv = float(np.log(0.9 / 0.1))
        assert fuse(FusionConfig(0.6, 0.4), lv, 0.0) == pytest.approx(0.74, abs=1e-12)

    def test_both_zero_logits(self):
        assert fuse(FusionConfig(0.6, 0.4), 0.0, 0.0) == 0.5

    def test_degenerate_weight_passthrough(self):
        lv = 1.234
        assert fuse(FusionConfig(1.0, 0.0), lv, -50.0) == sigmoid(lv)

    def test_monotone_in_each_logit(self):
        cfg = FusionConfig()
        base = fuse(cfg, 0.3, -0.2)
        assert fuse(cfg, 0.8, -0.2) > base
        assert fuse(cfg, 0.3, 0.5) > base

    def test_invalid_weights_rejected(self):
        with pytest.raises(ConfigError):
            fuse(FusionConfig(0.7, 0.4), 0.0, 0.0)
        with pytest.raises(ConfigError):
            fuse(FusionConfig(1.2, -0.2), 0.0, 0.0)


class TestHeads:
    def test_zero_head_weights_give_half_probability(self):
        m = small_model()
        for name in ("vis_head.W", "vis_head.b", "clin_head.W", "clin_head.b",
                     "reg.W2", "reg.b2"):
            m.params[name].value[...] = 0.0
        x = Rng(7, "x").normal((3, 5))
        v = Rng(7, "v").normal((3, 6))
        out, _ = m.forward(x, v)
        assert np.all(out["logit_vis"] == 0.0)
        assert np.all(out["logit_clin"] == 0.0)
        assert np.all(out["md_hat"] == 0.0)
        assert np.all(out["slope_hat"] == 0.0)
        arrs = predict_arrays(m, FusionConfig(), x, v)
        assert np.all(arrs["p_final"] == 0.5)

    def test_regression_hidden_dims(self):
        m = small_model()
        assert m.params["reg.W0"].value.shape[1] == 256
        assert m.params["reg.W1"].value.shape == (256, 128)
        assert m.params["reg.W2"].value.shape == (128, 2)


class TestGradients:
    def _loss_fn(self, m, lam, x, v, y, md_t, sl_t, labeled):
        n = x.shape[0]

        def model():
            out, cache = m.forward(x, v, None)
            l_scr = 0.5 * (binary_cross_entropy(out["logit_vis"], y)
                           + binary_cross_entropy(out["logit_clin"], y)).mean()
            d_lv = 0.5 * (sigmoid(out["logit_vis"]) - y) / n
            d_lc = 0.5 * (sigmoid(out["logit_clin"]) - y) / n
            mcount = int(labeled.sum())
            l_prog = 0.0
            d_md = d_sl = None
            if lam > 0 and mcount:
                sl_md = smooth_l1(out["md_hat"][labeled], md_t[labeled])
                sl_s = smooth_l1(out["slope_hat"][labeled], sl_t[labeled])
                l_prog = float((0.5 * sl_md + 0.5 * sl_s).mean())
                d_md = np.zeros(n)
                d_sl = np.zeros(n)
                d_md[labeled] = 0.5 * smooth_l1_grad(
                    out["md_hat"][labeled], md_t[labeled]) / mcount
                d_sl[labeled] = 0.5 * smooth_l1_grad(
                    out["slope_hat"][labeled], sl_t[labeled]) / mcount
            g = m.backward(cache, d_logit_vis=d_lv, d_logit_clin=d_lc,
                           d_md=None if d_md is None else lam * d_md,
                           d_slope=None if d_sl is None else lam * d_sl)
            m.accumulate(g)
            return float(l_scr) + lam * l_prog

        return model

    @pytest.mark.parametrize("lam", [0.0, 1.0, 5.0])
    def test_multitask_loss_gradcheck(self, lam):
        m = small_model()
        rng = Rng(10, f"probe{lam}")
        x = rng.normal((4, 5))
        v = rng.normal((4, 6)) * 0.5
        y = np.array([1.0, 0.0, 1.0, 0.0])
        md_t = rng.normal(4) * 2
        sl_t = rng.normal(4) * 0.5
        labeled = np.array([True, True, False, True])
        fn = self._loss_fn(m, lam, x, v, y, md_t, sl_t, labeled)
        assert grad_check(fn, m.params, max_per_entry=24) <= 1e-4

    def test_lambda_zero_kills_regression_gradients(self):
        m = small_model()
        rng = Rng(11, "l0")
        x = rng.normal((4, 5))
        v = rng.normal((4, 6))
        y = np.array([1.0, 0.0, 1.0, 0.0])
        out, cache = m.forward(x, v, None)
        d_lv = 0.5 * (sigmoid(out["logit_vis"]) - y) / 4
        g = m.backward(cache, d_logit_vis=d_lv, d_logit_clin=d_lv)
        for name in ("reg.W0", "reg.b0", "reg.W1", "reg.b1", "reg.W2", "reg.b2"):
            assert name not in g


class TestPredict:
    def test_eq1_identity_and_severity(self, small_pipeline):
        tp = small_pipeline
        table = tp.split.test
        for i in (0, 1, 2):
            s = table.sample(i)
            pred = predict(s, tp.stats, tp.model, tp.fusion)
            want = tp.fusion.alpha_vis * pred.p_vis + tp.fusion.alpha_clin * pred.p_clin
            assert abs(pred.p_final - want) <= 1e-12
            assert pred.vfd_prob == pred.p_final
            from oculogate.metrics import grade_md

            assert pred.severity == grade_md(pred.md_hat)
            assert pred.mts_prob in (0.0, 1.0)

    def test_deterministic_pass(self, small_pipeline):
        tp = small_pipeline
        s = tp.split.test.sample(0)
        a = predict(s, tp.stats, tp.model, tp.fusion)
        b = predict(s, tp.stats, tp.model, tp.fusion)
        assert a == b


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = small_model(seed=21)
        fusion = FusionConfig(0.7, 0.3)
        save_checkpoint(m, fusion, tmp_path / "ck", extra={"note": 1})
        m2, fusion2, extra = load_checkpoint(tmp_path / "ck")
        assert extra == {"note": 1}
        assert fusion2 == fusion
        for name in m.params.names():
            assert np.array_equal(m.params[name].value, m2.params[name].value)
        x = Rng(1, "x").normal((2, 5))
        v = Rng(1, "v").normal((2, 6))
        a, _ = m.forward(x, v)
        b, _ = m2.forward(x, v)
        assert np.array_equal(a["md_hat"], b["md_hat"])
        assert np.array_equal(a["logit_vis"], b["logit_vis"])
