import math

import numpy as np
import pytest

from emofuse.errors import ArgumentError, CheckpointError, ConfigError, DataError, DimensionError
from emofuse.fusion import (
    MODALITIES,
    FusionConfig,
    FusionModel,
    attention_fuse,
    canonical_modalities,
    fusion_logits,
    fusion_loss,
    predict,
    project_modality,
    train_fusion_stage,
)
from emofuse.numcore import finite_diff_check
from emofuse.synth import SyntheticConfig, generate_synthetic


def _model(d_a=8, d_l=10, d_h=4, modalities=MODALITIES, seed=0, jitter=0.0):
    m = FusionModel(d_a, d_l, d_h, modalities)
    rng = np.random.default_rng(seed)
    m.init_weights(rng)
    if jitter:
        # push pre-activations off the relu corner at exactly zero
        for name in m.params.names():
            m.params[name][...] += jitter * rng.standard_normal(m.params[name].shape)
    return m


def _feats(model, b=5, seed=1):
    rng = np.random.default_rng(seed)
    return {m: rng.standard_normal((b, model.input_width(m))) for m in model.modalities}


class TestModalities:
    def test_canonical_order(self):
        assert canonical_modalities(("v", "a")) == ("a", "v")
        assert canonical_modalities("lav") == ("a", "l", "v")

    def test_unknown_tag(self):
        with pytest.raises(ArgumentError, match="x"):
            canonical_modalities(("a", "x"))

    def test_empty(self):
        with pytest.raises(ConfigError):
            canonical_modalities(())

    def test_duplicate(self):
        with pytest.raises(ArgumentError):
            canonical_modalities(("a", "a"))


class TestProjection:
    def test_zero_params_give_zero(self):
        m = FusionModel(4, 6, 3)
        assert not m.project("a", np.ones(4)).any()
        assert not m.project("l", np.ones(6)).any()

    def test_identity_layers_pass_through(self):
        # square identity layers, zero bias: interior relu clips negatives,
        # so a nonnegative input comes out unchanged
        m = FusionModel(3, 3, 3)
        for tag in MODALITIES:
            m.params[f"proj_{tag}/w1"][...] = np.eye(3)
            m.params[f"proj_{tag}/w2"][...] = np.eye(3)
        x = np.array([0.5, 0.0, 2.0])
        for tag in MODALITIES:
            assert np.array_equal(m.project(tag, x), x)

    def test_output_width(self):
        m = _model(d_a=8, d_l=10, d_h=4)
        for tag in MODALITIES:
            out = m.project(tag, np.ones((7, m.input_width(tag))))
            assert out.shape == (7, 4)

    def test_visual_enters_at_acoustic_width(self):
        m = FusionModel(8, 10, 4)
        assert m.input_width("v") == 8

    def test_unknown_modality(self):
        with pytest.raises(ArgumentError, match="t"):
            _model().project("t", np.ones(8))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError, match="'l'"):
            _model().project("l", np.ones(8))

    def test_module_level_wrapper(self):
        m = _model(seed=2)
        x = np.random.default_rng(0).standard_normal(8)
        assert np.array_equal(project_modality(x, m, "a"), m.project("a", x))


class TestAttentionFuse:
    def test_uniform_when_unscored(self):
        m = FusionModel(4, 4, 3)
        h_a = np.array([1.0, 0.0, 2.0])
        h_l = np.array([0.0, 3.0, 1.0])
        h_v = np.array([2.0, 1.0, 0.0])
        z, alpha = attention_fuse(m, h_a, h_l, h_v)
        np.testing.assert_allclose(alpha, 1 / 3, atol=1e-15)
        np.testing.assert_allclose(z, (h_a + h_l + h_v) / 3, atol=1e-15)

    def test_dominant_modality_limit(self):
        m = FusionModel(4, 4, 3)
        m.params["attn/w"][...] = np.array([50.0, 0.0, 0.0])
        h_a = np.array([1.0, 0.5, -0.5])
        zeros = np.zeros(3)
        z, alpha = attention_fuse(m, h_a, zeros, zeros)
        assert alpha[0] > 0.999999
        np.testing.assert_allclose(z, h_a, atol=1e-9)

    def test_geometric_hand_case_width_one(self):
        # d_h=1, h=(1),(2),(3), W=(ln 2): e=(ln2, 2ln2, 3ln2), so the softmax
        # weights are (1/7, 2/7, 4/7) and z = (1 + 4 + 12)/7 = 17/7
        m = FusionModel(1, 1, 1)
        m.params["attn/w"][...] = math.log(2.0)
        z, alpha = attention_fuse(m, np.array([1.0]), np.array([2.0]), np.array([3.0]))
        np.testing.assert_allclose(alpha, [1 / 7, 2 / 7, 4 / 7], atol=1e-12)
        np.testing.assert_allclose(z, [17 / 7], atol=1e-12)

    def test_indicator_hand_case_width_two(self):
        # scores (0, ln 2, ln 3) via indicator embeddings: alpha = (1/6, 2/6, 3/6)
        m = FusionModel(2, 2, 2)
        m.params["attn/w"][...] = np.array([math.log(2.0), math.log(3.0)])
        h_a = np.array([0.0, 0.0])
        h_l = np.array([1.0, 0.0])
        h_v = np.array([0.0, 1.0])
        z, alpha = attention_fuse(m, h_a, h_l, h_v)
        np.testing.assert_allclose(alpha, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)
        np.testing.assert_allclose(z, [2 / 6, 3 / 6], atol=1e-12)

    def test_alpha_sums_to_one(self):
        m = _model(d_a=6, d_l=6, d_h=5, seed=4)
        rng = np.random.default_rng(7)
        z, alpha = attention_fuse(
            m, rng.standard_normal((9, 5)), rng.standard_normal((9, 5)), rng.standard_normal((9, 5))
        )
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        assert ((alpha > 0) & (alpha < 1)).all()
        assert z.shape == (9, 5)

    def test_score_bias_shift_invariance(self):
        m = _model(d_a=6, d_l=6, d_h=5, seed=4)
        rng = np.random.default_rng(7)
        hs = [rng.standard_normal((9, 5)) for _ in range(3)]
        z1, a1 = attention_fuse(m, *hs)
        m.params["attn/b"][...] += 123.0
        z2, a2 = attention_fuse(m, *hs)
        np.testing.assert_allclose(a1, a2, atol=1e-12)
        np.testing.assert_allclose(z1, z2, atol=1e-12)

    def test_width_mismatch(self):
        m = FusionModel(4, 4, 3)
        with pytest.raises(DimensionError):
            attention_fuse(m, np.ones(3), np.ones(4), np.ones(3))

    def test_subset_pads_alpha(self):
        m = FusionModel(4, 6, 3, modalities=("a", "v"))
        z, alpha = attention_fuse(m, h_a=np.ones(3), h_v=np.ones(3) * 2)
        assert alpha[MODALITIES.index("l")] == 0.0
        np.testing.assert_allclose(alpha.sum(), 1.0, atol=1e-12)

    def test_subset_rejects_extra(self):
        m = FusionModel(4, 6, 3, modalities=("a",))
        with pytest.raises(ArgumentError, match="'l'"):
            attention_fuse(m, h_a=np.ones(3), h_l=np.ones(3))

    def test_subset_requires_configured(self):
        m = FusionModel(4, 6, 3, modalities=("a", "l"))
        with pytest.raises(ArgumentError, match="'l'"):
            attention_fuse(m, h_a=np.ones(3))


class TestPermutationConsistency:
    def test_swapping_modalities_swaps_alpha(self):
        # equal input widths so the acoustic and lexical branches are
        # interchangeable; swapping parameters with inputs permutes alpha and
        # leaves the fused vector (hence logits) unchanged
        m1 = _model(d_a=6, d_l=6, d_h=5, seed=3)
        m2 = m1.copy()
        for t in ("w1", "b1", "w2", "b2"):
            m2.params[f"proj_a/{t}"][...] = m1.params[f"proj_l/{t}"]
            m2.params[f"proj_l/{t}"][...] = m1.params[f"proj_a/{t}"]
        feats = _feats(m1, b=6, seed=9)
        swapped = {"a": feats["l"], "l": feats["a"], "v": feats["v"]}
        _, p1, a1 = predict(m1, feats)
        _, p2, a2 = predict(m2, swapped)
        np.testing.assert_allclose(a2[:, [1, 0, 2]], a1, atol=1e-12)
        np.testing.assert_allclose(p2, p1, atol=1e-12)


class TestFusionLoss:
    def test_confident_correct_is_small(self):
        m = FusionModel(4, 4, 3)
        m.params["classifier/b"][...] = np.array([40.0, 0, 0, 0, 0, 0])
        loss = fusion_loss(m, _feats(m, b=4, seed=0), np.zeros(4, np.int64))
        assert loss < 1e-12

    def test_random_init_near_ln6(self):
        rng = np.random.default_rng(11)
        losses = []
        for i in range(120):
            m = FusionModel(6, 8, 8).init_weights(np.random.default_rng(1000 + i))
            feats = {t: rng.standard_normal((30, m.input_width(t))) for t in MODALITIES}
            losses.append(fusion_loss(m, feats, rng.integers(0, 6, 30)))
        assert abs(np.mean(losses) - math.log(6)) < 0.15

    def test_gradients_match_finite_differences(self):
        model = _model(d_a=8, d_l=10, d_h=4, seed=0, jitter=0.05)
        feats = _feats(model, b=5, seed=1)
        labels = np.array([0, 2, 5, 1, 3])

        def loss_fn(params):
            params.zero_grad()
            return fusion_loss(model, feats, labels)

        assert finite_diff_check(loss_fn, model.params) < 1e-4

    def test_subset_gradients_match_finite_differences(self):
        model = _model(d_a=8, d_l=10, d_h=4, modalities=("a", "l"), seed=2, jitter=0.05)
        feats = _feats(model, b=5, seed=3)
        labels = np.array([4, 2, 0, 1, 5])

        def loss_fn(params):
            params.zero_grad()
            return fusion_loss(model, feats, labels)

        assert finite_diff_check(loss_fn, model.params) < 1e-4

    def test_unconfigured_modalities_get_zero_grad(self):
        model = _model(modalities=("a",), seed=5)
        model.params.zero_grad()
        fusion_loss(model, _feats(model, b=4, seed=6), np.array([1, 0, 3, 2]))
        for t in ("w1", "b1", "w2", "b2"):
            assert not model.params.grad(f"proj_l/{t}").any()
            assert not model.params.grad(f"proj_v/{t}").any()

    def test_missing_modality(self):
        model = _model()
        feats = _feats(model)
        del feats["v"]
        with pytest.raises(DataError, match="'v'"):
            fusion_loss(model, feats, np.zeros(5, np.int64))

    def test_extra_modality_rejected(self):
        model = _model(modalities=("a", "l"))
        feats = _feats(model)
        feats["v"] = np.ones((5, 8))
        with pytest.raises(ArgumentError, match="'v'"):
            fusion_loss(model, feats, np.zeros(5, np.int64))

    def test_bad_label_names_sample(self):
        model = _model()
        with pytest.raises(DataError, match="clip7"):
            fusion_loss(model, _feats(model, b=2), np.array([0, -1]), sample_ids=["clip3", "clip7"])

    def test_label_count_mismatch(self):
        model = _model()
        with pytest.raises(DimensionError):
            fusion_loss(model, _feats(model, b=5), np.zeros(4, np.int64))


class TestPredict:
    def test_softmax_hand_case(self):
        # constant logits (5,0,0,0,0,0): class 0 with probability e^5/(e^5+5)
        m = FusionModel(4, 4, 3)
        m.params["classifier/b"][...] = np.array([5.0, 0, 0, 0, 0, 0])
        labels, probs, alpha = predict(m, _feats(m, b=3, seed=2))
        assert (labels == 0).all()
        expected = math.exp(5) / (math.exp(5) + 5)
        np.testing.assert_allclose(probs[:, 0], expected, atol=1e-12)

    def test_tie_breaks_to_lowest_index(self):
        m = FusionModel(4, 4, 3)
        m.params["classifier/b"][...] = np.array([0.0, 0, 3.0, 0, 3.0, 0])
        labels, _, _ = predict(m, _feats(m, b=2, seed=0))
        assert (labels == 2).all()

    def test_alpha_sums_to_one_every_prediction(self):
        m = _model(seed=8)
        _, probs, alpha = predict(m, _feats(m, b=40, seed=3))
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        m = _model(seed=8)
        feats = _feats(m, b=10, seed=4)
        l1, p1, a1 = predict(m, feats)
        l2, p2, a2 = predict(m, feats)
        assert np.array_equal(l1, l2) and np.array_equal(p1, p2) and np.array_equal(a1, a2)

    def test_logits_match_predict(self):
        m = _model(seed=8)
        feats = _feats(m, b=10, seed=4)
        labels, _, _ = predict(m, feats)
        assert np.array_equal(np.argmax(fusion_logits(m, feats), axis=1), labels)


def _store_with_shared_width(seed=0):
    # visual generated at the acoustic width so raw features can feed the
    # fusion stage without the upstream projector
    cfg = SyntheticConfig(
        n_samples=240, n_unlabeled=0, n_test=0, d_a=32, d_v=32, d_l=40,
        d_latent=12, seed=seed,
    )
    store = generate_synthetic(cfg)
    idx = store.indices("labeled")
    feats = {
        "a": np.asarray(store.acoustic[idx][:, cfg.peak_layer, :], np.float64),
        "l": np.asarray(store.lexical[idx], np.float64),
        "v": np.asarray(store.visual[idx], np.float64),
    }
    return feats, store.labels[idx]


class TestTrainFusion:
    def test_learns_tri_modal(self):
        feats, labels = _store_with_shared_width()
        perm = np.random.default_rng(0).permutation(len(labels))
        tr, va = perm[:192], perm[192:]
        cfg = FusionConfig(epochs=50, d_h=32, seed=0)
        model, log = train_fusion_stage(feats, labels, tr, va, cfg, 32, 40)
        assert max(e["val_wf1"] for e in log) >= 0.90
        assert len(log) <= 50

    def test_acoustic_only_subset(self):
        feats, labels = _store_with_shared_width()
        perm = np.random.default_rng(0).permutation(len(labels))
        tr, va = perm[:192], perm[192:]
        cfg = FusionConfig(epochs=30, d_h=32, modalities=("a",), seed=0)
        model, log = train_fusion_stage({"a": feats["a"]}, labels, tr, va, cfg, 32, 40)
        assert max(e["val_wf1"] for e in log) >= 0.80
        # single modality: attention is a softmax over one score
        _, _, alpha = predict(model, {"a": feats["a"][:8]})
        np.testing.assert_allclose(alpha[:, 0], 1.0, atol=1e-15)
        assert not alpha[:, 1:].any()

    def test_unconfigured_params_never_change(self):
        feats, labels = _store_with_shared_width()
        perm = np.random.default_rng(1).permutation(len(labels))
        tr, va = perm[:192], perm[192:]
        cfg = FusionConfig(epochs=3, d_h=16, modalities=("a", "l"), weight_decay=0.05, seed=2)
        model, _ = train_fusion_stage({"a": feats["a"], "l": feats["l"]}, labels, tr, va, cfg, 32, 40)
        fresh = FusionModel(32, 40, 16, ("a", "l")).init_weights(np.random.default_rng(2))
        for t in ("w1", "b1", "w2", "b2"):
            assert np.array_equal(model.params[f"proj_v/{t}"], fresh.params[f"proj_v/{t}"])

    def test_same_seed_same_trajectory(self):
        feats, labels = _store_with_shared_width()
        perm = np.random.default_rng(0).permutation(len(labels))
        tr, va = perm[:192], perm[192:]
        cfg = FusionConfig(epochs=4, d_h=16, seed=7)
        _, log1 = train_fusion_stage(feats, labels, tr, va, cfg, 32, 40)
        _, log2 = train_fusion_stage(feats, labels, tr, va, cfg, 32, 40)
        assert [e["l_ce"] for e in log1] == [e["l_ce"] for e in log2]

    def test_empty_train_set(self):
        feats, labels = _store_with_shared_width()
        with pytest.raises(ConfigError, match="train"):
            train_fusion_stage(feats, labels, np.array([], np.int64), np.array([0]), FusionConfig(), 32, 40)


class TestFusionCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = _model(d_a=8, d_l=10, d_h=4, modalities=("a", "v"), seed=6)
        path = tmp_path / "fusion.emoc"
        model.save(path)
        back = FusionModel.load(path)
        assert back.d_a == 8 and back.d_l == 10 and back.d_h == 4
        assert back.modalities == ("a", "v")
        feats = _feats(model, b=3, seed=1)
        l1, p1, a1 = predict(model, feats)
        l2, p2, a2 = predict(back, feats)
        assert np.array_equal(p1, p2) and np.array_equal(a1, a2)

    def test_wrong_kind(self, tmp_path):
        from emofuse.data import save_checkpoint

        path = tmp_path / "x.emoc"
        save_checkpoint(path, "vision", {}, {"w": np.zeros(3)})
        with pytest.raises(CheckpointError, match="fusion"):
            FusionModel.load(path)
