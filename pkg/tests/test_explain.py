import math

import numpy as np
import pytest

from burnsight.errors import ExplainError
from burnsight.explain import (
    LimeConfig,
    apply_mask,
    explain_instance,
    fit_surrogate,
    gradient_saliency,
    kernel_weight,
    render,
    sample_masks,
)
from burnsight.imaging import GrayImage
from burnsight.model import (
    BUILTIN_DIM,
    BackboneSource,
    FusionModel,
    MlpCore,
    builtin_backbone,
    logit_pixel_gradient,
)
from burnsight.segmentation import segment_grid
from burnsight.texture import texture_vector


def weighted_lstsq(masks, y, w):
    """Closed-form weighted least squares with intercept, via lstsq."""
    xa = np.concatenate([np.ones((masks.shape[0], 1)), masks], axis=1)
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(xa * sw[:, None], y * sw, rcond=None)
    return beta


def make_builtin_model(rng, selection=("contrast",)):
    core = MlpCore(BUILTIN_DIM, 30, len(selection), 1024, 3, rng=rng)
    return FusionModel(
        core=core, backbone=BackboneSource(kind="builtin-pool"), selection=selection
    )


class TestSampleMasks:
    def test_single_mask_is_all_ones(self):
        masks = sample_masks(1, 5, seed=0)
        np.testing.assert_array_equal(masks, np.ones((1, 5)))

    def test_column_means_concentrate(self):
        masks = sample_masks(10000, 8, seed=1)
        means = masks.mean(axis=0)
        assert (means >= 0.45).all() and (means <= 0.55).all()

    def test_seed_determinism(self):
        np.testing.assert_array_equal(sample_masks(50, 6, 7), sample_masks(50, 6, 7))


class TestApplyMask:
    def test_all_ones_identity(self):
        rng = np.random.default_rng(2)
        img = GrayImage(rng.uniform(0, 1, (8, 8)))
        segmap = segment_grid(img, 2, 2)
        out = apply_mask(img, segmap, np.ones(4))
        np.testing.assert_array_equal(out.data, img.data)

    def test_all_zeros_constant_fill(self):
        img = GrayImage(np.random.default_rng(3).uniform(0, 1, (8, 8)))
        segmap = segment_grid(img, 2, 2)
        out = apply_mask(img, segmap, np.zeros(4), fill_mode="constant", fill_value=0.3)
        np.testing.assert_allclose(out.data, 0.3)

    def test_half_plane_segment_mean_fill(self):
        rng = np.random.default_rng(4)
        img = GrayImage(rng.uniform(0, 1, (6, 8)))
        segmap = segment_grid(img, 1, 2)
        out = apply_mask(img, segmap, np.array([1, 0]))
        np.testing.assert_array_equal(out.data[:, :4], img.data[:, :4])
        right_mean = img.data[:, 4:].mean()
        np.testing.assert_allclose(out.data[:, 4:], right_mean)

    def test_wrong_length_rejected(self):
        img = GrayImage(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            apply_mask(img, segment_grid(img, 2, 2), np.ones(5))


class TestKernelWeight:
    def test_all_ones_weight_one(self):
        assert kernel_weight(np.ones(8), 0.25) == pytest.approx(1.0)

    def test_quarter_ones_closed_form(self):
        mask = np.array([1, 0, 0, 0])
        sigma = 0.25
        assert kernel_weight(mask, sigma) == pytest.approx(math.exp(-0.25 / sigma**2))

    def test_all_zeros_limit_convention(self):
        sigma = 0.5
        assert kernel_weight(np.zeros(6), sigma) == pytest.approx(math.exp(-1.0 / sigma**2))

    def test_monotone_in_masked_off_count(self):
        sigma = 0.25
        weights = []
        for ones in range(8, -1, -1):
            mask = np.array([1] * ones + [0] * (8 - ones))
            weights.append(kernel_weight(mask, sigma))
        assert all(a >= b for a, b in zip(weights, weights[1:]))
        assert all(0 < w <= 1 for w in weights)


class TestFitSurrogate:
    def test_constant_predictions(self):
        rng = np.random.default_rng(5)
        masks = sample_masks(64, 4, seed=0)
        y = np.full(64, 0.37)
        w = rng.uniform(0.1, 1.0, 64)
        exp = fit_surrogate(masks, y, w, ridge=1.0, top_k=4)
        np.testing.assert_allclose(exp.segment_scores, 0.0, atol=1e-12)
        assert exp.intercept == pytest.approx(0.37, abs=1e-9)
        assert exp.r2 == pytest.approx(1.0)

    def test_single_bit_signal_recovered(self):
        rng = np.random.default_rng(6)
        masks = sample_masks(200, 5, seed=1)
        a, b = 0.8, 0.1
        y = a * masks[:, 2] + b
        w = np.array([kernel_weight(m, 0.25) for m in masks])
        exp = fit_surrogate(masks, y, w, ridge=1e-8, top_k=1)
        assert exp.segment_scores[2] == pytest.approx(a, abs=1e-6)
        others = np.delete(exp.segment_scores, 2)
        np.testing.assert_allclose(others, 0.0, atol=1e-12)

    def test_equal_weights_zero_ridge_matches_ols(self):
        rng = np.random.default_rng(7)
        masks = sample_masks(100, 6, seed=2)
        y = rng.normal(0, 1, 100)
        w = np.ones(100)
        exp = fit_surrogate(masks, y, w, ridge=0.0, top_k=6)
        beta = weighted_lstsq(masks.astype(float), y, w)
        np.testing.assert_allclose(exp.segment_scores, beta[1:], atol=1e-8)
        assert exp.intercept == pytest.approx(beta[0], abs=1e-8)

    def test_weighted_oracle_with_selection(self):
        rng = np.random.default_rng(8)
        masks = sample_masks(300, 6, seed=3)
        true = np.array([0.5, 0.0, -0.3, 0.0, 0.2, 0.0])
        y = masks @ true + 0.05
        w = np.array([kernel_weight(m, 0.3) for m in masks])
        exp = fit_surrogate(masks, y, w, ridge=1e-8, top_k=3)
        beta = weighted_lstsq(masks[:, [0, 2, 4]].astype(float), y, w)
        np.testing.assert_allclose(exp.segment_scores[[0, 2, 4]], beta[1:], atol=1e-6)
        np.testing.assert_allclose(exp.segment_scores[[1, 3, 5]], 0.0, atol=1e-12)

    def test_singular_zero_ridge_reported(self):
        masks = np.zeros((20, 3))
        masks[:, 0] = 1.0  # duplicate of the intercept column, and two dead columns
        y = np.zeros(20)
        with pytest.raises(ExplainError, match="singular"):
            fit_surrogate(masks, y, np.ones(20), ridge=0.0, top_k=3)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="samples"):
            fit_surrogate(np.ones((3, 5)), np.ones(3), np.ones(3), 1.0, 2)


class TestExplainInstance:
    def rigged_predict(self, segmap, quadrant=3):
        region = segmap.labels == quadrant

        def predict(img):
            m = img.data[region].mean()
            return np.array([m, (1 - m) * 0.6, (1 - m) * 0.4])

        return predict

    def test_pointing_game_single_run(self):
        rng = np.random.default_rng(9)
        img = GrayImage(rng.uniform(0.2, 0.9, (32, 32)))
        segmap = segment_grid(img, 2, 2)
        cfg = LimeConfig(num_samples=1000, fill_mode="constant", fill_value=0.0, seed=0)
        exp = explain_instance(self.rigged_predict(segmap), img, segmap, cfg,
                               target_class=0)
        assert int(np.argmax(exp.segment_scores)) == 3
        assert exp.target_class == 0

    def test_constant_predictor_all_zero_scores(self):
        img = GrayImage(np.random.default_rng(10).uniform(0, 1, (16, 16)))
        segmap = segment_grid(img, 2, 2)
        cfg = LimeConfig(num_samples=500, seed=1)
        exp = explain_instance(lambda im: np.array([0.2, 0.5, 0.3]), img, segmap, cfg)
        assert np.abs(exp.segment_scores).max() < 1e-9
        assert exp.target_class == 1

    def test_seed_determinism(self):
        rng = np.random.default_rng(11)
        img = GrayImage(rng.uniform(0, 1, (16, 16)))
        segmap = segment_grid(img, 2, 2)
        cfg = LimeConfig(num_samples=300, seed=4)
        predict = self.rigged_predict(segmap, quadrant=1)
        e1 = explain_instance(predict, img, segmap, cfg)
        e2 = explain_instance(predict, img, segmap, cfg)
        np.testing.assert_array_equal(e1.segment_scores, e2.segment_scores)
        assert e1.intercept == e2.intercept and e1.r2 == e2.r2

    def test_workers_do_not_change_result(self):
        rng = np.random.default_rng(12)
        img = GrayImage(rng.uniform(0, 1, (16, 16)))
        segmap = segment_grid(img, 2, 2)
        cfg = LimeConfig(num_samples=200, seed=5)
        predict = self.rigged_predict(segmap, quadrant=2)
        serial = explain_instance(predict, img, segmap, cfg, workers=1)
        threaded = explain_instance(predict, img, segmap, cfg, workers=4)
        np.testing.assert_array_equal(serial.segment_scores, threaded.segment_scores)

    def test_non_finite_prediction_reports_sample(self):
        img = GrayImage(np.full((8, 8), 0.5))
        segmap = segment_grid(img, 2, 2)
        calls = {"n": 0}

        def predict(im):
            calls["n"] += 1
            if calls["n"] == 4:
                return np.array([np.nan, 0.5, 0.5])
            return np.array([0.4, 0.3, 0.3])

        with pytest.raises(ExplainError, match="sample 2"):
            explain_instance(predict, img, segmap,
                             LimeConfig(num_samples=64, seed=0))

    def test_kernel_weights_in_unit_interval(self):
        rng = np.random.default_rng(13)
        img = GrayImage(rng.uniform(0, 1, (16, 16)))
        segmap = segment_grid(img, 2, 2)
        exp = explain_instance(lambda im: np.array([1.0, 0.0, 0.0]), img, segmap,
                               LimeConfig(num_samples=100, seed=2))
        lo, hi = exp.kernel_weight_range
        assert 0 < lo <= hi <= 1


class TestGradientSaliency:
    def test_zero_weights_zero_map(self):
        core = MlpCore(BUILTIN_DIM, 30, 0, 1024, 3)
        model = FusionModel(core=core, backbone=BackboneSource(kind="builtin-pool"),
                            selection=())
        img = GrayImage(np.random.default_rng(14).uniform(0, 1, (224, 224)))
        sal = gradient_saliency(model, img, 0)
        np.testing.assert_array_equal(sal.values, np.zeros((224, 224)))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        model = make_builtin_model(rng, selection=("contrast",))
        data = rng.uniform(0.3, 0.7, (224, 224))
        img = GrayImage(data)
        aux = texture_vector(img, model.glcm, model.selection)
        grad = logit_pixel_gradient(model, img, 2)

        def logit(d):
            raw = builtin_backbone(GrayImage(d))
            return model.core.logits(raw[None, :], aux[None, :])[0, 2]

        step = 1e-3
        for y, x in rng.integers(0, 224, size=(10, 2)):
            plus = data.copy()
            plus[y, x] += step
            minus = data.copy()
            minus[y, x] -= step
            fd = (logit(plus) - logit(minus)) / (2 * step)
            assert abs(grad[y, x] - fd) <= 1e-4 * max(abs(fd), 1e-8)

    def test_saliency_uniform_within_patch(self):
        rng = np.random.default_rng(16)
        model = make_builtin_model(rng, selection=())
        img = GrayImage(rng.uniform(0, 1, (224, 224)))
        sal = gradient_saliency(model, img, 1).values
        patch = sal[14:28, 42:56]
        assert np.unique(patch).size == 1

    def test_feature_file_backbone_rejected(self):
        core = MlpCore(8, 30, 0, 1024, 3)
        model = FusionModel(
            core=core,
            backbone=BackboneSource(kind="feature-file", path="x.fvec", dim=8),
            selection=(),
        )
        img = GrayImage(np.zeros((224, 224)))
        with pytest.raises(ExplainError, match="builtin"):
            gradient_saliency(model, img, 0)


class TestRender:
    def make_explanation(self, scores, target=0):
        from burnsight.explain import Explanation

        return Explanation(
            target_class=target,
            segment_scores=np.asarray(scores, dtype=float),
            intercept=0.1,
            r2=0.9,
            kernel_weight_range=(0.5, 1.0),
        )

    def test_zero_scores_neutral_heatmap(self):
        img = GrayImage(np.full((8, 8), 0.5))
        segmap = segment_grid(img, 2, 2)
        heatmap, _, doc = render(self.make_explanation([0.0] * 4), segmap, img, 2)
        assert (heatmap == 255).all()
        assert [s["score"] for s in doc["scores"]] == [0.0] * 4

    def test_single_positive_segment_tinted(self):
        img = GrayImage(np.zeros((8, 8)))
        segmap = segment_grid(img, 2, 2)
        _, overlay, _ = render(self.make_explanation([0.0, 0.5, 0.0, 0.0]), segmap, img, 1)
        tinted = overlay[:4, 4:]
        untouched = np.concatenate([overlay[:4, :4].ravel(), overlay[4:].ravel()])
        assert (tinted[:, :, 1] > tinted[:, :, 0]).all()  # green-shifted
        assert (untouched.reshape(-1, 3) == [0, 0, 0]).all()

    def test_colormap_limits_symmetric_about_zero(self):
        img = GrayImage(np.full((8, 8), 0.5))
        segmap = segment_grid(img, 2, 2)
        scores = [-0.061, 0.012, 0.0, 0.0]
        heatmap, _, _ = render(self.make_explanation(scores), segmap, img, 2)
        np.testing.assert_array_equal(heatmap[0, 0], [33, 102, 172])  # full negative
        t = 0.012 / 0.061
        expected = np.rint(np.array([255, 255, 255]) + t * (np.array([178, 24, 43]) - 255))
        np.testing.assert_array_equal(heatmap[0, 7], expected)

    def test_scores_sorted_descending(self):
        img = GrayImage(np.full((8, 8), 0.5))
        segmap = segment_grid(img, 2, 2)
        _, _, doc = render(self.make_explanation([0.1, -0.2, 0.4, 0.0]), segmap, img, 2)
        values = [s["score"] for s in doc["scores"]]
        assert values == sorted(values, reverse=True)
        assert doc["scores"][0]["segment"] == 2
