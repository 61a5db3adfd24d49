import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctkidney.errors import ConfigError, SingularSystem
from ctkidney.lime import (
    ExplanationResult,
    LimeConfig,
    SuperpixelMap,
    apply_masks,
    explain,
    fit_surrogate,
    grid_segment,
    kernel_weights,
    perturb,
    render_overlay,
    sample_masks,
    segment,
    write_explanation,
)


class LinearOracle:
    """Target probability ``0.5 + sum_s c_s * mean(segment s)`` over a fixed map."""

    def __init__(self, spmap, coef, target=1):
        self.labels = spmap.labels.ravel()
        self.coef = np.asarray(coef, dtype=np.float64)
        self.counts = np.bincount(self.labels)
        self.target = target

    def __call__(self, batch):
        gray = np.asarray(batch, dtype=np.float64).mean(axis=-1).reshape(len(batch), -1)
        means = np.stack([np.bincount(self.labels, weights=g) / self.counts for g in gray])
        p = 0.5 + means @ self.coef
        return np.column_stack([1.0 - p, p]) if self.target == 1 else np.column_stack([p, 1.0 - p])


def oracle_setup(seed=0, side=32, n=16):
    spmap = grid_segment((side, side), n)
    rng = np.random.default_rng(seed)
    coef = rng.uniform(-1, 1, spmap.n_segments)
    coef *= 0.45 / np.abs(coef).sum()
    return spmap, coef, np.ones((side, side, 3), np.float32)


class TestSegment:
    def test_quadrants(self):
        spmap = segment(np.zeros((4, 4, 3)), 4)
        assert spmap.labels.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(8, 80), st.integers(8, 80), st.integers(2, 60))
    def test_grid_properties(self, h, w, target):
        spmap = segment(np.full((h, w, 3), 0.5, np.float32), target)
        ids = np.unique(spmap.labels)
        assert ids.tolist() == list(range(spmap.n_segments))
        if target <= min(h, w):
            assert 0.5 * target <= spmap.n_segments <= 2 * target
        rows = [len(np.unique(spmap.labels[:, j])) for j in range(w)]
        assert len(set(rows)) == 1
        # bands along each axis differ by at most one pixel
        heights = np.unique(np.unique(spmap.labels[:, 0], return_counts=True)[1])
        widths = np.unique(np.unique(spmap.labels[0, :], return_counts=True)[1])
        assert heights.max() - heights.min() <= 1 and widths.max() - widths.min() <= 1

    def test_slic_contract(self):
        rng = np.random.default_rng(0)
        img = rng.random((48, 48, 3)).astype(np.float32)
        img[:24] *= 0.3
        a = segment(img, 20, seed=1, method="slic")
        b = segment(img, 20, seed=1, method="slic")
        np.testing.assert_array_equal(a.labels, b.labels)
        assert 10 <= a.n_segments <= 40
        assert np.unique(a.labels).tolist() == list(range(a.n_segments))
        from skimage.measure import label

        for s in range(a.n_segments):
            assert label(a.labels == s, connectivity=1).max() == 1

    def test_target_too_small(self):
        with pytest.raises(ConfigError):
            segment(np.zeros((4, 4, 3)), 1)


class TestPerturb:
    def setup_method(self):
        self.img = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
        self.spmap = grid_segment((16, 16), 8)

    def test_first_row_identity(self):
        masks, batch = perturb(self.img, self.spmap, 20, seed=0)
        assert masks[0].tolist() == [1] * self.spmap.n_segments
        np.testing.assert_array_equal(batch[0], self.img)

    def test_all_zero_is_fill(self):
        out = apply_masks(self.img, self.spmap, np.zeros((1, self.spmap.n_segments)), np.array([0.1, 0.2, 0.3]))
        np.testing.assert_allclose(out[0], np.broadcast_to([0.1, 0.2, 0.3], self.img.shape))

    def test_keep_rate(self):
        masks = sample_masks(1000, 8, seed=4)
        rate = masks[1:].mean(axis=0)
        assert np.all((rate >= 0.45) & (rate <= 0.55))

    def test_seeded(self):
        a = perturb(self.img, self.spmap, 30, seed=5)
        b = perturb(self.img, self.spmap, 30, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            perturb(self.img, self.spmap, self.spmap.n_segments + 1)


class TestKernel:
    def test_analytic_values(self):
        sigma = 0.25
        half = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        w = kernel_weights(np.stack([np.ones(8), np.zeros(8), half]), sigma)
        d = 1 - 4 / math.sqrt(8 * 4)
        assert w[0] == 1.0
        assert w[1] == pytest.approx(math.exp(-1 / sigma**2), rel=1e-12)
        assert w[2] == pytest.approx(math.exp(-d**2 / sigma**2), rel=1e-12)

    def test_width_must_be_positive(self):
        with pytest.raises(ValueError):
            kernel_weights(np.ones((1, 3)), 0.0)


class TestSurrogate:
    def test_recovers_linear_model(self):
        masks = sample_masks(200, 6, seed=0)
        y = 2.0 * masks[:, 0] - 1.0 * masks[:, 1] + 0.5
        w = kernel_weights(masks, 0.25)
        coef, b0, r2 = fit_surrogate(masks, y, w, ridge=1e-9)
        np.testing.assert_allclose(coef, [2, -1, 0, 0, 0, 0], atol=1e-4)
        assert b0 == pytest.approx(0.5, abs=1e-4)
        assert r2 == pytest.approx(1.0, abs=1e-9)

    def test_constant_target(self):
        masks = sample_masks(50, 5, seed=1)
        coef, b0, _ = fit_surrogate(masks, np.full(50, 0.3), np.ones(50))
        np.testing.assert_allclose(coef, 0.0, atol=1e-12)
        assert b0 == pytest.approx(0.3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
    def test_weight_scale_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        masks = sample_masks(40, 5, seed=seed)
        y, w = rng.random(40), rng.random(40) + 0.1
        a = fit_surrogate(masks, y, w)
        b = fit_surrogate(masks, y, w * scale)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-8, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 10))
    def test_recovery_property(self, seed, s):
        rng = np.random.default_rng(seed)
        masks = sample_masks(4 * s + 20, s, seed=seed)
        if np.linalg.matrix_rank(np.column_stack([masks, np.ones(len(masks))])) < s + 1:
            return
        beta = rng.normal(size=s)
        coef, b0, _ = fit_surrogate(masks, masks @ beta + 0.2, rng.random(len(masks)) + 0.5, ridge=1e-9)
        np.testing.assert_allclose(coef, beta, atol=1e-4)

    def test_singular_without_ridge(self):
        masks = np.ones((10, 3), dtype=np.uint8)
        with pytest.raises(SingularSystem):
            fit_surrogate(masks, np.arange(10.0), np.ones(10), ridge=0.0)


class TestExplain:
    def test_oracle_top1_and_occlusion(self):
        spmap, coef, img = oracle_setup()
        model = LinearOracle(spmap, coef)
        cfg = LimeConfig(n_segments=16, n_samples=400, fill=0.0, seed=3)
        res = explain(model, img, 1, cfg)
        assert res.top_k[0][0] == int(np.argmax(coef))
        np.testing.assert_allclose(res.segment_weights, coef, atol=1e-3)
        occluded = img.copy()
        occluded[spmap.labels == res.top_k[0][0]] = 0.0
        assert model(occluded[None])[0, 1] < model(img[None])[0, 1]

    def test_constant_model(self):
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        res = explain(lambda b: np.tile([0.3, 0.7], (len(b), 1)), img, 1, LimeConfig(n_segments=8, n_samples=100))
        assert np.all(np.abs(res.segment_weights) < 1e-3)
        assert res.low_fidelity

    def test_deterministic_json(self, tmp_path):
        spmap, coef, img = oracle_setup(seed=1)
        cfg = LimeConfig(n_segments=16, n_samples=200, seed=9)
        a = explain(LinearOracle(spmap, coef), img, 1, cfg)
        b = explain(LinearOracle(spmap, coef), img, 1, cfg)
        assert a.to_json() == b.to_json()
        js, png = write_explanation(tmp_path, a, render_overlay(img, a.superpixels, a))
        d = json.loads(js.read_text())
        assert d["n_segments"] == 16 and len(d["top_k"]) == 5
        assert [w for _, w in d["top_k"]] == sorted((w for _, w in d["top_k"]), reverse=True)
        assert png.exists()

    def test_torch_model_accepted(self):
        from ctkidney.models import BackboneSpec, attach_head, build_backbone

        model = attach_head(build_backbone(BackboneSpec("mobilenet_v2", "tiny_random", (32, 32))), 4)
        img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
        res = explain(model, img, 2, LimeConfig(n_segments=8, n_samples=30))
        assert len(res.segment_weights) == res.superpixels.n_segments


class TestOverlay:
    def result(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        order = np.argsort(-w, kind="stable")
        return ExplanationResult(0, w, 0.0, [(int(i), float(w[i])) for i in order], 1.0, False)

    def test_top_k_zero_is_identity(self):
        img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
        spmap = grid_segment((8, 8), 4)
        out = render_overlay(img, spmap, self.result([0.5, 0.2, -0.1, 0.3]), top_k=0)
        np.testing.assert_array_equal(out, img)

    def test_single_segment_fully_tinted(self):
        img = np.full((6, 6, 3), 0.5, np.float32)
        out = render_overlay(img, SuperpixelMap(np.zeros((6, 6), np.int64)), self.result([1.0]), top_k=1)
        np.testing.assert_allclose(out, np.broadcast_to([0.7, 0.7, 0.3], img.shape), atol=1e-6)

    def test_locality(self):
        img = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
        spmap = grid_segment((8, 8), 4)
        out = render_overlay(img, spmap, self.result([0.5, 0.2, -0.1, 0.3]), top_k=2)
        untouched = ~np.isin(spmap.labels, [0, 3])
        np.testing.assert_array_equal(out[untouched], img[untouched])
        assert not np.array_equal(out[spmap.labels == 0], img[spmap.labels == 0])

    def test_negative_weights_never_highlighted(self):
        img = np.zeros((8, 8, 3), np.float32)
        out = render_overlay(img, grid_segment((8, 8), 4), self.result([-0.5, -0.2, -0.1, -0.3]), top_k=4)
        np.testing.assert_array_equal(out, img)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            render_overlay(np.zeros((8, 8, 3)), grid_segment((8, 8), 4), self.result([1.0, 2.0]))
