import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoseg import arraydiff as ad
from protoseg.encoder import EncoderConfig, init_encoder
from protoseg.episodes import DatasetSplit, SynthConfig, SyntheticSource, sample_episode
from protoseg.protocore import COSINE_RAW, SOFTMAXED, PrototypeSet, ScoreMap, argmax_labels, segment, support_prototypes
from protoseg.encoder import extract_features
from protoseg.refine import (
    RefineConfig,
    RefineStep,
    RefineTrace,
    adapt,
    adaptation_loss,
    fuse_maps,
    fuse_prototypes,
    hard_select,
    refine_and_segment,
    self_adaptive_threshold,
)

TINY = EncoderConfig(widths=(8, 8), strides=(2, 1), dilations=(1, 2))


@pytest.fixture(scope="module")
def source():
    return SyntheticSource(SynthConfig(image_size=32), per_class=20, seed=3)


@pytest.fixture(scope="module")
def episode(source):
    return sample_episode(source, DatasetSplit(source.folds, 0, "test"), 2, 1, 2, seed=11)


def P(*rows):
    return PrototypeSet([ad.Tensor(np.asarray(r, dtype=np.float64)) for r in rows], [1] * len(rows))


class TestThreshold:
    def test_crafted_midpoint(self):
        m = np.array([0.2, 0.4, 0.6]).reshape(1, 1, 3)
        assert abs(self_adaptive_threshold(m)[0] - 0.5) < 1e-9

    def test_constant_fixed_point(self):
        assert abs(self_adaptive_threshold(np.full((2, 3, 3), 0.37))[1] - 0.37) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4, 4), elements=st.floats(-1, 1)), st.floats(-5, 5))
    def test_midpoint_and_shift(self, m, c):
        a = self_adaptive_threshold(m)
        flat = m.reshape(3, -1)
        assert np.all(flat.mean(1) - 1e-12 <= a) and np.all(a <= flat.max(1) + 1e-12)
        shifted = m.copy()
        shifted[1] += c
        np.testing.assert_allclose(self_adaptive_threshold(shifted)[1], a[1] + c, atol=1e-9)


class TestHardSelect:
    def test_two_by_two(self):
        s = np.array([[[0.9, 0.1], [0.3, 0.2]], [[0.1, 0.9], [0.7, 0.8]]])
        pred = argmax_labels(s)
        out = hard_select(pred, s, np.array([0.5, 0.75]))
        np.testing.assert_array_equal(out, [[0, 1], [-1, 1]])

    def test_extremes(self, rng):
        s = rng.uniform(size=(3, 4, 4))
        pred = argmax_labels(s)
        np.testing.assert_array_equal(hard_select(pred, s, np.full(3, -1.0)), pred)
        np.testing.assert_array_equal(hard_select(pred, s, np.full(3, 2.0)), -1)

    @pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (4, 4)])
    def test_exhaustive_enumeration(self, h, w):
        rng = np.random.default_rng(h * 10 + w)
        for _ in range(50):
            s = rng.uniform(size=(3, h, w)).round(1)
            pred = argmax_labels(s)
            alpha = self_adaptive_threshold(s)
            out = hard_select(pred, s, alpha)
            for n in range(3):
                expected = {
                    (x, y) for x in range(h) for y in range(w) if pred[x, y] == n and s[n, x, y] > alpha[n]
                }
                got = {(x, y) for x, y in itertools.product(range(h), range(w)) if out[x, y] == n}
                assert got == expected
            assert set(np.unique(out)) <= {-1} | set(np.unique(pred))


class TestFusion:
    def test_identity_weights(self):
        ps, pq = P([1, 2], [3, 4]), P([9, 9], [8, 8])
        np.testing.assert_array_equal(fuse_prototypes(ps, pq, 1.0, 0.0).numpy(), ps.numpy())

    def test_arithmetic(self):
        np.testing.assert_array_equal(fuse_prototypes(P([1, 0]), P([0, 1]), 0.5, 0.5).numpy(), [[0.5, 0.5]])

    def test_fixed_point(self):
        ps = P([0.3, -1.2], [2.0, 5.0])
        np.testing.assert_allclose(fuse_prototypes(ps, ps, 0.5, 0.5).numpy(), ps.numpy())

    def test_fallback_keeps_support(self):
        pq = P([7, 7], [8, 8])
        pq.fallback = [False, True]
        out = fuse_prototypes(P([1, 1], [2, 2]), pq, 0.5, 0.5).numpy()
        np.testing.assert_array_equal(out, [[4, 4], [2, 2]])

    def test_linear(self, rng):
        a = 2.5
        ps, pq = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        with ad.precision("float64"):
            lhs = fuse_prototypes(P(*(a * ps)), P(*(a * pq)), 0.3, 0.9).numpy()
            rhs = a * fuse_prototypes(P(*ps), P(*pq), 0.3, 0.9).numpy()
        np.testing.assert_allclose(lhs, rhs)

    def test_alphabet_mismatch(self):
        with pytest.raises(ValueError):
            fuse_prototypes(P([1, 0]), P([1, 0], [0, 1]), 0.5, 0.5)

    def test_maps(self):
        m1 = ScoreMap(ad.Tensor(np.array([0.2, 0.8]).reshape(2, 1, 1)), SOFTMAXED)
        m2 = ScoreMap(ad.Tensor(np.array([0.4, 0.6]).reshape(2, 1, 1)), SOFTMAXED)
        np.testing.assert_allclose(fuse_maps(m1, m2).numpy().ravel(), [0.3, 0.7], atol=1e-7)
        np.testing.assert_array_equal(fuse_maps(m1, m2).numpy(), fuse_maps(m2, m1).numpy())
        np.testing.assert_array_equal(fuse_maps(m1, m1).numpy(), m1.numpy())
        with pytest.raises(ValueError):
            fuse_maps(m1, ScoreMap(m2.scores, COSINE_RAW))


class TestAdapt:
    def test_zero_steps_bitwise_identity(self, episode):
        params = init_encoder(TINY, 0)
        out = adapt(params, episode, RefineConfig(adapt_steps=0))
        assert out.equals(params) and out is not params

    def test_zero_lr_identity(self, episode):
        params = init_encoder(TINY, 0)
        assert adapt(params, episode, RefineConfig(adapt_steps=2, adapt_learning_rate=0.0)).equals(params)

    def test_original_untouched(self, episode):
        params = init_encoder(TINY, 0)
        before = params.clone()
        adapted = adapt(params, episode, RefineConfig(adapt_steps=2, adapt_learning_rate=1e-2))
        assert params.equals(before) and not adapted.equals(before)

    def test_loss_non_increasing_mostly(self, source):
        split = DatasetSplit(source.folds, 0, "test")
        params = init_encoder(TINY, 1)
        ok = 0
        for seed in range(50):
            ep = sample_episode(source, split, 1, 1, 1, seed=seed)
            hist = []
            adapt(params, ep, RefineConfig(adapt_steps=5, adapt_learning_rate=1e-3), hist)
            ok += all(b <= a + 1e-7 for a, b in zip(hist, hist[1:]))
        assert ok >= 45


class TestPipeline:
    def test_degenerate_matches_plain_prediction(self, episode):
        params = init_encoder(TINY, 0)
        res = refine_and_segment(params, episode, RefineConfig(adapt_steps=0, fusion_steps=0))
        feats = [[extract_features(params, i, False) for i in shots] for shots in episode.support_images]
        ps = support_prototypes(feats, episode.support_masks, episode.n_ways)
        for img, mask in zip(episode.query_images, res.masks):
            lab, _ = segment(extract_features(params, img, False), ps, img.shape[1:], 20.0)
            np.testing.assert_array_equal(mask, lab)
        assert res.trace.steps == []

    def test_identity_fusion_step(self, episode):
        params = init_encoder(TINY, 0)
        base = refine_and_segment(params, episode, RefineConfig(adapt_steps=0, fusion_steps=0))
        one = refine_and_segment(params, episode, RefineConfig(adapt_steps=0, fusion_steps=1, omega_s=1.0, omega_q=0.0))
        for a, b in zip(base.masks, one.masks):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("selection", [SOFTMAXED, COSINE_RAW])
    def test_deterministic_and_traced(self, episode, selection):
        params = init_encoder(TINY, 0)
        cfg = RefineConfig(adapt_steps=1, fusion_steps=3, selection_map=selection)
        a, b = refine_and_segment(params, episode, cfg), refine_and_segment(params, episode, cfg)
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)
        assert [s.step for s in a.trace.steps] == [1, 2, 3]
        assert len(a.trace.steps[0].thresholds) == episode.n_queries
        assert a.masks[0].shape == episode.query_masks[0].shape

    def test_trace_round_trip(self):
        trace = RefineTrace([RefineStep(1, [np.array([0.5, 0.25])], np.array([3, 4]), np.array([1.5, 2.0]))])
        back = RefineTrace.from_text(trace.to_text())
        assert back.to_text() == trace.to_text()
        assert back.steps[0].selected.tolist() == [3, 4]


def test_adaptation_loss_gradient(episode):
    from conftest import max_relative_error, numeric_grad

    with ad.precision("float64"):
        params = init_encoder(EncoderConfig(widths=(4, 4), strides=(1, 1), dilations=(1, 2)), 2)
        # zero-init biases give all-zero feature columns wherever the relu is
        # dead; cosine is not differentiable there, so move off that point
        rng = np.random.default_rng(5)
        for b in params.biases:
            b.value[...] = rng.normal(scale=0.1, size=b.shape)
        small = episode
        loss = adaptation_loss(params, small, 5.0)
        ad.backward(loss)
        tensors = params.parameters()
        analytic = [t.grad.copy() for t in tensors]
        values = [t.value for t in tensors]
        numeric = numeric_grad(lambda: adaptation_loss(params, small, 5.0).item(), values, 1e-5, limit=12)
    assert max_relative_error(analytic, numeric) < 1e-4
