"""Pyramid construction, saliency head, moment head, decoding, scoring."""

import numpy as np
import pytest

from flashvtg import pyramid
from flashvtg import tensor as T
from flashvtg.optim import grad_check
from flashvtg.tensor import Tensor


def make_params(rng, d=8, k_levels=4, clip_len=2.0, asr=True):
    return pyramid.init_head_params(rng, d, k_levels, clip_len, asr)


def hd_loop_oracle(fused, w1, w2, mask=None):
    """Per-clip scaled dot product evaluated with explicit loops."""
    n, d = fused.shape
    m = np.ones(n, dtype=bool) if mask is None else mask
    g = fused[m].mean(axis=0)
    p2 = np.zeros(d)
    for c in range(d):
        for cc in range(d):
            p2[c] += g[cc] * w2[cc, c]
    scores = np.zeros(n)
    for i in range(n):
        p1 = np.zeros(d)
        for c in range(d):
            for cc in range(d):
                p1[c] += fused[i, cc] * w1[cc, c]
        scores[i] = (p1 * p2).sum() / np.sqrt(d)
    return scores


class TestBuildPyramid:
    def test_single_level_is_input(self):
        rng = np.random.default_rng(0)
        params = make_params(rng, k_levels=1)
        f = Tensor(rng.normal(size=(9, 8)))
        levels = pyramid.build_pyramid(f, params, 1)
        assert len(levels) == 1
        assert levels[0][0] is f

    def test_power_of_two_lengths(self):
        rng = np.random.default_rng(1)
        params = make_params(rng, k_levels=4)
        levels = pyramid.build_pyramid(Tensor(rng.normal(size=(64, 8))), params, 4)
        assert [feat.data.shape[0] for feat, _ in levels] == [64, 32, 16, 8]

    def test_ceil_lengths(self):
        rng = np.random.default_rng(2)
        params = make_params(rng, k_levels=4)
        levels = pyramid.build_pyramid(Tensor(rng.normal(size=(9, 8))), params, 4)
        assert [feat.data.shape[0] for feat, _ in levels] == [9, 5, 3, 2]

    def test_shape_law_exhaustive(self):
        rng = np.random.default_rng(3)
        params = make_params(rng, k_levels=5)
        for n_clips in range(1, 129):
            x = Tensor(np.zeros((n_clips, 8)))
            for k_levels in range(1, 6):
                levels = pyramid.build_pyramid(x, params, k_levels)
                for k, (feat, _) in enumerate(levels, start=1):
                    assert feat.data.shape[0] == -(-n_clips // 2 ** (k - 1))

    def test_k_below_one_rejected(self):
        rng = np.random.default_rng(4)
        params = make_params(rng)
        with pytest.raises(ValueError):
            pyramid.build_pyramid(Tensor(np.zeros((4, 8))), params, 0)

    def test_mask_pooling(self):
        rng = np.random.default_rng(5)
        params = make_params(rng, k_levels=3)
        mask = np.array([True, False, False, False, True, False, False])
        levels = pyramid.build_pyramid(Tensor(rng.normal(size=(7, 8))), params, 3, mask)
        np.testing.assert_array_equal(levels[1][1], [True, False, True, False])
        np.testing.assert_array_equal(levels[2][1], [True, True])


class TestHdHead:
    def test_all_ones_analytic(self):
        params = {
            "hd.w1": Tensor(np.eye(4), requires_grad=True),
            "hd.w2": Tensor(np.eye(4), requires_grad=True),
        }
        fused = Tensor(np.ones((3, 4)))
        s = pyramid.hd_head(fused, params)
        np.testing.assert_allclose(s.data, 2.0, atol=1e-12)

    def test_orthogonal_context_scores_zero(self):
        params = {
            "hd.w1": Tensor(np.eye(2), requires_grad=True),
            "hd.w2": Tensor(np.eye(2), requires_grad=True),
        }
        # rows sum to the context direction (1, 1); make each row orthogonal to it
        fused = Tensor(np.array([[1.0, -1.0], [-1.0, 1.0], [2.0, -2.0], [-2.0, 2.0]]))
        s = pyramid.hd_head(fused, params)
        np.testing.assert_allclose(s.data, 0.0, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        params = make_params(rng, d=6)
        fused = rng.normal(size=(9, 6))
        s = pyramid.hd_head(Tensor(fused), params)
        expected = hd_loop_oracle(fused, params["hd.w1"].data, params["hd.w2"].data)
        np.testing.assert_allclose(s.data, expected, atol=1e-10)

    def test_no_valid_clips_rejected(self):
        rng = np.random.default_rng(7)
        params = make_params(rng)
        with pytest.raises(ValueError):
            pyramid.hd_head(Tensor(np.zeros((3, 8))), params, mask=np.zeros(3, bool))

    def test_invariant_to_invalid_row_reordering(self):
        rng = np.random.default_rng(8)
        params = make_params(rng, d=6)
        fused = rng.normal(size=(6, 6))
        mask = np.array([True, False, True, False, True, True])
        s1 = pyramid.hd_head(Tensor(fused), params, mask=mask).data
        shuffled = fused.copy()
        shuffled[[1, 3]] = fused[[3, 1]]
        s2 = pyramid.hd_head(Tensor(shuffled), params, mask=mask).data
        np.testing.assert_allclose(s2[mask], s1[mask], atol=1e-12)

    def test_ranking_sentinel(self):
        scores = np.array([0.5, 2.0, -1.0])
        ranked = pyramid.saliency_for_ranking(scores, np.array([True, False, True]))
        assert ranked[1] == -np.inf and ranked[0] == 0.5


class TestMomentHead:
    def test_zero_scale_zeroes_output(self):
        rng = np.random.default_rng(9)
        params = make_params(rng)
        out = pyramid.moment_head(Tensor(rng.normal(size=(5, 8))), params, 0.0)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_negative_preactivation_clamps(self):
        rng = np.random.default_rng(10)
        params = make_params(rng)
        params["moment.conv2.b"].data[:] = -100.0
        out = pyramid.moment_head(Tensor(rng.normal(size=(5, 8))), params, 3.0)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_linear_in_scale(self):
        rng = np.random.default_rng(11)
        params = make_params(rng)
        x = Tensor(rng.normal(size=(6, 8)))
        once = pyramid.moment_head(x, params, 1.5).data
        twice = pyramid.moment_head(x, params, 3.0).data
        np.testing.assert_allclose(twice, 2.0 * once, atol=1e-12)

    def test_outputs_nonnegative(self):
        rng = np.random.default_rng(12)
        params = make_params(rng)
        out = pyramid.moment_head(Tensor(rng.normal(size=(7, 8))), params, 2.0)
        assert np.all(out.data >= 0.0)


class TestDecodeBoundaries:
    def test_zero_offsets_dropped(self):
        spans, kept, dropped = pyramid.decode_boundaries(
            np.zeros((3, 2)), 1, 2.0, 30.0
        )
        assert spans.shape == (0, 2)
        assert dropped == 3

    def test_decode_formula(self):
        offsets = np.zeros((5, 2))
        offsets[3] = [1.0, 3.0]
        spans, kept, _ = pyramid.decode_boundaries(offsets, 1, 2.0, 30.0)
        assert kept.tolist() == [3]
        np.testing.assert_allclose(spans[0], [6.0, 10.0])

    def test_clamped_to_video_extent(self):
        offsets = np.full((4, 2), 100.0)
        spans, kept, _ = pyramid.decode_boundaries(offsets, 2, 2.0, 12.0)
        assert np.all(spans[:, 0] >= 0.0)
        assert np.all(spans[:, 1] <= 12.0)
        assert np.all(spans[:, 1] > spans[:, 0])

    def test_span_count_bounded_by_level_length(self):
        rng = np.random.default_rng(13)
        for k in (1, 2, 3):
            offsets = np.abs(rng.normal(size=(11, 2)))
            spans, kept, dropped = pyramid.decode_boundaries(offsets, k, 2.0, 60.0)
            assert len(spans) + dropped == 11
            assert np.all(spans[:, 1] > spans[:, 0])


class TestScores:
    def _levels(self, rng, lengths, d=8):
        return [(Tensor(rng.normal(size=(n, d))), None) for n in lengths]

    def test_output_length_is_level_sum(self):
        rng = np.random.default_rng(14)
        params = make_params(rng)
        out = pyramid.asr_scores(self._levels(rng, [8, 4, 2, 1]), params)
        assert out.c_final.data.shape == (15,)

    def test_mix_endpoints(self):
        rng = np.random.default_rng(15)
        params = make_params(rng)
        levels = self._levels(rng, [6, 3])
        intra_only = pyramid.asr_scores(levels, params, mix_override=1.0)
        inter_only = pyramid.asr_scores(levels, params, mix_override=0.0)
        free = pyramid.asr_scores(levels, params)
        np.testing.assert_allclose(
            intra_only.pre_mix.data, free.intra_pre.data, atol=1e-12
        )
        np.testing.assert_allclose(
            inter_only.pre_mix.data, free.inter_pre.data, atol=1e-12
        )
        np.testing.assert_allclose(
            intra_only.c_final.data,
            1.0 / (1.0 + np.exp(-free.intra_pre.data)),
            atol=1e-12,
        )

    def test_pre_mix_between_intra_and_inter(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            params = make_params(rng)
            out = pyramid.asr_scores(self._levels(rng, [7, 4, 2]), params)
            lo = np.minimum(out.intra_pre.data, out.inter_pre.data)
            hi = np.maximum(out.intra_pre.data, out.inter_pre.data)
            assert np.all(out.pre_mix.data >= lo - 1e-12)
            assert np.all(out.pre_mix.data <= hi + 1e-12)
            assert 0.0 < out.mix < 1.0

    def test_intra_head_has_no_cross_level_bleed(self):
        rng = np.random.default_rng(16)
        params = make_params(rng)
        levels = self._levels(rng, [6, 3])
        base = pyramid.asr_scores(levels, params, mix_override=1.0)
        # perturb level 2 only; level-1 intra scores must not move
        changed = [levels[0], (Tensor(rng.normal(size=(3, 8))), None)]
        out = pyramid.asr_scores(changed, params, mix_override=1.0)
        np.testing.assert_allclose(
            out.pre_mix.data[:6], base.pre_mix.data[:6], atol=1e-12
        )

    def test_inter_head_crosses_level_boundary(self):
        rng = np.random.default_rng(17)
        params = make_params(rng)
        levels = self._levels(rng, [6, 3])
        base = pyramid.asr_scores(levels, params, mix_override=0.0)
        changed = [levels[0], (Tensor(rng.normal(size=(3, 8))), None)]
        out = pyramid.asr_scores(changed, params, mix_override=0.0)
        # positions near the boundary on the level-1 side see the change
        assert not np.allclose(out.pre_mix.data[:6], base.pre_mix.data[:6], atol=1e-12)

    def test_baseline_head(self):
        rng = np.random.default_rng(18)
        params = make_params(rng, asr=False)
        out = pyramid.baseline_scores(self._levels(rng, [5, 3]), params)
        assert out.c_final.data.shape == (8,)
        assert out.intra_pre is None
        assert np.all((out.c_final.data > 0) & (out.c_final.data < 1))

    def test_empty_pyramid_rejected(self):
        rng = np.random.default_rng(19)
        params = make_params(rng)
        with pytest.raises(ValueError):
            pyramid.asr_scores([], params)

    def test_head_stack_gradients(self):
        rng = np.random.default_rng(20)
        params = make_params(rng, d=4, k_levels=2)
        fused = rng.normal(size=(6, 4))

        def loss():
            levels = pyramid.build_pyramid(Tensor(fused), params, 2)
            sal = pyramid.hd_head(levels[0][0], params)
            offsets = [
                pyramid.moment_head(feat, params, T.exp(params[f"moment.logc{k}"]))
                for k, (feat, _) in enumerate(levels, start=1)
            ]
            scores = pyramid.asr_scores(levels, params)
            total = T.add(T.tsum(scores.c_final), T.tsum(T.mul(sal, sal)))
            for b in offsets:
                total = T.add(total, T.tsum(b))
            return total

        err, name = grad_check(loss, params, max_coords_per_param=4)
        assert err < 1e-6, f"worst {name}: {err}"
