import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invgate import tensor as T
from invgate.encoders import (
    ClassHead,
    CrossAttention,
    GateMask,
    ModalityEncoder,
    MultiViewAggregator,
    ViewSet,
    average_view_logits,
    encode_2d,
    encode_3d,
    encode_view_batch,
)
from invgate.errors import ContractError, NumericError, ShapeError


def identity_encoder(modality, dim):
    return ModalityEncoder(modality, [dim, dim], init="identity")


class TestEncoders:
    def test_identity_single_affine_passthrough(self):
        enc = identity_encoder("3d", 4)
        v = np.array([1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(encode_3d(enc, v).data, v)

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(0)
        enc = ModalityEncoder("3d", [4, 8, 4], init="random", rng=rng)
        out = encode_3d(enc, np.zeros(4))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_matches_handrolled_matmul(self):
        rng = np.random.default_rng(1)
        enc = ModalityEncoder("3d", [3, 5], init="random", rng=rng)
        x = rng.normal(size=3)
        # independent oracle: plain numpy product
        expected = x @ enc.weights[0].data + enc.biases[0].data
        np.testing.assert_allclose(encode_3d(enc, x).data, expected, atol=1e-12)

    def test_dim_mismatch(self):
        enc = identity_encoder("3d", 4)
        with pytest.raises(ShapeError):
            enc(np.zeros(5))

    def test_grad_reaches_encoder_params(self):
        rng = np.random.default_rng(2)
        enc = ModalityEncoder("3d", [3, 3], init="random", rng=rng)
        T.backward(T.sum_(enc(np.ones(3))))
        assert enc.weights[0].grad is not None

    def test_identity_init_requires_square(self):
        with pytest.raises(ContractError):
            ModalityEncoder("3d", [4, 8], init="identity")


class TestEncode2d:
    def test_identical_views_mean_is_adapter_output(self):
        enc = identity_encoder("2d", 3)
        v = np.array([1.0, 2.0, 3.0])
        _, x2 = encode_2d(enc, ViewSet([v, v, v]))
        np.testing.assert_allclose(x2.data, v)

    def test_single_view_equals_per_view(self):
        enc = identity_encoder("2d", 3)
        per_view, x2 = encode_2d(enc, ViewSet([np.array([1.0, 0.0, -1.0])]))
        np.testing.assert_array_equal(per_view[0].data, x2.data)

    def test_two_view_mean(self):
        enc = identity_encoder("2d", 2)
        _, x2 = encode_2d(enc, ViewSet([np.array([1.0, 0.0]), np.array([0.0, 1.0])]))
        np.testing.assert_allclose(x2.data, [0.5, 0.5])

    def test_empty_viewset_rejected(self):
        with pytest.raises(ContractError):
            ViewSet([])

    def test_batched_matches_sample_level(self):
        rng = np.random.default_rng(3)
        enc = ModalityEncoder("2d", [3, 4], init="random", rng=rng)
        views = rng.normal(size=(2, 3, 3))
        feats, mean = encode_view_batch(enc, views)
        for b in range(2):
            _, x2 = encode_2d(enc, ViewSet(list(views[b])))
            np.testing.assert_allclose(mean.data[b], x2.data, atol=1e-12)


class TestGate:
    def test_zero_logits_halve_input(self):
        gate = GateMask(3)
        x = np.array([2.0, -4.0, 6.0])
        np.testing.assert_allclose(gate.apply(x).data, 0.5 * x)

    def test_saturated_mask_passes_input(self):
        gate = GateMask(2)
        gate.mask_logits.data[:] = 50.0
        x = np.array([1.5, -2.5])
        np.testing.assert_allclose(gate.apply(x).data, x, atol=1e-6)

    def test_direct_evaluation(self):
        # sigmoid(ln 3) = 0.75, sigmoid(0) = 0.5
        gate = GateMask(2)
        gate.mask_logits.data[:] = [math.log(3.0), 0.0]
        np.testing.assert_allclose(gate.apply(np.array([4.0, 4.0])).data, [3.0, 2.0], atol=1e-12)

    def test_learn_false_blocks_mask_grad(self):
        gate = GateMask(2)
        x = T.parameter([1.0, 2.0], name="x")
        T.backward(T.sum_(gate.apply(x, learn=False)))
        assert gate.mask_logits.grad is None
        assert x.grad is not None

    def test_learn_true_reaches_mask(self):
        gate = GateMask(2)
        T.backward(T.sum_(gate.apply(np.ones(2), learn=True)))
        assert gate.mask_logits.grad is not None

    @given(st.integers(0, 3), st.floats(-4, 4), st.floats(0.01, 4))
    def test_monotone_per_dimension(self, idx, logit, bump):
        gate = GateMask(4)
        gate.mask_logits.data[idx] = logit
        x = np.full(4, 1.7)
        lo = abs(gate.apply(x).data[idx])
        gate.mask_logits.data[idx] = logit + bump
        hi = abs(gate.apply(x).data[idx])
        assert hi >= lo

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            GateMask(3).apply(np.zeros(4))


class TestClassHead:
    def make(self, mode="cosine", C=3, d=4, seed=0):
        return ClassHead(C, d, mode=mode, rng=np.random.default_rng(seed))

    def test_feature_equal_to_prototype_maxes_at_one(self):
        head = self.make()
        feat = head.prototypes.data[1].copy()
        logits = head.logits(feat[None, :]).data[0]
        assert logits[1] == pytest.approx(1.0, abs=1e-12)
        assert logits[1] == max(logits)

    def test_orthogonal_feature_gives_zero_logits(self):
        head = self.make(C=2, d=4)
        head.prototypes.data[:] = [[1, 0, 0, 0], [0, 1, 0, 0]]
        logits = head.logits(np.array([[0.0, 0.0, 1.0, 0.0]])).data[0]
        np.testing.assert_allclose(logits, [0.0, 0.0], atol=1e-12)

    def test_view_logit_average(self):
        logits = T.constant(np.array([[[1.0, 0.0], [0.0, 1.0]]]))  # [1, 2, 2]
        np.testing.assert_allclose(average_view_logits(logits).data, [[0.5, 0.5]])

    def test_zero_norm_cosine_rejected(self):
        with pytest.raises(NumericError):
            self.make().logits(np.zeros((1, 4)))

    def test_affine_is_plain_product(self):
        head = self.make(mode="affine")
        x = np.random.default_rng(5).normal(size=(2, 4))
        np.testing.assert_allclose(head.logits(x).data, x @ head.prototypes.data.T)

    @given(st.floats(0.1, 100.0))
    def test_cosine_scale_invariant(self, alpha):
        head = self.make()
        x = np.array([[0.3, -1.0, 2.0, 0.7]])
        base = head.logits(x).data
        scaled = head.logits(alpha * x).data
        np.testing.assert_allclose(scaled, base, atol=1e-9)


class TestMultiViewAggregator:
    def make(self, n=3, d=4, hidden=6, seed=0):
        return MultiViewAggregator(n, d, hidden, rng=np.random.default_rng(seed))

    def identity_proj(self, agg):
        agg.proj_w.data[:] = np.eye(agg.dim)
        agg.proj_b.data[:] = 0.0

    def test_delta_one_identical_views(self):
        agg = self.make()
        self.identity_proj(agg)
        v = np.array([1.0, -2.0, 3.0, 0.5])
        per_view = T.constant(np.stack([v, v, v])[None])
        out = agg(per_view, delta=1.0)
        np.testing.assert_allclose(out.data[0], np.maximum(v, 0.0), atol=1e-12)

    def test_delta_zero_is_global_path(self):
        agg = self.make()
        per_view = T.constant(np.random.default_rng(1).normal(size=(1, 3, 4)))
        out, f_global, _ = agg(per_view, delta=0.0, return_parts=True)
        np.testing.assert_allclose(out.data, f_global.data, atol=1e-15)

    def test_orthogonal_views_uniform_weights(self):
        # affinity matrix by hand: T = [[1,0],[0,1]], row means .5 -> softmax [.5,.5]
        agg = MultiViewAggregator(2, 2, 4, rng=np.random.default_rng(2))
        self.identity_proj(agg)
        v1, v2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        per_view = T.constant(np.stack([v1, v2])[None])
        _, _, f_view = agg(per_view, delta=1.0, return_parts=True)
        np.testing.assert_allclose(f_view.data[0], [0.5, 0.5], atol=1e-12)

    def test_delta_out_of_range(self):
        agg = self.make()
        with pytest.raises(ContractError):
            agg(T.constant(np.zeros((1, 3, 4))), delta=1.5)

    @settings(deadline=None, max_examples=25)
    @given(st.permutations(range(3)), st.integers(0, 10_000))
    def test_view_path_permutation_invariant(self, perm, seed):
        agg = self.make()
        views = np.random.default_rng(seed).normal(size=(1, 3, 4))
        _, _, base = agg(T.constant(views), delta=1.0, return_parts=True)
        _, _, permuted = agg(T.constant(views[:, list(perm)]), delta=1.0, return_parts=True)
        np.testing.assert_allclose(permuted.data, base.data, atol=1e-10)


class TestCrossAttention:
    def test_identity_projections_equal_inputs(self):
        attn = CrossAttention(3, identity=True)
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(attn(v, v).data, v, atol=1e-12)

    def test_zero_value_projections(self):
        attn = CrossAttention(3, identity=True)
        attn.wv.data[:] = 0.0
        attn.wv2.data[:] = 0.0
        out = attn(np.ones(3), np.full(3, 2.0))
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-15)

    def test_hand_computed_two_dim(self):
        # single key/query token: softmax(q k^T) = 1, so each direction returns
        # its value projection; the blend is their average
        attn = CrossAttention(2, identity=True)
        attn.wv.data[:] = [[2.0, 0.0], [0.0, 2.0]]   # forward value = 2*x2
        attn.wv2.data[:] = [[1.0, 1.0], [0.0, 1.0]]  # reverse value = x3 @ wv2
        x2 = np.array([1.0, 3.0])
        x3 = np.array([2.0, -1.0])
        expected = 0.5 * (2.0 * x2 + x3 @ attn.wv2.data)
        np.testing.assert_allclose(attn(x2, x3).data, expected, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            CrossAttention(3, identity=True)(np.zeros(3), np.zeros(4))
