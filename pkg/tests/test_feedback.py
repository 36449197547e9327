import math

import numpy as np
import pytest

from skelstream.errors import DimensionError, StateError
from skelstream.feedback import (
    FEEDBACK_DIM,
    ControlFeedbackBlock,
    FeedbackState,
    SemanticAttentionBlock,
    compress_backward,
    compress_features,
    compress_features_cached,
    control_attach_indices,
    control_feedback_forward,
    grow_attach,
    semantic_attention_forward,
)
from skelstream.network import Network, NetworkConfig, count_parameters, network_forward
from skelstream.numerics import Parameter, finite_diff_grad, relative_error

from test_network import tiny_layout, tiny_net


def valid_fb(rng=None, scale=1.0):
    vec = np.zeros(FEEDBACK_DIM) if rng is None else rng.normal(size=FEEDBACK_DIM) * scale
    return FeedbackState(vec, window_index=0, valid=True)


class TestFeedbackState:
    def test_empty_is_invalid_and_zero(self):
        fb = FeedbackState.empty()
        assert not fb.valid
        np.testing.assert_array_equal(fb.vector, 0.0)

    def test_invalid_with_nonzero_vector_rejected(self):
        with pytest.raises(StateError):
            FeedbackState(np.ones(FEEDBACK_DIM), valid=False)

    def test_wrong_length_rejected(self):
        with pytest.raises(DimensionError):
            FeedbackState(np.zeros(16), valid=False)


class TestCompressFeatures:
    def test_zero_features_give_zero_vector(self):
        comp = Parameter(np.random.default_rng(0).normal(size=(FEEDBACK_DIM, 8)))
        fb = compress_features(np.zeros((8, 3, 4)), comp)
        assert fb.valid
        np.testing.assert_array_equal(fb.vector, 0.0)

    def test_constant_features_with_identity_rows(self):
        c = 40
        comp = Parameter(np.zeros((FEEDBACK_DIM, c)))
        for i in range(FEEDBACK_DIM):
            comp.value[i, i] = 1.0
        fb = compress_features(np.full((c, 2, 3), 1.75), comp)
        np.testing.assert_allclose(fb.vector, 1.75, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(6, 3, 4))
        comp = Parameter(rng.normal(size=(FEEDBACK_DIM, 6)))
        fb = compress_features(feats, comp)
        pooled = np.zeros(6)
        for c in range(6):
            acc = 0.0
            for t in range(3):
                for v in range(4):
                    acc += feats[c, t, v]
            pooled[c] = acc / 12.0
        expected = np.zeros(FEEDBACK_DIM)
        for k in range(FEEDBACK_DIM):
            expected[k] = sum(comp.value[k, c] * pooled[c] for c in range(6))
        assert np.max(np.abs(fb.vector - expected)) < 1e-12

    def test_channel_mismatch(self):
        comp = Parameter(np.zeros((FEEDBACK_DIM, 8)))
        with pytest.raises(DimensionError):
            compress_features(np.zeros((9, 2, 2)), comp)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(5, 2, 3))
        comp = Parameter(rng.normal(size=(FEEDBACK_DIM, 5)))
        r = rng.normal(size=FEEDBACK_DIM)

        def loss_feats(v):
            return float(np.sum(compress_features(v, comp).vector * r))

        def loss_comp(v):
            old = comp.value.copy()
            comp.value[...] = v
            out = float(np.sum(compress_features(feats, comp).vector * r))
            comp.value[...] = old
            return out

        comp.zero_grad()
        _, cache = compress_features_cached(feats, comp)
        gfeats = compress_backward(cache, comp, r)
        assert relative_error(gfeats, finite_diff_grad(loss_feats, feats)) < 1e-4
        assert relative_error(comp.grad, finite_diff_grad(loss_comp, comp.value)) < 1e-4


class TestSemanticAttention:
    def make_block(self, channels=2, seed=0):
        return SemanticAttentionBlock(channels, np.random.default_rng(seed))

    def test_fresh_block_is_exact_identity(self):
        block = self.make_block()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 5))
        y = semantic_attention_forward(block, x, valid_fb(rng))
        np.testing.assert_array_equal(y, x)

    def test_invalid_feedback_is_exact_identity(self):
        block = self.make_block()
        block.res_gate.value[...] = 0.7  # even with trained gates
        block.gate_bn.beta.value[...] = 0.3
        x = np.random.default_rng(2).normal(size=(2, 3, 4))
        y = semantic_attention_forward(block, x, FeedbackState.empty())
        np.testing.assert_array_equal(y, x)
        y2 = semantic_attention_forward(block, x, None)
        np.testing.assert_array_equal(y2, x)

    def test_single_token_matches_hand_computed_chain(self):
        block = self.make_block(channels=2)
        block.q_proj.value[...] = 0.0
        block.q_proj.value[0, 0], block.q_proj.value[0, 1] = 0.3, -0.2
        block.q_proj.value[1, 0], block.q_proj.value[1, 1] = 0.5, 0.7
        block.kv_proj.value[...] = 0.0
        block.kv_proj.value[0, 0], block.kv_proj.value[0, 1] = 1.5, -0.4
        block.kv_proj.value[1, 0], block.kv_proj.value[1, 1] = 0.25, 0.6
        block.gate_conv.value[...] = np.array([[0.5, -1.0], [2.0, 0.3]]).reshape(2, 2, 1, 1)
        block.gate_bn.gamma.value[...] = [1.2, 0.9]
        block.gate_bn.beta.value[...] = [0.05, -0.07]
        block.gate_bn.stats.mean[...] = [0.1, -0.2]
        block.gate_bn.stats.var[...] = [0.8, 1.5]
        block.res_gate.value[...] = 0.6

        fb_vec = np.zeros(FEEDBACK_DIM)
        fb_vec[0], fb_vec[1] = 0.1, 0.2
        fb = FeedbackState(fb_vec, valid=True)
        x = np.array([1.0, 2.0]).reshape(2, 1, 1)
        y = semantic_attention_forward(block, x, fb)  # eval-mode gate norm

        q0 = 0.3 * 1.0 + (-0.2) * 2.0
        q1 = 0.5 * 1.0 + 0.7 * 2.0
        score = (q0 * 0.1 + q1 * 0.2) / math.sqrt(32.0)
        v0 = 1.5 * 0.1 + (-0.4) * 0.2
        v1 = 0.25 * 0.1 + 0.6 * 0.2
        att0, att1 = score * v0, score * v1
        h0 = 0.5 * att0 + (-1.0) * att1
        h1 = 2.0 * att0 + 0.3 * att1
        g0 = (h0 - 0.1) / math.sqrt(0.8 + 1e-5) * 1.2 + 0.05
        g1 = (h1 + 0.2) / math.sqrt(1.5 + 1e-5) * 0.9 - 0.07
        expected = np.array([1.0 + 0.6 * g0, 2.0 + 0.6 * g1]).reshape(2, 1, 1)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_channel_mismatch(self):
        block = self.make_block(channels=3)
        with pytest.raises(DimensionError):
            semantic_attention_forward(block, np.zeros((2, 1, 1)), valid_fb())

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("seed", range(3))
    def test_backward_matches_finite_differences(self, training, seed):
        rng = np.random.default_rng(100 + seed)
        block = self.make_block(channels=3, seed=seed)
        block.res_gate.value[...] = rng.normal() * 0.5  # perturb the gates off zero
        block.gate_bn.gamma.value[...] = rng.normal(size=3)
        block.gate_bn.beta.value[...] = rng.normal(size=3)
        x = rng.normal(size=(3, 2, 4))
        fb = valid_fb(rng)
        y0, _ = block.forward(x, fb, training)
        r = rng.normal(size=y0.shape)

        def loss_x(v):
            y, _ = block.forward(v, fb, training)
            return float(np.sum(y * r))

        def loss_fb(v):
            y, _ = block.forward(x, FeedbackState(v, valid=True), training)
            return float(np.sum(y * r))

        for _, p in block.iter_params("b"):
            p.zero_grad()
        _, cache = block.forward(x, fb, training)
        gx, gfb = block.backward(cache, r)
        assert relative_error(gx, finite_diff_grad(loss_x, x)) < 1e-4
        assert relative_error(gfb, finite_diff_grad(loss_fb, fb.vector)) < 1e-4

        for name, p in block.iter_params("b"):

            def loss_param(v, p=p):
                old = p.value.copy()
                p.value[...] = v
                y, _ = block.forward(x, fb, training)
                p.value[...] = old
                return float(np.sum(y * r))

            assert relative_error(p.grad, finite_diff_grad(loss_param, p.value)) < 1e-4, name


class TestControlFeedback:
    def make_block(self, channels=4, seed=0):
        return ControlFeedbackBlock(channels, np.random.default_rng(seed))

    def test_zero_gate_is_exact_identity(self):
        block = self.make_block()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3, 5))
        y = control_feedback_forward(block, x, valid_fb(rng))
        np.testing.assert_array_equal(y, x)

    def test_zero_feedback_vector_gives_half_weights(self):
        block = self.make_block()
        block.gate.value[...] = 1.7  # any gate: 2*sigmoid(0)-1 == 0
        x = np.random.default_rng(2).normal(size=(4, 3, 5))
        y = control_feedback_forward(block, x, valid_fb())
        np.testing.assert_array_equal(y, x)

    def test_invalid_feedback_is_exact_identity(self):
        block = self.make_block()
        block.gate.value[...] = 0.9
        x = np.random.default_rng(3).normal(size=(4, 2, 2))
        y = control_feedback_forward(block, x, FeedbackState.empty())
        np.testing.assert_array_equal(y, x)

    def test_matches_per_channel_loop_oracle(self):
        rng = np.random.default_rng(4)
        block = self.make_block(channels=4, seed=5)
        block.gate.value[...] = 1.0
        fb = valid_fb(rng)
        x = rng.normal(size=(4, 2, 3))
        y = control_feedback_forward(block, x, fb)

        h = [sum(block.proj.value[c, k] * fb.vector[k] for k in range(FEEDBACK_DIM)) for c in range(4)]
        hp = [0.0] + h + [0.0]
        k = block.eca_kernel.value
        expected = np.zeros_like(x)
        for c in range(4):
            z = sum(k[j] * hp[c + j] for j in range(3))
            w = 1.0 / (1.0 + math.exp(-z))
            expected[c] = x[c] * (1.0 + 1.0 * (2.0 * w - 1.0))
        assert np.max(np.abs(y - expected)) < 1e-12

    def test_multiplier_bounded_by_gate(self):
        rng = np.random.default_rng(6)
        for seed in range(5):
            block = self.make_block(channels=6, seed=seed)
            gate = rng.normal() * 2.0
            block.gate.value[...] = gate
            x = np.ones((6, 1, 1))
            y = control_feedback_forward(block, x, valid_fb(rng, scale=3.0))
            assert np.all(y >= 1.0 - abs(gate) - 1e-12)
            assert np.all(y <= 1.0 + abs(gate) + 1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        block = self.make_block(channels=5, seed=seed)
        block.gate.value[...] = rng.normal()
        x = rng.normal(size=(5, 2, 3))
        fb = valid_fb(rng)
        r = rng.normal(size=x.shape)

        def loss_x(v):
            y, _ = block.forward(v, fb)
            return float(np.sum(y * r))

        def loss_fb(v):
            y, _ = block.forward(x, FeedbackState(v, valid=True))
            return float(np.sum(y * r))

        for _, p in block.iter_params("b"):
            p.zero_grad()
        _, cache = block.forward(x, fb)
        gx, gfb = block.backward(cache, r)
        assert relative_error(gx, finite_diff_grad(loss_x, x)) < 1e-4
        assert relative_error(gfb, finite_diff_grad(loss_fb, fb.vector)) < 1e-4
        for name, p in block.iter_params("b"):

            def loss_param(v, p=p):
                old = p.value.copy()
                p.value[...] = v
                y, _ = block.forward(x, fb)
                p.value[...] = old
                return float(np.sum(y * r))

            assert relative_error(p.grad, finite_diff_grad(loss_param, p.value)) < 1e-4, name


class TestGrowAttach:
    def test_consensus_changes_nothing(self):
        net = tiny_net()
        before = count_parameters(net)
        grow_attach(net, "consensus")
        assert net.feedback is None
        assert count_parameters(net) == before

    @pytest.mark.parametrize("variant", ["SF", "CF", "SF+CF"])
    def test_grown_network_preserves_logits(self, variant):
        rng = np.random.default_rng(7)
        net = tiny_net(seed=21)
        clips = [rng.normal(size=(1, 2, 8, 5)) for _ in range(5)]
        before = [network_forward(net, c)[0] for c in clips]
        grow_attach(net, variant, seed=3)
        fb = valid_fb(rng)  # identity must hold even with a live summary
        for clip, reference in zip(clips, before):
            logits, _ = net.forward(clip, fb)
            assert np.max(np.abs(logits - reference)) < 1e-12

    def test_sf_attach_adds_analytic_count(self):
        net = tiny_net()  # in_channels 2, feature dim 4
        before = count_parameters(net)
        grow_attach(net, "SF")
        compressor = FEEDBACK_DIM * 4
        sf = FEEDBACK_DIM * 2 + 2 * FEEDBACK_DIM + 2 * 2 + 2 * 2 + 1
        assert count_parameters(net) - before == compressor + sf

    def test_cf_attach_adds_analytic_count(self):
        net = tiny_net(channels=(3, 4, 4), strides=(1, 1, 1))
        before = count_parameters(net)
        grow_attach(net, "CF")
        assert control_attach_indices((3, 4, 4)) == [0, 2]
        compressor = FEEDBACK_DIM * 4
        cf = (3 * FEEDBACK_DIM + 3 + 1) + (4 * FEEDBACK_DIM + 3 + 1)
        assert count_parameters(net) - before == compressor + cf

    def test_default_plan_attach_points(self):
        from skelstream.network import DEFAULT_CHANNELS

        assert control_attach_indices(DEFAULT_CHANNELS) == [3, 7, 11]

    def test_double_attach_rejected(self):
        net = tiny_net()
        grow_attach(net, "SF")
        with pytest.raises(StateError):
            grow_attach(net, "SF")

    def test_sf_then_cf_combines(self):
        net = tiny_net()
        grow_attach(net, "SF")
        grow_attach(net, "CF")
        assert net.feedback.variant == "SF+CF"
        assert net.feedback.semantic is not None and net.feedback.control

    def test_unknown_variant_rejected(self):
        with pytest.raises(StateError):
            grow_attach(tiny_net(), "extra")
