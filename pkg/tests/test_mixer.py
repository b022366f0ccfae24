"""Mixer blocks: hand oracles, equivariances, residual identities, FD checks."""
import numpy as np
import pytest

from chargecast import tensor as T
from chargecast.mixer import MixerConfig, MixerStack, STBlock
from chargecast.tensor import Graph, Tensor, grad_check


def make_block(l=4, c=3, seed=0, **kw):
    cfg = MixerConfig(L=l, C=c, d=8, **kw)
    return STBlock("mixer.block0", cfg, np.random.default_rng(seed))


def zero_params(params):
    for p in params:
        p.data[...] = 0.0


def set_identity_equivalent(lin1, lin2):
    """lin2(relu(lin1(x))) = relu(x) - relu(-x) = x."""
    n = lin1.n_in
    lin1.W.data[...] = np.vstack([np.eye(n), -np.eye(n)])
    lin1.b.data[...] = 0.0
    lin2.W.data[...] = np.hstack([np.eye(n), -np.eye(n)])
    lin2.b.data[...] = 0.0


class TestTemporalMix:
    def test_identity_equivalent_weights(self):
        blk = make_block(l=5, c=2)
        set_identity_equivalent(blk.t_lin1, blk.t_lin2)
        x = Tensor(np.random.default_rng(1).normal(size=(5, 2)))
        y = blk.temporal_mix(x, "eval")
        np.testing.assert_allclose(y.data, x.data, atol=1e-14)

    def test_hand_computed_single_channel(self):
        blk = make_block(l=3, c=1, hidden_t=3)
        rng = np.random.default_rng(2)
        w1 = rng.normal(size=(3, 3))
        b1 = rng.normal(size=3)
        w2 = rng.normal(size=(3, 3))
        b2 = rng.normal(size=3)
        blk.t_lin1.W.data[...] = w1
        blk.t_lin1.b.data[...] = b1
        blk.t_lin2.W.data[...] = w2
        blk.t_lin2.b.data[...] = b2
        xv = rng.normal(size=3)
        y = blk.temporal_mix(Tensor(xv[:, None]), "eval")
        expected = w2 @ np.maximum(w1 @ xv + b1, 0.0) + b2
        np.testing.assert_allclose(y.data[:, 0], expected, atol=1e-13)

    def test_channel_permutation_equivariance(self):
        blk = make_block(l=6, c=4)
        x = np.random.default_rng(3).normal(size=(6, 4))
        perm = np.array([2, 0, 3, 1])
        a = blk.temporal_mix(Tensor(x[:, perm]), "eval").data
        b = blk.temporal_mix(Tensor(x), "eval").data[:, perm]
        np.testing.assert_array_equal(a, b)

    def test_length_mismatch_rejected(self):
        blk = make_block(l=4, c=3)
        with pytest.raises(ValueError, match="temporal_mix"):
            blk.temporal_mix(Tensor(np.zeros((5, 3))), "eval")


class TestChannelMix:
    def test_hand_computed_two_channels(self):
        blk = make_block(l=1, c=2, hidden_c=2)
        rng = np.random.default_rng(4)
        w1, b1 = rng.normal(size=(2, 2)), rng.normal(size=2)
        w2, b2 = rng.normal(size=(2, 2)), rng.normal(size=2)
        blk.c_lin1.W.data[...] = w1
        blk.c_lin1.b.data[...] = b1
        blk.c_lin2.W.data[...] = w2
        blk.c_lin2.b.data[...] = b2
        xv = rng.normal(size=2)
        y = blk.channel_mix(Tensor(xv[None, :]), "eval")
        expected = w2 @ np.maximum(w1 @ xv + b1, 0.0) + b2
        np.testing.assert_allclose(y.data[0], expected, atol=1e-13)

    def test_time_permutation_equivariance(self):
        blk = make_block(l=5, c=3)
        x = np.random.default_rng(5).normal(size=(5, 3))
        perm = np.array([4, 2, 0, 1, 3])
        a = blk.channel_mix(Tensor(x[perm]), "eval").data
        b = blk.channel_mix(Tensor(x), "eval").data[perm]
        np.testing.assert_array_equal(a, b)

    def test_identity_equivalent_weights(self):
        blk = make_block(l=2, c=3)
        set_identity_equivalent(blk.c_lin1, blk.c_lin2)
        x = Tensor(np.random.default_rng(6).normal(size=(2, 3)))
        np.testing.assert_allclose(blk.channel_mix(x, "eval").data, x.data, atol=1e-14)

    def test_channel_mismatch_rejected(self):
        blk = make_block(l=4, c=3)
        with pytest.raises(ValueError, match="channel_mix"):
            blk.channel_mix(Tensor(np.zeros((4, 2))), "eval")


class TestSTBlock:
    def test_zero_weights_exact_identity(self):
        blk = make_block()
        zero_params(blk.params())
        x = Tensor(np.random.default_rng(7).normal(size=(4, 3)))
        y = blk.forward(x, "eval")
        assert y.data.tobytes() == x.data.tobytes()

    def test_zero_weights_identity_jacobian(self):
        blk = make_block()
        zero_params(blk.params())
        x = Tensor(np.random.default_rng(8).normal(size=(4, 3)))
        with Graph() as g:
            flat = T.reshape(blk.forward(x, "eval"), (12, 1))
            for k in range(12):
                x.grad = None
                g.backward(T.sum_all(T.slice_rows(flat, k, k + 1)))
                expect = np.zeros(12)
                expect[k] = 1.0
                np.testing.assert_array_equal(x.grad.reshape(-1), expect)

    def test_matches_compositional_oracle_bitwise(self):
        blk = make_block(seed=10)
        x = Tensor(np.random.default_rng(11).normal(size=(4, 3)))
        inner = T.add(x, blk.temporal_mix(x, "eval"))
        manual = T.add(x, blk.channel_mix(inner, "eval"))
        direct = blk.forward(Tensor(x.data.copy()), "eval")
        assert manual.data.tobytes() == direct.data.tobytes()

    def test_shape_preserved(self):
        for l, c in [(1, 1), (4, 3), (7, 11), (16, 2)]:
            blk = make_block(l=l, c=c, seed=l * 31 + c)
            x = Tensor(np.random.default_rng(0).normal(size=(l, c)))
            assert blk.forward(x, "eval").data.shape == (l, c)

    def test_gradient_check(self):
        blk = make_block(seed=12)
        target = np.random.default_rng(13).normal(size=(4, 3))
        x = Tensor(np.random.default_rng(14).normal(size=(4, 3)))
        f = lambda v: T.mse_loss(blk.forward(v, "eval"), target)
        assert grad_check(f, x) < 1e-5
        for p in blk.params():
            assert grad_check(lambda _: T.mse_loss(blk.forward(x, "eval"), target),
                              p.tensor) < 1e-5

    def test_train_mode_dropout_changes_output(self):
        blk = make_block(dropout=0.5)
        x = Tensor(np.random.default_rng(15).normal(size=(4, 3)))
        y_eval = blk.forward(x, "eval").data
        y_train = blk.forward(x, "train", np.random.default_rng(0)).data
        assert not np.array_equal(y_eval, y_train)


class TestMixerStack:
    def test_zero_weights_passthrough_into_first_columns(self):
        cfg = MixerConfig(L=4, C=3, d=6, n_blocks=1)
        stack = MixerStack(cfg, np.random.default_rng(16))
        zero_params(stack.params())
        stack.out_proj.W.data[:3, :3] = np.eye(3)
        x = Tensor(np.random.default_rng(17).normal(size=(4, 3)))
        y = stack.forward(x).data
        np.testing.assert_array_equal(y[:, :3], x.data)
        np.testing.assert_array_equal(y[:, 3:], np.zeros((4, 3)))

    def test_default_width_is_256(self):
        cfg = MixerConfig(L=12, C=11, d=256)
        stack = MixerStack(cfg, np.random.default_rng(18))
        y = stack.forward(Tensor(np.random.default_rng(19).normal(size=(12, 11))))
        assert y.data.shape == (12, 256)

    def test_whole_stack_gradient_check(self):
        cfg = MixerConfig(L=4, C=3, d=5, n_blocks=2)
        stack = MixerStack(cfg, np.random.default_rng(20))
        target = np.random.default_rng(21).normal(size=(4, 5))
        x = Tensor(np.random.default_rng(22).normal(size=(4, 3)))
        assert grad_check(lambda v: T.mse_loss(stack.forward(v), target), x) < 1e-4
        for p in stack.params()[::3]:  # spot-check a spread of parameters
            assert grad_check(lambda _: T.mse_loss(stack.forward(x), target),
                              p.tensor) < 1e-4

    def test_parameter_names_follow_contract(self):
        cfg = MixerConfig(L=4, C=3, d=5, n_blocks=2)
        stack = MixerStack(cfg, np.random.default_rng(23))
        names = {p.name for p in stack.params()}
        assert "mixer.block0.f_T.lin1.W" in names
        assert "mixer.block1.f_C.lin2.b" in names
        assert "mixer.out_proj.W" in names
        assert len(names) == len(stack.params())  # unique

    def test_prenorm_flag(self):
        base = MixerConfig(L=4, C=3, d=5, n_blocks=1)
        pn = MixerConfig(L=4, C=3, d=5, n_blocks=1, prenorm=True)
        s1 = MixerStack(base, np.random.default_rng(24))
        s2 = MixerStack(pn, np.random.default_rng(24))
        x = Tensor(np.random.default_rng(25).normal(size=(4, 3)))
        y1, y2 = s1.forward(x).data, s2.forward(x).data
        assert y1.shape == y2.shape
        assert not np.allclose(y1, y2)
        target = np.random.default_rng(26).normal(size=(4, 5))
        assert grad_check(lambda v: T.mse_loss(s2.forward(v), target), x) < 1e-4

    def test_block_count_validation(self):
        with pytest.raises(ValueError, match="block"):
            MixerConfig(L=4, C=3, d=5, n_blocks=0)
