"""Autodiff substrate: known values, invariants, finite-difference checks."""
import numpy as np
import pytest

from chargecast import tensor as T
from chargecast.tensor import Graph, Tensor, grad_check


def scalar_loss(t):
    return T.sum_all(t)


class TestKnownValues:
    def test_linear_vector(self):
        x = Tensor([1.0, 2.0])
        w = Tensor([[1.0, 1.0], [0.0, 1.0]])
        b = Tensor([0.0, 1.0])
        y = T.linear(x, w, b)
        np.testing.assert_array_equal(y.data, [3.0, 3.0])

    def test_linear_batch_matches_per_row(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        w = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(rng.normal(size=4))
        batched = T.linear(Tensor(x), w, b).data
        for i in range(5):
            row = T.linear(Tensor(x[i]), w, b).data
            np.testing.assert_allclose(batched[i], row, atol=1e-14)

    def test_mse_known_value(self):
        loss = T.mse_loss(Tensor([0.0, 0.0]), np.array([1.0, 3.0]))
        assert loss.item() == 5.0

    def test_relu_clamps(self):
        y = T.relu(Tensor([-2.0, 0.0, 3.5]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 3.5])

    def test_softmax_rows_normalize(self):
        rng = np.random.default_rng(1)
        y = T.softmax_lastdim(Tensor(rng.normal(size=(6, 9)))).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(6), atol=1e-12)
        assert np.all(y > 0)

    def test_softmax_shift_invariant(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 7))
        a = T.softmax_lastdim(Tensor(x)).data
        b = T.softmax_lastdim(Tensor(x + 123.25)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_large_magnitude_stable(self):
        y = T.softmax_lastdim(Tensor([[1e4, 1e4 + 1.0]])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y.sum(), 1.0, atol=1e-12)

    def test_cummean_rows(self):
        x = Tensor(np.array([[1.0], [3.0], [5.0]]))
        y = T.cummean_rows(x).data
        np.testing.assert_allclose(y, [[1.0], [2.0], [3.0]])

    def test_conv1d_matches_reference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(10, 2))
        k = rng.normal(size=(3, 2, 4))
        y = T.conv1d_time(Tensor(x), Tensor(k)).data
        # independent reference: explicit zero-padded cross-correlation
        pad = 1
        xp = np.pad(x, ((pad, pad), (0, 0)))
        ref = np.zeros((10, 4))
        for t in range(10):
            for tau in range(3):
                ref[t] += xp[t + tau] @ k[tau]
        np.testing.assert_allclose(y, ref, atol=1e-13)

    def test_conv1d_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            T.conv1d_time(Tensor(np.zeros((5, 2))), Tensor(np.zeros((4, 2, 2))))

    def test_gather_scatter_roundtrip(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        idx = np.array([2, 0])
        rows = T.gather_rows(x, idx)
        np.testing.assert_array_equal(rows.data, x.data[idx])
        y = T.scatter_rows(x, idx, Tensor(np.zeros((2, 3))))
        assert y.data[2].sum() == 0 and y.data[0].sum() == 0
        np.testing.assert_array_equal(y.data[1], x.data[1])


class TestDropout:
    def test_eval_is_bit_identical(self):
        x = Tensor(np.random.default_rng(4).normal(size=(8, 8)))
        y = T.dropout(x, 0.5, "eval")
        assert y.data.tobytes() == x.data.tobytes()

    def test_train_rate_zero_is_identity(self):
        x = Tensor(np.random.default_rng(5).normal(size=(8, 8)))
        y = T.dropout(x, 0.0, "train", np.random.default_rng(0))
        assert y.data.tobytes() == x.data.tobytes()

    def test_train_preserves_mean(self):
        rng = np.random.default_rng(6)
        x = Tensor(np.ones((400, 400)))
        y = T.dropout(x, 0.3, "train", rng).data
        assert abs(y.mean() - 1.0) < 0.01

    def test_train_scales_survivors(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.full((50, 50), 2.0))
        y = T.dropout(x, 0.25, "train", rng).data
        kept = y[y != 0.0]
        np.testing.assert_allclose(kept, 2.0 / 0.75)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate_rejected(self, rate):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), rate, "train", np.random.default_rng(0))

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            T.dropout(Tensor([1.0]), 0.5, "test")


class TestGraphMechanics:
    def test_accumulation_doubles_on_second_backward(self):
        x = Tensor([1.0, -2.0, 3.0])
        with Graph() as g:
            loss = T.mse_loss(T.scale(x, 2.0), np.zeros(3))
            g.backward(loss)
            once = x.grad.copy()
            g.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_zero_grad_resets(self):
        x = Tensor([1.0])
        with Graph() as g:
            g.backward(T.sum_all(x))
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(3))
        with Graph() as g:
            y = T.relu(x)
            with pytest.raises(ValueError, match="scalar"):
                g.backward(y)

    def test_foreign_loss_rejected(self):
        x = Tensor(np.ones(3))
        with Graph():
            loss = T.sum_all(x)
        with Graph() as g2:
            with pytest.raises(ValueError, match="graph"):
                g2.backward(loss)

    def test_diamond_reuse_sums_paths(self):
        # y = x + x  =>  dy/dx = 2
        x = Tensor([3.0])
        with Graph() as g:
            y = T.add(x, x)
            g.backward(T.sum_all(y))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_no_graph_forward_records_nothing(self):
        x = Tensor([1.0, 2.0])
        y = T.relu(x)
        assert y.grad is None and x.grad is None

    def test_checked_mode_names_offending_op(self):
        x = Tensor([1e308])
        with np.errstate(over="ignore"):
            with pytest.raises(T.NonFiniteError, match="scale"):
                T.scale(x, 1e10)

    def test_checked_mode_can_be_disabled(self):
        x = Tensor([1e308])
        with np.errstate(over="ignore"), T.checked(False):
            y = T.scale(x, 1e10)
        assert np.isinf(y.data[0])

    def test_nested_graph_rejected(self):
        with Graph():
            with pytest.raises(RuntimeError):
                with Graph():
                    pass


def _seeded(shape, seed, spread=1.0):
    return Tensor(spread * np.random.default_rng(seed).normal(size=shape))


FD_TOL = 1e-6


class TestGradChecks:
    """Central finite differences vs the tape, per primitive."""

    def test_linear_wrt_input(self):
        w = _seeded((4, 3), 10)
        b = _seeded((4,), 11)
        t = np.random.default_rng(12).normal(size=(5, 4))
        f = lambda x: T.mse_loss(T.linear(x, w, b), t)
        assert grad_check(f, _seeded((5, 3), 13)) < FD_TOL

    def test_linear_wrt_weight_and_bias(self):
        x = _seeded((5, 3), 14)
        w = _seeded((4, 3), 15)
        b = _seeded((4,), 16)
        t = np.random.default_rng(17).normal(size=(5, 4))
        assert grad_check(lambda _: T.mse_loss(T.linear(x, w, b), t), w) < FD_TOL
        assert grad_check(lambda _: T.mse_loss(T.linear(x, w, b), t), b) < FD_TOL

    def test_relu(self):
        x = _seeded((6, 4), 18)
        x.data[np.abs(x.data) < 0.05] = 0.5  # keep clear of the kink
        assert grad_check(lambda v: T.sum_all(T.relu(T.scale(v, 1.7))), x) < FD_TOL

    def test_softmax(self):
        t = np.random.default_rng(19).normal(size=(3, 6))
        f = lambda x: T.mse_loss(T.softmax_lastdim(x), t)
        assert grad_check(f, _seeded((3, 6), 20)) < FD_TOL

    def test_matmul_both_sides(self):
        a = _seeded((4, 3), 21)
        b = _seeded((3, 5), 22)
        t = np.random.default_rng(23).normal(size=(4, 5))
        assert grad_check(lambda _: T.mse_loss(T.matmul(a, b), t), a) < FD_TOL
        assert grad_check(lambda _: T.mse_loss(T.matmul(a, b), t), b) < FD_TOL

    def test_conv1d_all_inputs(self):
        x = _seeded((9, 3), 24)
        k = _seeded((5, 3, 2), 25)
        b = _seeded((2,), 26)
        t = np.random.default_rng(27).normal(size=(9, 2))
        for leaf in (x, k, b):
            assert grad_check(lambda _: T.mse_loss(T.conv1d_time(x, k, b), t), leaf) < FD_TOL

    def test_cummean(self):
        t = np.random.default_rng(28).normal(size=(7, 2))
        f = lambda x: T.mse_loss(T.cummean_rows(x), t)
        assert grad_check(f, _seeded((7, 2), 29)) < FD_TOL

    def test_mean_and_broadcast(self):
        t = np.random.default_rng(30).normal(size=(5, 3))
        f = lambda x: T.mse_loss(T.broadcast_rows(T.mean_rows(x), 5), t)
        assert grad_check(f, _seeded((4, 3), 31)) < FD_TOL

    def test_gather(self):
        idx = np.array([0, 2, 2, 1])
        t = np.random.default_rng(32).normal(size=(4, 3))
        f = lambda x: T.mse_loss(T.gather_rows(x, idx), t)
        assert grad_check(f, _seeded((5, 3), 33)) < FD_TOL

    def test_scatter(self):
        idx = np.array([1, 3])
        rows = _seeded((2, 3), 34)
        base = _seeded((5, 3), 35)
        t = np.random.default_rng(36).normal(size=(5, 3))
        f = lambda _: T.mse_loss(T.scatter_rows(base, idx, rows), t)
        assert grad_check(f, base) < FD_TOL
        assert grad_check(f, rows) < FD_TOL

    def test_slice_concat(self):
        t = np.random.default_rng(37).normal(size=(6, 2))
        def f(x):
            head = T.slice_rows(x, 0, 2)
            tail = T.slice_rows(x, 2, 6)
            return T.mse_loss(T.concat_rows([tail, head]), t)
        assert grad_check(f, _seeded((6, 2), 38)) < FD_TOL

    def test_concat_cols(self):
        a = _seeded((4, 2), 39)
        b = _seeded((4, 3), 40)
        t = np.random.default_rng(41).normal(size=(4, 5))
        f = lambda _: T.mse_loss(T.concat_cols([a, b]), t)
        assert grad_check(f, a) < FD_TOL
        assert grad_check(f, b) < FD_TOL

    def test_transpose_reshape(self):
        t = np.random.default_rng(42).normal(size=(12,))
        f = lambda x: T.mse_loss(T.reshape(T.transpose2d(x), (12,)), t)
        assert grad_check(f, _seeded((3, 4), 43)) < FD_TOL

    def test_add_and_scale(self):
        c = np.random.default_rng(44).normal(size=(3, 3))
        t = np.random.default_rng(45).normal(size=(3, 3))
        f = lambda x: T.mse_loss(T.scale(T.add(x, c), -0.6), t)
        assert grad_check(f, _seeded((3, 3), 46)) < FD_TOL

    def test_dropout_eval_passthrough(self):
        t = np.random.default_rng(47).normal(size=(4, 4))
        f = lambda x: T.mse_loss(T.dropout(x, 0.4, "eval"), t)
        assert grad_check(f, _seeded((4, 4), 48)) < FD_TOL

    def test_layernorm(self):
        y = T.layernorm_lastdim(Tensor([[1.0, 3.0]])).data
        np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-5)
        t = np.random.default_rng(49).normal(size=(3, 5))
        f = lambda x: T.mse_loss(T.layernorm_lastdim(x), t)
        assert grad_check(f, _seeded((3, 5), 50)) < FD_TOL
