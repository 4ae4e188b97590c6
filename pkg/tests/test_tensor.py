"""
Tests for the autodiff tensor core: ops, broadcasting, gradients, RNG and
the DTNT record format.
"""
import numpy as np
import pytest

from errors import DatasetFormatError, ShapeError
from models.module import BatchNorm
from models.tensor import (BNState, Parameter, RngState, Tensor, batch_norm, concat, conv2d, default_dtype, ewise,
                           get_default_dtype, getitem, global_pool, layer_norm, log_softmax, matmul, no_grad,
                           one_hot, softmax, straight_through, tensor_from_bytes, tensor_to_bytes)

from helpers import GRAD_TOL, gradcheck, naive_batch_norm, naive_conv2d, projection_loss


# =============================================================================
# Elementwise ops and broadcasting
# =============================================================================

class TestElementwise:

    def test_broadcast_add_sums_gradient_over_broadcast_axes(self, float64):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.arange(3.0), requires_grad=True)
        (a + b).sum().backward()
        assert np.allclose(a.grad, np.ones((2, 3)))
        assert np.allclose(b.grad, [2.0, 2.0, 2.0])

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError, match=r'\(2, 3\).*\(4,\)'):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))

    def test_scalar_operands_keep_precision(self, float64):
        x = Tensor(np.ones(3))
        assert (x * 2.0 + 1.0).dtype == np.float64
        assert (1.0 - x).dtype == np.float64

    def test_mul_and_division_gradients(self, float64):
        a = Parameter(np.array([1.0, 2.0, 4.0]))
        b = Parameter(np.array([2.0, 0.5, 1.0]))
        assert gradcheck(lambda: (a * b / (b + 3.0)).sum(), [a, b], max_checks=None) < GRAD_TOL

    def test_relu_subgradient_zero_at_origin(self, float64):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        x.relu().sum().backward()
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_sigmoid_and_exp_log_gradients(self, float64):
        x = Parameter(np.array([-1.5, 0.2, 3.0]))
        assert gradcheck(lambda: (x.sigmoid() * x.exp().log()).sum(), [x], max_checks=None) < GRAD_TOL

    def test_ewise_dispatch(self, float64):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([10.0, 20.0]))
        assert ewise(a, b, 'add').data.tolist() == [[11.0, 22.0], [13.0, 24.0]]
        assert ewise(a, b, 'mul').data.tolist() == [[10.0, 40.0], [30.0, 80.0]]
        with pytest.raises(ValueError, match='unknown elementwise op'):
            ewise(a, b, 'div')


# =============================================================================
# Linear algebra, reductions and softmax
# =============================================================================

class TestReductions:

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r'\(2, 3\).*\(4, 5\)'):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_batched_matmul_gradient(self, float64):
        rng = np.random.default_rng(0)
        a = Parameter(rng.normal(size=(2, 3, 4)))
        b = Parameter(rng.normal(size=(4, 5)))
        loss = projection_loss((2, 3, 5))
        assert gradcheck(lambda: loss(a @ b), [a, b]) < GRAD_TOL

    def test_sum_and_mean_over_axes(self, float64):
        x = Parameter(np.arange(24.0).reshape(2, 3, 4))
        assert x.sum(axis=(0, 2)).numpy().tolist() == [60.0, 92.0, 124.0]
        x.mean(axis=1, keepdims=True).sum().backward()
        assert np.allclose(x.grad, 1.0 / 3.0)

    def test_softmax_rows_sum_to_one_for_large_logits(self):
        out = softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0], [5.0, 0.0, 0.0]])), axis=-1).numpy()
        assert np.all(np.isfinite(out))
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert out[0, 0] == pytest.approx(0.5)

    def test_softmax_empty_axis_raises(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((2, 0))))

    def test_softmax_and_log_softmax_gradients(self, float64):
        x = Parameter(np.random.default_rng(1).normal(size=(3, 5)))
        loss = projection_loss((3, 5))
        assert gradcheck(lambda: loss(softmax(x, axis=-1)), [x], max_checks=None) < GRAD_TOL
        assert gradcheck(lambda: loss(log_softmax(x, axis=-1)), [x], max_checks=None) < GRAD_TOL

    def test_log_softmax_matches_log_of_softmax(self, float64):
        x = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
        assert np.allclose(log_softmax(x).numpy(), np.log(softmax(x).numpy()), atol=1e-12)


# =============================================================================
# Shape ops
# =============================================================================

class TestShapeOps:

    def test_repeated_gather_accumulates_gradient(self, float64):
        table = Parameter(np.zeros((4, 2)))
        getitem(table, np.array([1, 1, 3])).sum().backward()
        assert table.grad[:, 0].tolist() == [0.0, 2.0, 0.0, 1.0]

    def test_concat_splits_gradient_in_order(self, float64):
        a = Parameter(np.ones((2, 1)))
        b = Parameter(np.ones((2, 3)))
        out = concat([a, b], axis=-1)
        assert out.shape == (2, 4)
        (out * Tensor(np.arange(4.0))).sum().backward()
        assert a.grad.tolist() == [[0.0], [0.0]]
        assert b.grad.tolist() == [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]

    def test_concat_mismatch_raises(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=-1)

    def test_reshape_and_transpose_gradients(self, float64):
        x = Parameter(np.random.default_rng(3).normal(size=(2, 3, 4)))
        loss = projection_loss((4, 6))
        assert gradcheck(lambda: loss(x.transpose(2, 0, 1).reshape(4, 6)), [x]) < GRAD_TOL

    def test_straight_through_forward_hard_backward_soft(self, float64):
        soft = Tensor(np.array([[0.2, 0.8]]), requires_grad=True)
        out = straight_through(np.array([[0.0, 1.0]]), soft)
        assert out.numpy().tolist() == [[0.0, 1.0]]
        (out * Tensor(np.array([[3.0, 5.0]]))).sum().backward()
        assert soft.grad.tolist() == [[3.0, 5.0]]

    def test_one_hot(self):
        assert one_hot(np.array([2, 0]), 3).tolist() == [[0, 0, 1], [1, 0, 0]]


# =============================================================================
# Convolution and normalisation
# =============================================================================

class TestConvolution:

    @pytest.mark.parametrize('kernel', [1, 3])
    def test_conv2d_matches_loop_reference(self, float64, kernel):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 4, 5, 3))
        w = rng.normal(size=(kernel, kernel, 3, 2))
        out = conv2d(Tensor(x), Tensor(w)).numpy()
        assert out.shape == (2, 4, 5, 2)
        assert np.allclose(out, naive_conv2d(x, w), atol=1e-10)

    def test_conv2d_gradient(self, float64):
        rng = np.random.default_rng(5)
        x = Parameter(rng.normal(size=(1, 3, 3, 2)))
        w = Parameter(rng.normal(size=(3, 3, 2, 2)))
        loss = projection_loss((1, 3, 3, 2))
        assert gradcheck(lambda: loss(conv2d(x, w)), [x, w]) < GRAD_TOL

    def test_conv2d_rejects_other_kernel_sizes(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 5, 5, 1))), Tensor(np.ones((5, 5, 1, 1))))

    def test_batch_norm_train_normalises_and_updates_running_stats(self, float64):
        x = np.random.default_rng(6).normal(2.0, 3.0, size=(4, 3, 3, 2))
        bn = BatchNorm(2, momentum=0.1)
        out = bn.forward(Tensor(x)).numpy()
        assert np.allclose(out, naive_batch_norm(x, np.ones(2), np.zeros(2)), atol=1e-10)
        count = 4 * 3 * 3
        assert np.allclose(bn.state.running_mean, 0.1 * x.mean(axis=(0, 1, 2)))
        expected_var = 0.9 + 0.1 * x.var(axis=(0, 1, 2)) * count / (count - 1)
        assert np.allclose(bn.state.running_var, expected_var)

    def test_batch_norm_eval_uses_running_stats(self, float64):
        gamma, beta = Parameter(np.full(2, 2.0)), Parameter(np.full(2, 1.0))
        state = BNState(gamma, beta)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 1.0])
        x = np.ones((1, 1, 1, 2))
        out = batch_norm(Tensor(x), state, 'eval').numpy().reshape(-1)
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(2.0 * 2.0 / np.sqrt(1.0 + 1e-5) + 1.0)

    def test_batch_norm_gradient(self, float64):
        rng = np.random.default_rng(7)
        x = Parameter(rng.normal(size=(2, 2, 2, 3)))
        bn = BatchNorm(3)
        loss = projection_loss((2, 2, 2, 3))
        assert gradcheck(lambda: loss(bn.forward(x)), [x, bn.state.gamma, bn.state.beta]) < GRAD_TOL

    def test_batch_norm_single_value_per_channel_raises(self):
        with pytest.raises(ShapeError):
            BatchNorm(2).forward(Tensor(np.ones((1, 1, 1, 2))))

    def test_layer_norm_gradient(self, float64):
        rng = np.random.default_rng(8)
        x = Parameter(rng.normal(size=(2, 3, 4)))
        gamma, beta = Parameter(rng.normal(size=4)), Parameter(rng.normal(size=4))
        loss = projection_loss((2, 3, 4))
        assert gradcheck(lambda: loss(layer_norm(x, gamma, beta)), [x, gamma, beta]) < GRAD_TOL

    def test_global_pool_domains(self):
        x = Tensor(np.arange(16.0).reshape(1, 2, 2, 4))
        assert global_pool(x, 'spatial').shape == (1, 4)
        assert global_pool(x, 'channel').shape == (1, 2, 2)
        assert global_pool(x, 'channel').numpy()[0, 0, 0] == pytest.approx(1.5)


# =============================================================================
# Graph bookkeeping, precision and RNG
# =============================================================================

class TestGraph:

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_gradients_accumulate_until_zeroed(self, float64):
        x = Parameter(np.ones(2))
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        assert x.grad.tolist() == [6.0, 6.0]
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_gradient(self, float64):
        x = Parameter(np.array([2.0]))
        y = x * x
        (y + y * x).sum().backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(16.0)

    def test_no_grad_records_nothing(self):
        x = Parameter(np.ones(2))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert (x * 2.0).requires_grad

    def test_default_dtype_context(self):
        assert get_default_dtype() == np.float32
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_rng_streams_are_reproducible_and_independent(self):
        a = RngState(5, stream=1).uniform((4,))
        b = RngState(5, stream=1).uniform((4,))
        c = RngState(5, stream=2).uniform((4,))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_rng_counter_advances(self):
        state = RngState(0)
        before = state.counter
        state.normal((10,))
        assert state.counter > before

    def test_gumbel_samples_are_finite(self):
        assert np.all(np.isfinite(RngState(3).gumbel((1000,))))


class TestTensorRecords:

    def test_round_trip_bitwise(self):
        array = np.random.default_rng(9).normal(size=(2, 3, 4)).astype(np.float32)
        decoded, end = tensor_from_bytes(tensor_to_bytes(array))
        assert decoded.tobytes() == array.tobytes()
        assert end == 4 + 4 + 3 * 4 + array.size * 4

    def test_scalar_round_trip(self):
        decoded, _ = tensor_from_bytes(tensor_to_bytes(np.float32(2.5)))
        assert decoded.shape == ()
        assert float(decoded) == 2.5

    def test_bad_magic_names_offset(self):
        payload = b'XXXX' + tensor_to_bytes(np.ones(2, dtype=np.float32))[4:]
        with pytest.raises(DatasetFormatError, match='byte offset 0'):
            tensor_from_bytes(payload)

    def test_truncated_data_names_offset(self):
        payload = tensor_to_bytes(np.ones(4, dtype=np.float32))[:-3]
        with pytest.raises(DatasetFormatError, match='byte offset 12'):
            tensor_from_bytes(payload)
