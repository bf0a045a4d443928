import numpy as np
import pytest

from prl import autograd as ag
from prl.autograd import BatchSizeError, ShapeError, Tensor

from helpers import assert_grads_close, max_rel_error, numerical_grad


# ---------------------------------------------------------------------------
# forward values


class TestLinear:
    def test_identity_weight(self):
        out = ag.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]),
                        Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_dot_product(self):
        out = ag.linear(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]), Tensor([5.0]))
        np.testing.assert_allclose(out.data, [[16.0]])

    def test_wide_transition_shape(self):
        rng = np.random.default_rng(0)
        out = ag.linear(Tensor(rng.standard_normal((7, 103))),
                        Tensor(rng.standard_normal((103, 500))),
                        Tensor(np.zeros(500)))
        assert out.data.shape == (7, 500)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 4\)"):
            ag.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))),
                      Tensor(np.zeros(4)))


class TestPointwise:
    def test_relu_signs(self):
        out = ag.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_all_negative(self):
        out = ag.relu(Tensor([-3.0, -0.5, -1e-9]))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_relu_subgradient_at_zero(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        ag.backward(ag.reduce_sum(ag.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid_symmetry_point(self):
        assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_of_one(self):
        np.testing.assert_allclose(ag.sigmoid(Tensor([1.0])).data[0],
                                   0.7310585786, atol=1e-9)

    def test_sigmoid_saturation_stays_positive(self):
        val = ag.sigmoid(Tensor([-30.0])).data[0]
        assert 0.0 < val < 1e-6

    def test_sigmoid_no_overflow_far_out(self):
        out = ag.sigmoid(Tensor([-1e4, 1e4]))
        assert np.all(np.isfinite(out.data))
        assert np.all((out.data >= 0.0) & (out.data <= 1.0))


class TestLayerNorm:
    def test_constant_row_collapses_to_zeros(self):
        out = ag.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_known_row(self):
        out = ag.layer_norm(Tensor([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_allclose(
            out.data[0], [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3)

    def test_sqrt_n_bound(self):
        rng = np.random.default_rng(1)
        for width in (2, 3, 5, 17, 64, 511):
            x = rng.standard_normal((20, width)) * rng.uniform(0.01, 100.0)
            out = ag.layer_norm(Tensor(x))
            assert np.all(np.abs(out.data) <= np.sqrt(width))

    def test_shift_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 9))
        base = ag.layer_norm(Tensor(x)).data
        for a, b in ((2.0, 0.0), (0.5, 3.0), (1000.0, 7.0)):
            moved = ag.layer_norm(Tensor(a * x + b)).data
            np.testing.assert_allclose(moved, base, atol=1e-6)

    def test_rejects_1d(self):
        with pytest.raises(ShapeError):
            ag.layer_norm(Tensor([1.0, 2.0]))


class TestBatchNorm:
    def _state(self, channels):
        return np.zeros(channels), np.ones(channels)

    def test_eval_identity_with_unit_stats(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 4, 4))
        rm, rv = self._state(3)
        out = ag.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            rm, rv, training=False)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_train_normalizes_per_channel(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 3, 5, 5)) * 2.0 + 1.0
        rm, rv = self._state(3)
        out = ag.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            rm, rv, training=True)
        means = out.data.mean(axis=(0, 2, 3))
        stds = out.data.std(axis=(0, 2, 3))
        np.testing.assert_allclose(means, 0.0, atol=1e-6)
        np.testing.assert_allclose(stds, 1.0, atol=1e-6)

    def test_running_stats_momentum_update(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 2, 3, 3)) + 5.0
        rm, rv = self._state(2)
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        first = ag.batch_norm(Tensor(x), gain, bias, rm, rv, training=True)
        rm_after_one = rm.copy()
        second = ag.batch_norm(Tensor(x), gain, bias, rm, rv, training=True)
        np.testing.assert_array_equal(first.data, second.data)
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(rm_after_one, 0.1 * mu)
        np.testing.assert_allclose(rm, 0.9 * (0.1 * mu) + 0.1 * mu)
        np.testing.assert_allclose(rv, 0.9 * (0.9 * 1.0 + 0.1 * var) + 0.1 * var)

    def test_train_needs_batch_of_two(self):
        rm, rv = self._state(1)
        with pytest.raises(BatchSizeError):
            ag.batch_norm(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)),
                          Tensor(np.zeros(1)), rm, rv, training=True)


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        out = ag.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x)

    def test_all_ones_summation(self):
        x = np.ones((1, 1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        out = ag.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))

    def test_stride_and_padding_shapes(self):
        x = np.zeros((3, 4, 16, 16))
        w = np.zeros((8, 4, 3, 3))
        out = ag.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(8)), stride=2, padding=1)
        assert out.data.shape == (3, 8, 8, 8)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="larger"):
            ag.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))),
                      Tensor(np.zeros(1)))


class TestBceLoss:
    def test_matching_prediction_is_near_zero(self):
        pred = Tensor([[1e-9, 1.0 - 1e-9]])
        target = np.array([[0.0, 1.0]])
        assert ag.bce_loss(pred, target).item() <= 1e-6

    def test_uncertain_prediction_is_ln2(self):
        loss = ag.bce_loss(Tensor([[0.5]]), np.array([[1.0]]))
        np.testing.assert_allclose(loss.item(), np.log(2.0), atol=1e-12)

    def test_rejects_non_binary_targets(self):
        with pytest.raises(ValueError, match="0 and 1"):
            ag.bce_loss(Tensor([[0.5]]), np.array([[0.3]]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.bce_loss(Tensor([[0.5, 0.5]]), np.array([[1.0]]))

    def test_weight_mask_scales_elements(self):
        pred = Tensor([[0.5, 0.5]])
        target = np.array([[1.0, 1.0]])
        plain = ag.bce_loss(pred, target).item()
        masked = ag.bce_loss(pred, target, weight_mask=np.array([[2.0, 0.0]])).item()
        np.testing.assert_allclose(masked, plain)  # mean of (2L, 0) == mean of (L, L)


# ---------------------------------------------------------------------------
# backward mechanics


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ag.backward(ag.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            ag.backward(ag.relu(x))

    def test_grads_accumulate_without_zeroing(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = ag.reduce_sum(ag.relu(x))
        ag.backward(loss)
        once = x.grad.copy()
        ag.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ag.no_grad():
            out = ag.relu(x)
        assert not out.requires_grad and out._grad_fn is None

    def test_shared_weight_sums_contributions(self):
        # One weight applied at three unrolled steps; checked against finite
        # differences of the whole composition.
        rng = np.random.default_rng(7)
        h = rng.standard_normal((2, 4))
        w = rng.standard_normal((4, 4)) * 0.5
        b = rng.standard_normal(4) * 0.1
        probe = rng.standard_normal((2, 4))

        def forward():
            ht = Tensor(h)
            for _ in range(3):
                ht = ag.add(ht, ag.relu(ag.linear(ht, Tensor(w), Tensor(b))))
            return ag.reduce_sum(ag.mul(ht, Tensor(probe))).item()

        wt = Tensor(w, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        ht = Tensor(h, requires_grad=True)
        cur = ht
        for _ in range(3):
            cur = ag.add(cur, ag.relu(ag.linear(cur, wt, bt)))
        ag.backward(ag.reduce_sum(ag.mul(cur, Tensor(probe))))
        numeric = numerical_grad(forward, [h, w, b])
        assert_grads_close([ht.grad, wt.grad, bt.grad], numeric)


# ---------------------------------------------------------------------------
# gradient checks for every primitive


def _scalarize(out, probe):
    return ag.reduce_sum(ag.mul(out, Tensor(probe)))


class TestGradientChecks:
    def test_add_mul_scale_reshape_concat(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        probe = rng.standard_normal((2, 18))

        def build(at, bt):
            joined = ag.concat([ag.add(at, bt), ag.mul(at, bt),
                                ag.scale(at, -1.7)], axis=1)
            return _scalarize(ag.reshape(joined, (2, 18)), probe)

        at = Tensor(a, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        ag.backward(build(at, bt))
        numeric = numerical_grad(lambda: build(Tensor(a), Tensor(b)).item(), [a, b])
        assert_grads_close([at.grad, bt.grad], numeric)

    def test_linear(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 2))
        b = rng.standard_normal(2)
        probe = rng.standard_normal((3, 2))

        xt, wt, bt = (Tensor(arr, requires_grad=True) for arr in (x, w, b))
        ag.backward(_scalarize(ag.linear(xt, wt, bt), probe))
        numeric = numerical_grad(
            lambda: _scalarize(ag.linear(Tensor(x), Tensor(w), Tensor(b)), probe).item(),
            [x, w, b])
        assert_grads_close([xt.grad, wt.grad, bt.grad], numeric)

    def test_relu_and_sigmoid(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((4, 6)) * 2.0
        probe = rng.standard_normal((4, 6))

        def build(xt):
            return _scalarize(ag.sigmoid(ag.relu(xt)), probe)

        xt = Tensor(x, requires_grad=True)
        ag.backward(build(xt))
        numeric = numerical_grad(lambda: build(Tensor(x)).item(), [x])
        assert_grads_close([xt.grad], numeric)

    def test_layer_norm(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 7)) * 3.0 + 1.0
        probe = rng.standard_normal((5, 7))

        xt = Tensor(x, requires_grad=True)
        ag.backward(_scalarize(ag.layer_norm(xt), probe))
        numeric = numerical_grad(
            lambda: _scalarize(ag.layer_norm(Tensor(x)), probe).item(), [x])
        assert_grads_close([xt.grad], numeric)

    def test_batch_norm_train_mode(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 3, 2, 2))
        gain = rng.uniform(0.5, 1.5, 3)
        bias = rng.standard_normal(3) * 0.2
        probe = rng.standard_normal((4, 3, 2, 2))

        def build(xt, gt, bt):
            rm, rv = np.zeros(3), np.ones(3)
            return _scalarize(ag.batch_norm(xt, gt, bt, rm, rv, training=True), probe)

        xt, gt, bt = (Tensor(arr, requires_grad=True) for arr in (x, gain, bias))
        ag.backward(build(xt, gt, bt))
        numeric = numerical_grad(
            lambda: build(Tensor(x), Tensor(gain), Tensor(bias)).item(),
            [x, gain, bias])
        assert_grads_close([xt.grad, gt.grad, bt.grad], numeric)

    def test_batch_norm_eval_mode(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 2, 3, 3))
        gain = rng.uniform(0.5, 1.5, 2)
        bias = rng.standard_normal(2) * 0.2
        rm = rng.standard_normal(2) * 0.3
        rv = rng.uniform(0.5, 2.0, 2)
        probe = rng.standard_normal((2, 2, 3, 3))

        def build(xt, gt, bt):
            return _scalarize(
                ag.batch_norm(xt, gt, bt, rm.copy(), rv.copy(), training=False), probe)

        xt, gt, bt = (Tensor(arr, requires_grad=True) for arr in (x, gain, bias))
        ag.backward(build(xt, gt, bt))
        numeric = numerical_grad(
            lambda: build(Tensor(x), Tensor(gain), Tensor(bias)).item(),
            [x, gain, bias])
        assert_grads_close([xt.grad, gt.grad, bt.grad], numeric)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
    def test_conv2d(self, stride, padding):
        rng = np.random.default_rng(14 + stride)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3)) * 0.5
        b = rng.standard_normal(4) * 0.1
        out_shape = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                              padding=padding).data.shape
        probe = rng.standard_normal(out_shape)

        def build(xt, wt, bt):
            return _scalarize(ag.conv2d(xt, wt, bt, stride=stride, padding=padding),
                              probe)

        xt, wt, bt = (Tensor(arr, requires_grad=True) for arr in (x, w, b))
        ag.backward(build(xt, wt, bt))
        numeric = numerical_grad(
            lambda: build(Tensor(x), Tensor(w), Tensor(b)).item(), [x, w, b])
        assert_grads_close([xt.grad, wt.grad, bt.grad], numeric)

    def test_bce_loss(self):
        rng = np.random.default_rng(20)
        pred = rng.uniform(0.05, 0.95, (4, 2))
        target = rng.integers(0, 2, (4, 2)).astype(np.float64)
        mask = rng.uniform(0.5, 2.0, (4, 2))

        pt = Tensor(pred, requires_grad=True)
        ag.backward(ag.bce_loss(pt, target, weight_mask=mask))
        numeric = numerical_grad(
            lambda: ag.bce_loss(Tensor(pred), target, weight_mask=mask).item(), [pred])
        assert_grads_close([pt.grad], numeric)

    def test_reduce_mean(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((3, 4))
        xt = Tensor(x, requires_grad=True)
        ag.backward(ag.reduce_mean(xt))
        numeric = numerical_grad(lambda: ag.reduce_mean(Tensor(x)).item(), [x])
        assert_grads_close([xt.grad], numeric)


def test_forward_values_stay_finite():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((4, 8)) * 50.0
    out = ag.sigmoid(ag.layer_norm(ag.relu(Tensor(x))))
    assert np.all(np.isfinite(out.data))
