import numpy as np
import pytest

from stainseg import tensor as T


def conv2d_bruteforce(x, w, b, padding):
    """Direct-summation cross-correlation oracle (independent of the library path)."""
    N, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = H + 2 * padding - kh + 1
    Wo = W + 2 * padding - kw + 1
    out = np.zeros((N, Cout, Ho, Wo))
    for n in range(N):
        for o in range(Cout):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = 0.0
                    for c in range(Cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, c, y + i, xx + j] * w[o, c, i, j]
                    out[n, o, y, xx] = acc + b[o]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = T.Tensor(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
        y = T.conv2d(x, T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)), padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_all_ones_center(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        y = T.conv2d(x, w, T.Tensor(np.zeros(1)), padding=1)
        assert y.data[0, 0, 1, 1] == 9.0

    def test_pointwise_expansion_shape(self):
        # 1x1 layer expanding 3 channels to 6, as in the color-deconvolution front-end
        x = T.Tensor(np.random.default_rng(0).random((1, 3, 2, 2)))
        w = T.Tensor(np.random.default_rng(1).random((6, 3, 1, 1)))
        y = T.conv2d(x, w, T.Tensor(np.zeros(6)), padding=0)
        assert y.data.shape == (1, 6, 2, 2)

    @pytest.mark.parametrize("pad,k", [(0, 3), (1, 3), (2, 5), (0, 1)])
    def test_matches_bruteforce(self, pad, k):
        rng = np.random.default_rng(42 + pad + k)
        x = rng.standard_normal((2, 3, 6, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=pad)
        np.testing.assert_allclose(got.data, conv2d_bruteforce(x, w, b, pad), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4)))
        w = T.Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="Cin"):
            T.conv2d(x, w, T.Tensor(np.zeros(2)), padding=1)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.standard_normal(3), requires_grad=True)
        for wrt in (x, w, b):
            err = T.grad_check(lambda: (T.conv2d(x, w, b, padding=1) * T.conv2d(x, w, b, padding=1)).sum(), wrt)
            assert err < 1e-6


class TestConvTranspose2d:
    def test_single_pixel_broadcast(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 3.5))
        w = T.Tensor(np.ones((1, 1, 2, 2)))
        y = T.conv_transpose2d(x, w, T.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 3.5))

    def test_shape_doubles(self):
        x = T.Tensor(np.random.default_rng(3).random((1, 1, 2, 2)))
        w = T.Tensor(np.random.default_rng(4).random((1, 1, 2, 2)))
        y = T.conv_transpose2d(x, w, T.Tensor(np.zeros(1)))
        assert y.data.shape == (1, 1, 4, 4)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        b = T.Tensor(rng.standard_normal(3), requires_grad=True)
        for wrt in (x, w, b):
            err = T.grad_check(
                lambda: (T.conv_transpose2d(x, w, b) * T.conv_transpose2d(x, w, b)).sum(), wrt)
            assert err < 1e-6


class TestMaxPool2:
    def test_simple_block(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert T.maxpool2(x).data[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = T.Tensor(np.full((1, 2, 4, 4), 2.5))
        np.testing.assert_array_equal(T.maxpool2(x).data, np.full((1, 2, 2, 2), 2.5))

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError, match="even"):
            T.maxpool2(T.Tensor(np.zeros((1, 1, 3, 4))))

    def test_tie_routes_to_first(self):
        x = T.Tensor(np.array([[5.0, 5.0], [0.0, 0.0]]).reshape(1, 1, 2, 2), requires_grad=True)
        y = T.maxpool2(x)
        T.backward(y.sum())
        np.testing.assert_array_equal(x.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])

    def test_backward_bruteforce(self):
        # brute-force routing: grad goes only to each block's first max
        rng = np.random.default_rng(5)
        xv = rng.standard_normal((2, 3, 4, 6))
        x = T.Tensor(xv, requires_grad=True)
        T.backward(T.maxpool2(x).sum())
        expect = np.zeros_like(xv)
        for n in range(2):
            for c in range(3):
                for y in range(2):
                    for xx in range(3):
                        block = xv[n, c, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2]
                        flat = np.argmax(block)  # first occurrence, row-major
                        expect[n, c, 2 * y + flat // 2, 2 * xx + flat % 2] = 1.0
        np.testing.assert_array_equal(x.grad, expect)


class TestRelu:
    def test_values(self):
        x = T.Tensor(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(T.relu(x).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        x = T.Tensor(np.full((2, 2), -3.0), requires_grad=True)
        y = T.relu(x)
        T.backward(y.sum())
        assert not y.data.any() and not x.grad.any()

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(13)
        xv = rng.standard_normal(40)
        xv = xv[np.abs(xv) > 1e-3][:20]
        x = T.Tensor(xv, requires_grad=True)
        err = T.grad_check(lambda: (T.relu(x) * T.relu(x)).sum(), x)
        assert err < 1e-6


class TestBatchNorm:
    def test_constant_input_gives_beta(self):
        st = T.BatchNormState(3)
        x = T.Tensor(np.full((2, 3, 2, 2), 7.0))
        gamma = T.Tensor(np.array([2.0, -1.0, 0.5]))
        beta = T.Tensor(np.array([0.1, 0.2, 0.3]))
        y = T.batchnorm(x, gamma, beta, st, train=True)
        for c, b in enumerate([0.1, 0.2, 0.3]):
            np.testing.assert_allclose(y.data[:, c], b, atol=1e-9)

    def test_standardized_passthrough(self):
        rng = np.random.default_rng(8)
        xv = rng.standard_normal((4, 2, 3, 3))
        xv = (xv - xv.mean(axis=(0, 2, 3), keepdims=True)) / xv.std(axis=(0, 2, 3), keepdims=True)
        st = T.BatchNormState(2)
        y = T.batchnorm(T.Tensor(xv), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), st, train=True)
        np.testing.assert_allclose(y.data, xv, atol=1e-4)

    def test_train_output_standardized(self):
        rng = np.random.default_rng(9)
        x = T.Tensor(rng.standard_normal((3, 4, 5, 5)) * 3 + 1)
        st = T.BatchNormState(4)
        y = T.batchnorm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), st, train=True).data
        assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-10
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_eval_uses_running_stats(self):
        st = T.BatchNormState(1)
        rng = np.random.default_rng(10)
        for _ in range(100):
            T.batchnorm(T.Tensor(rng.standard_normal((4, 1, 4, 4)) * 2 + 5),
                        T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), st, train=True)
        x = T.Tensor(np.full((1, 1, 2, 2), 5.0))
        y = T.batchnorm(x, T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), st, train=False)
        assert abs(y.data.mean()) < 0.2  # running mean converged near 5

    def test_gradients(self):
        rng = np.random.default_rng(12)
        x = T.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        gamma = T.Tensor(rng.random(3) + 0.5, requires_grad=True)
        beta = T.Tensor(rng.standard_normal(3), requires_grad=True)
        # random per-element weighting: sum(y^2) alone is invariant under standardization
        r = T.Tensor(rng.standard_normal((2, 3, 2, 2)))

        def loss():
            st = T.BatchNormState(3)  # fresh state: keeps running-stat update out of the check
            y = T.batchnorm(x, gamma, beta, st, train=True)
            return ((y * r) * y).sum() + (y * r).sum()

        for wrt in (x, gamma, beta):
            assert T.grad_check(loss, wrt) < 1e-5

    def test_eval_gradients(self):
        rng = np.random.default_rng(14)
        st = T.BatchNormState(2)
        st.running_mean[:] = rng.standard_normal(2)
        st.running_var[:] = rng.random(2) + 0.5
        x = T.Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        gamma = T.Tensor(rng.random(2) + 0.5, requires_grad=True)
        beta = T.Tensor(rng.standard_normal(2), requires_grad=True)

        def loss():
            y = T.batchnorm(x, gamma, beta, st, train=False)
            return (y * y).sum()

        for wrt in (x, gamma, beta):
            assert T.grad_check(loss, wrt) < 1e-6


class TestSoftmaxChannels:
    def test_uniform_logits(self):
        x = T.Tensor(np.zeros((1, 4, 1, 1)))
        np.testing.assert_allclose(T.softmax_channels(x).data.ravel(), 0.25)

    def test_shift_invariance(self):
        rng = np.random.default_rng(15)
        xv = rng.standard_normal((2, 4, 3, 3))
        a = T.softmax_channels(T.Tensor(xv)).data
        b = T.softmax_channels(T.Tensor(xv + 17.3)).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_peaked_value(self):
        x = T.Tensor(np.array([10.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1, 1))
        p = T.softmax_channels(x).data[0, 0, 0, 0]
        np.testing.assert_allclose(p, np.exp(10) / (np.exp(10) + 3), rtol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(16)
        p = T.softmax_channels(T.Tensor(rng.standard_normal((3, 5, 4, 4)) * 10)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert (p > 0).all() and (p < 1).all()

    def test_gradient(self):
        rng = np.random.default_rng(17)
        x = T.Tensor(rng.standard_normal((1, 4, 2, 2)), requires_grad=True)
        weights = rng.standard_normal((1, 4, 2, 2))

        def loss():
            return (T.softmax_channels(x) * T.Tensor(weights)).sum()

        assert T.grad_check(loss, x) < 1e-6


class TestWeightedCrossEntropy:
    def test_perfect_prediction(self):
        p = np.full((1, 4, 2, 2), 1e-9)
        labels = np.array([[0, 1], [2, 3]]).reshape(1, 2, 2)
        for y in range(2):
            for x in range(2):
                p[0, labels[0, y, x], y, x] = 1 - 3e-9
        loss = T.weighted_cross_entropy(T.Tensor(p), labels, [1, 1, 1, 1])
        assert float(loss.data) < 1e-8

    def test_uniform_prediction_ln4(self):
        p = T.Tensor(np.full((1, 4, 3, 3), 0.25))
        labels = np.random.default_rng(18).integers(0, 4, (1, 3, 3))
        loss = T.weighted_cross_entropy(p, labels, [1, 1, 1, 1])
        np.testing.assert_allclose(float(loss.data), np.log(4), atol=1e-12)

    def test_all_ignored_zero_loss_zero_grad(self):
        logits = T.Tensor(np.random.default_rng(19).standard_normal((1, 4, 2, 2)), requires_grad=True)
        p = T.softmax_channels(logits)
        labels = np.full((1, 2, 2), 255)
        loss = T.weighted_cross_entropy(p, labels, [1, 1, 1, 1])
        assert float(loss.data) == 0.0
        T.backward(loss)
        assert not logits.grad.any()

    def test_matches_plain_mean_ce_bruteforce(self):
        # unit weights, no ignores: equals per-pixel mean cross-entropy on 4x4 grids
        rng = np.random.default_rng(20)
        for _ in range(5):
            p = T.softmax_channels(T.Tensor(rng.standard_normal((2, 4, 4, 4)))).data
            labels = rng.integers(0, 4, (2, 4, 4))
            loss = T.weighted_cross_entropy(T.Tensor(p), labels, [1, 1, 1, 1])
            acc = []
            for n in range(2):
                for y in range(4):
                    for x in range(4):
                        acc.append(-np.log(p[n, labels[n, y, x], y, x]))
            np.testing.assert_allclose(float(loss.data), np.mean(acc), rtol=1e-12)

    def test_weighted_with_ignores_bruteforce(self):
        rng = np.random.default_rng(21)
        w = [0.3, 0.9, 1.1, 2.5]
        p = T.softmax_channels(T.Tensor(rng.standard_normal((1, 4, 4, 4)))).data
        labels = rng.integers(0, 4, (1, 4, 4))
        labels[0, :2, :2] = 255
        loss = T.weighted_cross_entropy(T.Tensor(p), labels, w)
        acc, cnt = 0.0, 0
        for y in range(4):
            for x in range(4):
                l = labels[0, y, x]
                if l == 255:
                    continue
                acc += w[l] * -np.log(p[0, l, y, x])
                cnt += 1
        np.testing.assert_allclose(float(loss.data), acc / cnt, rtol=1e-12)

    def test_invalid_label_rejected(self):
        p = T.Tensor(np.full((1, 4, 1, 1), 0.25))
        with pytest.raises(ValueError, match="outside valid set"):
            T.weighted_cross_entropy(p, np.array([[[7]]]), [1, 1, 1, 1])

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(22)
        logits = T.Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
        labels = rng.integers(0, 4, (1, 3, 3))
        labels[0, 0, 0] = 255

        def loss():
            return T.weighted_cross_entropy(T.softmax_channels(logits), labels, [0.3, 0.9, 1.1, 2.5])

        assert T.grad_check(loss, logits) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.random.default_rng(23).random((3, 4)), requires_grad=True)
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_analytic(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x * 2.0)

    def test_double_backward_accumulates_exactly_2x(self):
        rng = np.random.default_rng(24)
        x = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        y = (x * x).sum()
        T.backward(y)
        once = x.grad.copy()
        T.backward(y)
        np.testing.assert_array_equal(x.grad, 2 * once)

    def test_shared_node_accumulates(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        y = x * 2.0
        z = (y + y).sum()  # dz/dx = 4
        T.backward(z)
        np.testing.assert_array_equal(x.grad, [4.0])


class TestSgdMomentum:
    def _param(self, v):
        return T.Parameter(value=T.Tensor(np.array([v])), name="p")

    def test_plain_sgd(self):
        p = self._param(1.0)
        p.value.grad = np.array([0.5])
        T.sgd_momentum_step([p], lr=0.1, mu=0.0)
        np.testing.assert_allclose(p.value.data, [0.95])

    def test_two_step_hand_recursion(self):
        # v1=1, th1=-0.1; v2=0.9+1=1.9, th2=-0.29
        p = self._param(0.0)
        p.value.grad = np.array([1.0])
        T.sgd_momentum_step([p], lr=0.1, mu=0.9)
        np.testing.assert_allclose(p.value.data, [-0.1])
        p.value.grad = np.array([1.0])
        T.sgd_momentum_step([p], lr=0.1, mu=0.9)
        np.testing.assert_allclose(p.velocity, [1.9])
        np.testing.assert_allclose(p.value.data, [-0.29])

    def test_momentum_carry_with_zero_grad(self):
        p = self._param(1.0)
        p.velocity[:] = 2.0
        p.value.grad = np.array([0.0])
        T.sgd_momentum_step([p], lr=0.1, mu=0.9)
        np.testing.assert_allclose(p.value.data, [1.0 - 0.1 * 0.9 * 2.0])

    def test_missing_grad_names_parameter(self):
        p = T.Parameter(value=T.Tensor(np.zeros(2)), name="enc0.conv1.weight")
        with pytest.raises(ValueError, match="enc0.conv1.weight"):
            T.sgd_momentum_step([p], lr=0.1, mu=0.9)


class TestGradCheck:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(25)
        a = rng.uniform(0.5, 1.5, 6) * rng.choice([-1.0, 1.0], 6)
        x = T.Tensor(rng.standard_normal(6), requires_grad=True)
        err = T.grad_check(lambda: (x * T.Tensor(a)).sum(), x)
        assert err < 1e-9

    def test_mask_excludes_components(self):
        x = T.Tensor(np.array([1.0, 1e-9, -2.0]), requires_grad=True)
        mask = np.abs(x.data) > 1e-6
        err = T.grad_check(lambda: (T.relu(x) * T.relu(x)).sum(), x, mask=mask)
        assert err < 1e-6

    def test_tolerance_enforced(self):
        # op whose forward is x^2 but whose backward rule lies
        x = T.Tensor(np.array([2.0]), requires_grad=True)

        def lying_loss():
            out = T.Tensor(np.array((x.data ** 2).sum()))
            out.requires_grad = True
            out._parents = (x,)
            out._backward_fn = lambda go: T._send(x, np.full_like(x.data, 100.0) * float(go))
            return out

        with pytest.raises(ValueError, match="gradient check failed"):
            T.grad_check(lying_loss, x, tolerance=1e-4)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert y._backward_fn is None and not y._parents
