import numpy as np
import pytest

from rfpresence import nn


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return np.max(np.abs(analytic - numeric)) / scale


def proj_loss(y, r):
    return float(np.sum(y * r))


class TestConv2d:
    def test_valid_output_shape(self):
        conv = nn.Conv2d(9, 4, 3, 3, rng=np.random.default_rng(0))
        out = conv.forward(np.random.default_rng(1).standard_normal((2, 50, 14, 9)))
        assert out.shape == (2, 48, 12, 4)

    def test_identity_kernel(self):
        conv = nn.Conv2d(1, 1, 1, 1, rng=np.random.default_rng(2))
        conv.kernels.value[...] = 1.0
        conv.bias.value[...] = 0.0
        x = np.random.default_rng(3).standard_normal((1, 5, 4, 1))
        assert np.allclose(conv.forward(x), x)

    def test_kernel_larger_than_input(self):
        conv = nn.Conv2d(1, 1, 5, 5, rng=np.random.default_rng(4))
        with pytest.raises(nn.KernelLargerThanInput):
            conv.forward(np.zeros((1, 3, 3, 1)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        conv = nn.Conv2d(3, 4, 3, 2, rng=rng)
        x = rng.standard_normal((2, 6, 5, 3))
        r = rng.standard_normal((2, 4, 4, 4))

        def loss():
            return proj_loss(conv.forward(x), r)

        loss()
        conv.kernels.grad[...] = 0
        conv.bias.grad[...] = 0
        dx = conv.backward(r)
        assert rel_err(dx, numeric_grad(loss, x)) <= 1e-4
        assert rel_err(conv.kernels.grad, numeric_grad(loss, conv.kernels.value)) <= 1e-4
        assert rel_err(conv.bias.grad, numeric_grad(loss, conv.bias.value)) <= 1e-4


class TestAvgPool:
    def test_48x12_pooled_2x1(self):
        pool = nn.AvgPool2d(2, 1)
        out = pool.forward(np.zeros((1, 48, 12, 16)))
        assert out.shape == (1, 24, 12, 16)

    def test_constant_preserved(self):
        pool = nn.AvgPool2d(3, 2)
        out = pool.forward(np.full((2, 9, 8, 3), 1.7))
        assert np.allclose(out, 1.7)

    def test_pool_larger_than_input(self):
        with pytest.raises(nn.PoolLargerThanInput):
            nn.AvgPool2d(4, 1).forward(np.zeros((1, 3, 3, 1)))

    def test_gradient_with_remainder_rows(self):
        rng = np.random.default_rng(6)
        pool = nn.AvgPool2d(2, 2)
        x = rng.standard_normal((2, 7, 5, 3))  # row 6 and col 4 dropped
        r = rng.standard_normal((2, 3, 2, 3))

        def loss():
            return proj_loss(pool.forward(x), r)

        loss()
        dx = pool.backward(r)
        assert rel_err(dx, numeric_grad(loss, x)) <= 1e-4
        assert np.all(dx[:, 6, :, :] == 0) and np.all(dx[:, :, 4, :] == 0)


class TestBatchNorm:
    def test_train_normalizes_batch(self):
        rng = np.random.default_rng(7)
        bn = nn.BatchNorm(5)
        x = rng.standard_normal((64, 5)) * 3.0 + 2.0
        y = bn.forward(x, "train")
        assert np.max(np.abs(y.mean(axis=0))) <= 1e-9
        assert np.max(np.abs(y.var(axis=0) - 1)) <= 1e-4

    def test_infer_identity_with_unit_running_stats(self):
        bn = nn.BatchNorm(4, eps=1e-12)
        x = np.random.default_rng(8).standard_normal((3, 4))
        assert np.allclose(bn.forward(x, "infer"), x, atol=1e-9)

    def test_degenerate_batch(self):
        with pytest.raises(nn.DegenerateBatch):
            nn.BatchNorm(4).forward(np.zeros((1, 4)), "train")

    def test_running_stats_update(self):
        bn = nn.BatchNorm(2, momentum=0.9)
        x = np.random.default_rng(9).standard_normal((32, 2)) + 5.0
        bn.forward(x, "train")
        assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=0))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(10)
        bn = nn.BatchNorm(3)
        x = rng.standard_normal((4, 3))
        r = rng.standard_normal((4, 3))

        def loss():
            return proj_loss(bn.forward(x, "train"), r)

        loss()
        bn.gamma.grad[...] = 0
        bn.beta.grad[...] = 0
        dx = bn.backward(r)
        assert rel_err(dx, numeric_grad(loss, x)) <= 1e-4
        assert rel_err(bn.gamma.grad, numeric_grad(loss, bn.gamma.value)) <= 1e-4
        assert rel_err(bn.beta.grad, numeric_grad(loss, bn.beta.value)) <= 1e-4

    def test_gradients_on_conv_shaped_input(self):
        rng = np.random.default_rng(11)
        bn = nn.BatchNorm(2)
        x = rng.standard_normal((3, 4, 2, 2))
        r = rng.standard_normal(x.shape)

        def loss():
            return proj_loss(bn.forward(x, "train"), r)

        loss()
        dx = bn.backward(r)
        assert rel_err(dx, numeric_grad(loss, x)) <= 1e-4


class TestDenseReluDropout:
    def test_dense_gradients(self):
        rng = np.random.default_rng(12)
        fc = nn.Dense(6, 4, rng=rng)
        x = rng.standard_normal((3, 6))
        r = rng.standard_normal((3, 4))

        def loss():
            return proj_loss(fc.forward(x), r)

        loss()
        fc.weight.grad[...] = 0
        fc.bias.grad[...] = 0
        dx = fc.backward(r)
        assert rel_err(dx, numeric_grad(loss, x)) <= 1e-4
        assert rel_err(fc.weight.grad, numeric_grad(loss, fc.weight.value)) <= 1e-4
        assert rel_err(fc.bias.grad, numeric_grad(loss, fc.bias.value)) <= 1e-4

    def test_relu_gradient(self):
        rng = np.random.default_rng(13)
        relu = nn.ReLU()
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 0.05] += 0.1  # keep away from the kink
        r = rng.standard_normal(x.shape)

        def loss():
            return proj_loss(relu.forward(x), r)

        loss()
        assert rel_err(relu.backward(r), numeric_grad(loss, x)) <= 1e-4

    def test_dropout_infer_is_identity(self):
        drop = nn.Dropout(0.5)
        x = np.random.default_rng(14).standard_normal((5, 6))
        assert np.array_equal(drop.forward(x, "infer"), x)

    def test_dropout_train_scales_by_keep(self):
        drop = nn.Dropout(0.5)
        drop.rng = np.random.default_rng(15)
        x = np.ones((2000, 4))
        y = drop.forward(x, "train")
        kept = y != 0
        assert np.allclose(y[kept], 2.0)  # 1/(1-p)
        assert abs(kept.mean() - 0.5) < 0.03
        # backward routes gradients through the same mask
        dy = np.random.default_rng(16).standard_normal(x.shape)
        assert np.array_equal(drop.backward(dy), dy * drop._mask)


class TestSoftmaxAndLoss:
    def test_equal_logits_give_half(self):
        assert np.allclose(nn.softmax(np.array([[1.3, 1.3]])), 0.5)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(17)
        p = nn.softmax(rng.standard_normal((100, 2)) * 10)
        assert np.all(p > 0)
        assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(18)
        z = rng.standard_normal((20, 2))
        assert np.max(np.abs(nn.softmax(z) - nn.softmax(z + 123.4))) <= 1e-12

    def test_cross_entropy_values(self):
        assert nn.cross_entropy(np.array([[0.0, 1.0]]), np.array([1])) == 0.0
        assert abs(nn.cross_entropy(np.array([[0.5, 0.5]]), np.array([0])) - np.log(2)) < 1e-12

    def test_combined_softmax_xent_gradient(self):
        rng = np.random.default_rng(19)
        z = rng.standard_normal((4, 2))
        y = np.array([0, 1, 1, 0])

        def loss():
            return nn.cross_entropy(nn.softmax(z), y)

        g = nn.softmax_xent_grad(nn.softmax(z), y)
        assert rel_err(g, numeric_grad(loss, z)) <= 1e-6


class TestL2:
    def test_zero_lambda(self):
        assert nn.l2_penalty([np.array([3.0])], 0.0) == 0.0

    def test_single_weight(self):
        assert abs(nn.l2_penalty([np.array([3.0])], 0.1) - 0.9) < 1e-15

    def test_gradient_is_analytic(self):
        rng = np.random.default_rng(20)
        w = rng.standard_normal((5, 4))
        lam = 0.01

        def loss():
            return nn.l2_penalty([w], lam)

        assert rel_err(2 * lam * w, numeric_grad(loss, w)) <= 1e-8


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = nn.Param(np.array([1.0, -2.0, 0.5]))
        p.grad = np.array([0.3, -4.0, 1e-3])
        opt = nn.Adam([p], lr=0.1)
        before = p.value.copy()
        opt.step()
        assert np.allclose(p.value, before - 0.1 * np.sign(p.grad), atol=1e-5)

    def test_zero_gradient_keeps_params(self):
        p = nn.Param(np.array([1.0, 2.0]))
        opt = nn.Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.value, np.array([1.0, 2.0]))

    def test_quadratic_convergence_matches_scalar_reference(self):
        # independent scalar Adam, written out step by step
        def reference(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
            m = v = 0.0
            for t in range(1, steps + 1):
                g = 2 * (theta - 5.0)
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            return theta

        p = nn.Param(np.array([0.0]))
        opt = nn.Adam([p], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            p.grad[...] = 2 * (p.value - 5.0)
            opt.step()
        ref = reference(0.0, 200, 0.1)
        assert abs(p.value[0] - ref) <= 1e-12
        assert abs(p.value[0] - 5.0) <= 0.1
