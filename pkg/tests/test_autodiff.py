import gc

import numpy as np
import pytest

from emofuse import autodiff as ad
from emofuse.errors import ContractError, NumericError, ShapeError


def numeric_grad(make_loss, leaf, h=1e-4):
    """Central finite differences of make_loss() w.r.t. every leaf coordinate."""
    out = np.zeros_like(leaf.data)
    flat = leaf.data.ravel()
    grad_flat = out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = make_loss().item()
        flat[i] = orig - h
        lo = make_loss().item()
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2.0 * h)
    return out


def check_grads(make_loss, leaves, tol=1e-4):
    """Backward pass vs central differences for every leaf tensor."""
    for leaf in leaves:
        leaf.zero_grad()
    loss = make_loss()
    loss.backward()
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_grad(make_loss, leaf)
        scale = max(np.max(np.abs(numeric)), 1e-6)
        rel = np.max(np.abs(analytic - numeric)) / scale
        assert rel < tol, f"grad mismatch {rel:.2e} on leaf shape {leaf.shape}"


def leafs(rng, *shapes):
    return [ad.Tensor(rng.uniform(-1, 1, s), requires_grad=True) for s in shapes]


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0, 0.0])).data, 1 / 3)

    def test_softmax_rows_sum_to_one(self, rng):
        out = ad.softmax(ad.Tensor(rng.standard_normal((5, 7))), dim=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_matmul_identity(self, rng):
        a = rng.standard_normal((4, 4))
        out = ad.matmul(ad.Tensor(np.eye(4)), ad.Tensor(a))
        np.testing.assert_array_equal(out.data, np.eye(4) @ a)

    def test_variance_of_constant_row(self):
        out = ad.variance(ad.Tensor(np.full((3, 6), 2.5)), dim=-1)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-15)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))

    def test_layer_norm_normalizes(self, rng):
        x = ad.Tensor(rng.standard_normal((4, 8)) * 3 + 1)
        out = ad.layer_norm(x, ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


class TestBackwardClosedForms:
    def test_square(self):
        x = ad.Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_sum_gives_ones(self, rng):
        a = ad.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        a.sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((3, 5)))

    def test_non_scalar_loss_rejected(self, rng):
        a = ad.Tensor(rng.standard_normal(4), requires_grad=True)
        with pytest.raises(ContractError):
            (a * a).backward()

    def test_grad_accumulates_across_backwards(self):
        x = ad.Tensor(2.0, requires_grad=True)
        (x * x).backward()
        (x * x).backward()
        assert x.grad == pytest.approx(8.0)


class TestGradcheckPrimitives:
    def test_add_mul_div(self, rng):
        a, b = leafs(rng, (3, 4), (3, 4))
        check_grads(lambda: ((a + b) * a / (b + ad.Tensor(3.0))).sum(), [a, b])

    def test_broadcast_add_mul(self, rng):
        a, b = leafs(rng, (5, 3, 4), (4,))
        check_grads(lambda: ((a + b) * b).sum(), [a, b])

    def test_matmul_2d(self, rng):
        a, b = leafs(rng, (3, 4), (4, 2))
        check_grads(lambda: (a @ b).sum(), [a, b])

    def test_matmul_batched(self, rng):
        a, b = leafs(rng, (6, 3, 4), (4, 2))
        check_grads(lambda: ((a @ b) * (a @ b)).sum(), [a, b])

    def test_transpose_reshape_slice_concat(self, rng):
        a, b = leafs(rng, (4, 6), (4, 6))
        check_grads(
            lambda: ad.concat([a.transpose()[1:3], (b * a).transpose()[:2]], axis=1).sum(),
            [a, b],
        )

    def test_reductions(self, rng):
        (a,) = leafs(rng, (5, 7))
        check_grads(lambda: (a.mean(dim=1) * a.sum(dim=0)[:5]).sum(), [a])

    def test_variance(self, rng):
        (a,) = leafs(rng, (4, 9))
        check_grads(lambda: ad.variance(a, dim=-1).sum(), [a])

    def test_exp_log_tanh_sigmoid(self, rng):
        (a,) = leafs(rng, (3, 5))
        check_grads(lambda: (ad.exp(a) + ad.log(a + ad.Tensor(2.0))).sum(), [a])
        check_grads(lambda: (ad.tanh(a) * ad.sigmoid(a)).sum(), [a])

    def test_relu(self, rng):
        # keep entries away from the kink at 0
        a = ad.Tensor(rng.uniform(0.2, 1.0, (4, 4)) * rng.choice([-1, 1], (4, 4)), requires_grad=True)
        check_grads(lambda: (ad.relu(a) * a).sum(), [a])

    def test_softmax(self, rng):
        (a,) = leafs(rng, (4, 6))
        w = ad.Tensor(rng.standard_normal((4, 6)))
        check_grads(lambda: (ad.softmax(a, dim=-1) * w).sum(), [a])

    def test_layer_norm(self, rng):
        a, gain, bias = leafs(rng, (3, 8), (8,), (8,))
        w = ad.Tensor(rng.standard_normal((3, 8)))
        check_grads(lambda: (ad.layer_norm(a, gain, bias) * w).sum(), [a, gain, bias])

    def test_power(self, rng):
        a = ad.Tensor(np.random.default_rng(0).uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        check_grads(lambda: (a**0.5 + a**2).sum(), [a])

    def test_ten_seeded_points_composite(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            a, b = leafs(rng, (3, 4), (4, 3))
            check_grads(lambda: ad.tanh(a @ b).sum() + ad.softmax(a, -1).mean(), [a, b])

    def test_conv2d_matches_quadruple_loop(self, rng):
        x = rng.standard_normal((15, 22))
        w = rng.standard_normal((10, 18, 3))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), (4, 3)).data
        expect = np.zeros((2, 2, 3))
        for ti in range(2):
            for fi in range(2):
                for c in range(3):
                    acc = 0.0
                    for i in range(10):
                        for j in range(18):
                            acc += x[4 * ti + i, 3 * fi + j] * w[i, j, c]
                    expect[ti, fi, c] = acc
        np.testing.assert_allclose(out, expect, rtol=1e-12)

    def test_conv2d_gradcheck(self, rng):
        x, w = leafs(rng, (9, 8), (4, 5, 2))
        probe = ad.Tensor(rng.standard_normal((3, 2, 2)))
        check_grads(lambda: (ad.conv2d(x, w, (2, 3)) * probe).sum(), [x, w])

    def test_conv2d_batched_gradcheck(self, rng):
        x, w = leafs(rng, (2, 7, 6), (3, 4, 2))
        probe = ad.Tensor(rng.standard_normal((2, 3, 2, 2)))
        check_grads(lambda: (ad.conv2d(x, w, (2, 2)) * probe).sum(), [x, w])

    def test_conv2d_undersized_input(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(ad.Tensor(np.zeros((4, 4))), ad.Tensor(np.zeros((5, 3, 1))), (1, 1))

    def test_conv1d_matches_triple_loop(self, rng):
        x = rng.standard_normal((11, 3))
        w = rng.standard_normal((4, 3, 2))
        out = ad.conv1d(ad.Tensor(x), ad.Tensor(w), 2).data
        expect = np.zeros((4, 2))
        for li in range(4):
            for o in range(2):
                acc = 0.0
                for i in range(4):
                    for c in range(3):
                        acc += x[2 * li + i, c] * w[i, c, o]
                expect[li, o] = acc
        np.testing.assert_allclose(out, expect, rtol=1e-12)

    def test_conv1d_gradcheck(self, rng):
        x, w = leafs(rng, (2, 9, 3), (4, 3, 2))
        probe = ad.Tensor(rng.standard_normal((2, 3, 2)))
        check_grads(lambda: (ad.conv1d(x, w, 2) * probe).sum(), [x, w])

    def test_conv1d_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.conv1d(ad.Tensor(np.zeros((9, 4))), ad.Tensor(np.zeros((3, 3, 2))), 1)


class TestGraphHygiene:
    def test_no_leak_after_backward(self, rng):
        params = leafs(rng, (6, 6), (6,))
        x = ad.Tensor(rng.standard_normal((2, 6)))
        loss = ad.tanh(x @ params[0] + params[1]).sum()
        loss.backward()
        del loss
        gc.collect()
        assert ad.live_node_count() == 0

    def test_inference_builds_no_graph(self, rng):
        before = ad.live_node_count()
        x = ad.Tensor(rng.standard_normal((3, 3)))
        y = ad.tanh(x @ x).sum()
        assert not y.requires_grad
        assert ad.live_node_count() == before

    def test_deterministic_forward_backward(self):
        def run():
            rng = np.random.default_rng(11)
            a = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            loss = (ad.softmax(a @ a, -1) * ad.Tensor(rng.standard_normal((4, 4)))).sum()
            loss.backward()
            return loss.item(), a.grad.copy()

        loss1, grad1 = run()
        loss2, grad2 = run()
        assert loss1 == loss2
        np.testing.assert_array_equal(grad1, grad2)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = ad.adam_init([p])
        p.grad = np.zeros(2)
        ad.adam_step([p], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = ad.Tensor(np.array([0.5]), requires_grad=True)
        g = np.array([0.3])
        p.grad = g.copy()
        state = ad.adam_init([p])
        ad.adam_step([p], state, lr=1e-3)
        expected = 0.5 - 1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_two_steps_reduce_quadratic(self):
        p = ad.Tensor(np.array([2.0]), requires_grad=True)
        state = ad.adam_init([p])

        def loss_value():
            return float(p.data[0] ** 2)

        start = loss_value()
        for _ in range(2):
            p.zero_grad()
            (p * p).sum().backward()
            ad.adam_step([p], state, lr=0.05)
        assert loss_value() < start

    def test_nan_grad_aborts(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError):
            ad.adam_step([p], ad.adam_init([p]))
