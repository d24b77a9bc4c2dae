import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udalm import autodiff as ad
from udalm.autodiff import IGNORE_INDEX, ShapeError, Tensor

from conftest import numeric_grad, rel_error

TRIALS = 20
TOL = 1e-4


def check_op(build, shapes, seed, positive=False, away_from_zero=False):
    """Analytic vs central-difference gradient of sum(R * build(*inputs))."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-2, 2, size=s) for s in shapes]
    if away_from_zero:
        arrays = [np.where(np.abs(a) < 0.05, a + 0.1, a) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    weights = rng.normal(size=out.shape)

    def f():
        return float(np.sum(weights * build(*[Tensor(a) for a in arrays]).data))

    ad.backward(ad.tsum(out * weights))
    for leaf, arr in zip(leaves, arrays):
        assert rel_error(leaf.grad, numeric_grad(f, arr)) < TOL


OPS = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    "neg": (lambda a: -a, [(5,)]),
    "relu": (ad.relu, [(4, 5)]),
    "gelu": (ad.gelu, [(4, 5)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)) * ad.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "getitem": (lambda a: a[:, 0, :] * a[:, 1, :], [(3, 2, 4)]),
    "matmul_2d": (ad.matmul, [(3, 4), (4, 5)]),
    "matmul_batched_weight": (ad.matmul, [(2, 3, 4), (4, 5)]),
    "matmul_batched": (ad.matmul, [(2, 2, 3, 4), (2, 2, 4, 3)]),
    "sum": (lambda a: ad.tsum(a * a), [(3, 4)]),
    "mean": (lambda a: ad.tmean(a * a), [(3, 4)]),
    "layer_norm": (ad.layer_norm, [(3, 6), (6,), (6,)]),
    "softmax": (ad.softmax, [(3, 5)]),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_matches_finite_differences(self, name):
        build, shapes = OPS[name]
        for trial in range(TRIALS):
            check_op(build, shapes, seed=trial, away_from_zero=name == "relu")

    def test_grad_reverse(self):
        # forward is the identity, so the oracle is -lambda times the numeric gradient
        for trial in range(TRIALS):
            lam = [0.0, 0.01, 0.1, 1.0][trial % 4]
            rng = np.random.default_rng(trial)
            a = rng.uniform(-2, 2, size=(3, 4))
            w = rng.normal(size=(3, 4))
            leaf = Tensor(a, requires_grad=True)
            ad.backward(ad.tsum(ad.gelu(ad.grad_reverse(leaf, lam)) * w))
            num = numeric_grad(lambda: float(np.sum(ad.gelu(Tensor(a)).data * w)), a)
            np.testing.assert_allclose(leaf.grad, -lam * num, rtol=TOL, atol=1e-9)

    def test_masked_softmax(self):
        mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        for trial in range(TRIALS):
            check_op(lambda a: ad.softmax(a, mask), [(3, 5)], trial)

    def test_embedding(self):
        ids = np.array([[0, 3, 3], [5, 1, 0]])
        for trial in range(TRIALS):
            check_op(lambda w: ad.embedding(w, ids), [(6, 4)], trial)

    def test_cross_entropy_with_ignore(self):
        targets = np.array([2, IGNORE_INDEX, 0, 4, IGNORE_INDEX])
        for trial in range(TRIALS):
            rng = np.random.default_rng(trial)
            z = rng.uniform(-2, 2, size=(5, 5))
            leaf = Tensor(z, requires_grad=True)
            ad.backward(ad.cross_entropy(leaf, targets))
            num = numeric_grad(lambda: float(ad.cross_entropy(Tensor(z), targets).data), z)
            assert rel_error(leaf.grad, num) < TOL

    def test_two_layer_mlp(self):
        for trial in range(TRIALS):
            rng = np.random.default_rng(100 + trial)
            x = rng.uniform(-2, 2, size=(6, 4))
            y = rng.integers(0, 3, size=6)
            w1, b1 = rng.normal(size=(4, 5)), rng.normal(size=5)
            w2, b2 = rng.normal(size=(5, 3)), rng.normal(size=3)
            arrays = [w1, b1, w2, b2]

            def loss(ts):
                h = ad.gelu(ad.matmul(Tensor(x), ts[0]) + ts[1])
                return ad.cross_entropy(ad.matmul(h, ts[2]) + ts[3], y)

            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            ad.backward(loss(leaves))
            for leaf, arr in zip(leaves, arrays):
                num = numeric_grad(lambda: float(loss([Tensor(a) for a in arrays]).data), arr)
                assert rel_error(leaf.grad, num) < TOL


class TestForwardValues:
    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_softmax_rows_sum_to_one(self):
        p = ad.softmax(Tensor(np.random.default_rng(1).normal(size=(4, 7)) * 10)).data
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_masked_softmax_zeroes_removed_entries(self):
        p = ad.softmax(Tensor(np.ones((1, 4))), np.array([[1, 0, 1, 0]], dtype=bool)).data
        np.testing.assert_array_equal(p, [[0.5, 0.0, 0.5, 0.0]])

    def test_layer_norm_normalizes(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(6, 16))
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)

    def test_gelu_zero(self):
        assert ad.gelu(Tensor(np.zeros(1))).data[0] == 0.0

    def test_cross_entropy_ignored_rows_contribute_nothing(self):
        z = np.random.default_rng(3).normal(size=(3, 4))
        full = ad.cross_entropy(Tensor(z[:2]), np.array([1, 2])).data
        part = ad.cross_entropy(Tensor(z), np.array([1, 2, IGNORE_INDEX])).data
        assert full == pytest.approx(part, abs=1e-15)

    def test_cross_entropy_all_ignored_is_zero(self):
        leaf = Tensor(np.ones((2, 3)), requires_grad=True)
        loss = ad.cross_entropy(leaf, np.array([IGNORE_INDEX, IGNORE_INDEX]))
        ad.backward(loss)
        assert float(loss.data) == 0.0
        assert not leaf.grad.any()

    def test_cross_entropy_extreme_logits_stay_finite(self):
        loss = ad.cross_entropy(Tensor(np.array([[1000.0, -1000.0]])), np.array([1]))
        assert loss.data == pytest.approx(2000.0)


class TestGradientReversal:
    def test_forward_is_identity(self):
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(ad.grad_reverse(Tensor(x), 0.01).data, x)

    def test_backward_example(self):
        leaf = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.tsum(ad.grad_reverse(leaf, 0.01)))
        np.testing.assert_array_equal(leaf.grad, [-0.01, -0.01])

    @pytest.mark.parametrize("lam", [0.0, 0.01, 0.1, 1.0])
    def test_backward_is_exact_scaling(self, lam):
        g = np.random.default_rng(4).normal(size=(5, 3))
        leaf = Tensor(np.zeros((5, 3)), requires_grad=True)
        ad.backward(ad.tsum(ad.grad_reverse(leaf, lam) * g))
        # bitwise: a single scalar multiply
        np.testing.assert_array_equal(leaf.grad, -lam * g)

    def test_zero_lambda_gives_zero_gradient(self):
        leaf = Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.tsum(ad.grad_reverse(leaf, 0.0)))
        assert not leaf.grad.any()

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            ad.grad_reverse(Tensor(np.ones(2)), -0.1)


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_zero_times_x_gives_zeros(self):
        x = Tensor(np.ones(4), requires_grad=True)
        ad.backward(ad.tsum(x * 0.0))
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        ad.backward(ad.tsum(x + x))
        assert x.grad[0] == 2.0

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_unreached_parameters_get_zeros(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        grads = ad.gradients(ad.tsum(a * 3.0), {"a": a, "b": b})
        np.testing.assert_array_equal(grads["a"], [3.0, 3.0])
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_shape_mismatch_names_node(self):
        with pytest.raises(ShapeError) as info:
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        assert info.value.op == "matmul"
        assert isinstance(info.value.node_id, int)
        assert "node" in str(info.value)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_forward_rejected(self):
        with pytest.raises(FloatingPointError):
            Tensor(np.array([1e308])) * 1e10

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            x = Tensor(rng.normal(size=(3, 4)))
            ad.backward(ad.tsum(ad.softmax(ad.matmul(x, w))) * 1.0 + ad.tmean(ad.gelu(ad.matmul(x, w))))
            return w.grad

        np.testing.assert_array_equal(run(), run())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(values):
    p = ad.softmax(Tensor(np.array([values]))).data
    assert np.all(p >= 0)
    assert math.isclose(p.sum(), 1.0, abs_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_add_broadcast_gradient_shapes(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
    b = Tensor(rng.normal(size=(cols,)), requires_grad=True)
    ad.backward(ad.tsum(a + b))
    assert a.grad.shape == (rows, cols)
    np.testing.assert_allclose(b.grad, np.full(cols, rows))
