import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfuse import autodiff as ad
from segfuse.errors import DimensionError, GraphError, NumericError

from conftest import assert_gradients_match


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 3))
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(m))
        np.testing.assert_array_equal(out.value, m)

    def test_hand_product(self):
        out = ad.matmul(ad.constant([[1, 2], [3, 4]]), ad.constant([[1], [1]]))
        np.testing.assert_array_equal(out.value, [[3], [7]])

    def test_zero_annihilates(self, rng):
        m = rng.normal(size=(2, 4))
        out = ad.matmul(ad.constant(np.zeros((3, 2))), ad.constant(m))
        np.testing.assert_array_equal(out.value, np.zeros((3, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b, c = (rng.normal(size=(3, 3)) for _ in range(3))
            left = (ad.constant(a) @ ad.constant(b)) @ ad.constant(c)
            right = ad.constant(a) @ (ad.constant(b) @ ad.constant(c))
            np.testing.assert_allclose(left.value, right.value, atol=1e-9)


class TestSoftmax:
    def test_uniform_row(self):
        out = ad.softmax_rows(ad.constant([[2.0, 2.0, 2.0, 2.0]]))
        np.testing.assert_allclose(out.value, np.full((1, 4), 0.25), atol=1e-12)

    def test_quarter_three_quarters(self):
        out = ad.softmax_rows(ad.constant([[0.0, np.log(3.0)]]), temperature=1.0)
        np.testing.assert_allclose(out.value, [[0.25, 0.75]], atol=1e-12)

    def test_single_column(self, rng):
        out = ad.softmax_rows(ad.constant(rng.normal(size=(5, 1))))
        np.testing.assert_allclose(out.value, np.ones((5, 1)), atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax_rows(ad.constant([[np.inf, 0.0]]))

    def test_bad_temperature(self):
        with pytest.raises(NumericError):
            ad.softmax_rows(ad.constant([[1.0, 2.0]]), temperature=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(min_value=-50, max_value=50),
                             min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(
                        lambda rows: len({len(r) for r in rows}) == 1))
    def test_rows_sum_to_one(self, rows):
        out = ad.softmax_rows(ad.constant(np.array(rows)))
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-6)
        assert (out.value >= 0).all()

    def test_mask_zeroes_excluded_entries(self, rng):
        x = ad.constant(rng.normal(size=(3, 5)))
        mask = np.ones((3, 5), dtype=bool)
        mask[0, 2] = mask[2, 0] = mask[2, 4] = False
        out = ad.softmax_rows(x, mask=mask)
        assert out.value[0, 2] == 0.0
        assert out.value[2, 0] == 0.0 and out.value[2, 4] == 0.0
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-12)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax_rows(ad.constant(np.zeros((2, 3))),
                            mask=np.array([[True, True, True], [False, False, False]]))


class TestFiniteDifference:
    def test_square(self):
        p = ad.Parameter([[3.0]])
        grad = ad.finite_difference_gradient(lambda q: float(q.value[0, 0]) ** 2, p)
        np.testing.assert_allclose(grad, [[6.0]], atol=1e-6)

    def test_constant_function(self, rng):
        p = ad.Parameter(rng.normal(size=(2, 3)))
        grad = ad.finite_difference_gradient(lambda q: 42.0, p)
        np.testing.assert_array_equal(grad, np.zeros((2, 3)))

    def test_sum_is_ones(self, rng):
        p = ad.Parameter(rng.normal(size=(3, 2)))
        grad = ad.finite_difference_gradient(lambda q: float(q.value.sum()), p)
        np.testing.assert_allclose(grad, np.ones((3, 2)), atol=1e-9)


class TestBackward:
    def test_requires_scalar(self):
        with pytest.raises(DimensionError):
            ad.backward(ad.constant(np.ones((2, 2))))

    def test_cycle_detected(self):
        p = ad.Parameter([[1.0]])
        t = ad.scale(p, 2.0)
        t._parents = (t,)  # sabotage the tape
        with pytest.raises(GraphError):
            ad.backward(t)

    def test_grad_accumulates_across_uses(self):
        p = ad.Parameter([[2.0]])
        loss = ad.sum_all(ad.add(ad.mul(p, p), p))  # x^2 + x -> 2x + 1 = 5
        ad.backward(loss)
        np.testing.assert_allclose(p.grad, [[5.0]], atol=1e-12)

    def test_constant_subgraph_not_taped(self, rng):
        a = ad.constant(rng.normal(size=(3, 3)))
        b = ad.constant(rng.normal(size=(3, 3)))
        out = ad.matmul(a, b)
        assert out._parents == () and out._backprop is None


def _random_param(seed, shape=(4, 4)):
    return ad.Parameter(np.random.default_rng(seed).normal(size=shape))


OPS = {
    "matmul_left": lambda p: ad.matmul(p, ad.constant(np.random.default_rng(1).normal(size=(4, 4)))),
    "matmul_right": lambda p: ad.matmul(ad.constant(np.random.default_rng(2).normal(size=(4, 4))), p),
    "add": lambda p: ad.add(p, ad.constant(np.random.default_rng(3).normal(size=(4, 4)))),
    "add_bias": lambda p: ad.add(ad.constant(np.random.default_rng(3).normal(size=(4, 4))),
                                 p) if p.shape == (1, 4) else ad.add(p, p),
    "mul": lambda p: ad.mul(p, ad.constant(np.random.default_rng(4).normal(size=(4, 4)))),
    "div": lambda p: ad.div(p, ad.constant(np.random.default_rng(5).normal(size=(4, 4)) + 3.0)),
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "relu": lambda p: ad.relu(ad.shift(p, 0.1)),  # keep away from the kink
    "log": lambda p: ad.log(ad.shift(ad.mul(p, p), 0.5)),
    "softmax": lambda p: ad.softmax_rows(p, temperature=0.7),
    "transpose": ad.transpose,
    "sum_rows": ad.sum_rows,
    "l2_normalize": ad.l2_normalize_rows,
    "concat": lambda p: ad.concat_cols(p, ad.mul(p, p)),
    "slice": lambda p: ad.slice_cols(p, 1, 3),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    op = OPS[name]
    probe = ad.constant(np.random.default_rng(99).normal(size=(4, 4)))

    for seed in range(100):
        p = _random_param(seed)

        def build_loss():
            out = op(p)
            return ad.sum_all(ad.mul(out, ad.constant(
                np.random.default_rng(1000 + seed).normal(size=out.shape))))

        assert_gradients_match(build_loss, [p], rtol=1e-3)
    del probe


def test_layer_norm_gradients():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = ad.Parameter(rng.normal(size=(4, 4)))
        gain = ad.Parameter(rng.normal(1.0, 0.2, size=(1, 4)))
        bias = ad.Parameter(rng.normal(0.0, 0.2, size=(1, 4)))
        w = ad.constant(rng.normal(size=(4, 4)))

        def build_loss():
            return ad.sum_all(ad.mul(ad.layer_norm_rows(x, gain, bias), w))

        assert_gradients_match(build_loss, [x, gain, bias], rtol=1e-3)


def test_masked_softmax_gradients():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = ad.Parameter(rng.normal(size=(4, 4)))
        mask = rng.random((4, 4)) > 0.3
        mask[:, 0] = True  # no fully masked rows
        w = ad.constant(rng.normal(size=(4, 4)))

        def build_loss():
            return ad.sum_all(ad.mul(ad.softmax_rows(p, temperature=1.3, mask=mask), w))

        assert_gradients_match(build_loss, [p], rtol=1e-3)


def test_parameter_gradient_zeroing():
    p = ad.Parameter(np.ones((2, 2)))
    ad.backward(ad.sum_all(ad.mul(p, p)))
    assert np.abs(p.grad).sum() > 0
    ad.zero_gradients([p])
    np.testing.assert_array_equal(p.grad, np.zeros((2, 2)))
    assert p.grad.shape == p.value.shape


def test_linear_helper(rng):
    lp = ad.linear_params(rng, 3, 2)
    x = ad.constant(rng.normal(size=(5, 3)))
    out = ad.linear(x, lp)
    np.testing.assert_allclose(out.value, x.value @ lp.weight.value + lp.bias.value)
