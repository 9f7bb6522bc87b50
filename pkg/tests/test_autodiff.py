import numpy as np
import pytest

from setdet import autodiff as ad
from setdet.errors import ContractViolation, NumericError


def leaf(x):
    return ad.Node(np.asarray(x, dtype=float), requires_grad=True)


def central_diff(f, x, eps=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        ad.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_sigmoid_at_zero(self):
        v = leaf([0.0, 0.0])
        ad.backward(ad.sigmoid(v).sum())
        np.testing.assert_allclose(v.grad, [0.25, 0.25])

    def test_softmax_dot_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        v0 = rng.normal(size=5)
        c = rng.normal(size=5)

        def f_np(v):
            e = np.exp(v - v.max())
            return float((e / e.sum()) @ c)

        v = leaf(v0)
        ad.backward((ad.softmax(v) * c).sum())
        np.testing.assert_allclose(v.grad, central_diff(f_np, v0), rtol=1e-5)

    def test_non_scalar_root(self):
        with pytest.raises(ContractViolation):
            ad.backward(leaf([1.0, 2.0]) * 2.0)

    def test_repeated_backward_accumulates(self):
        x = leaf([1.0, -2.0])
        y = (x * x * x).sum()
        ad.backward(y)
        first = x.grad.copy()
        ad.backward(y)
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_zeroed_rerun_is_bitwise_identical(self):
        rng = np.random.default_rng(1)
        x = leaf(rng.normal(size=(3, 4)))
        w = leaf(rng.normal(size=(4, 2)))
        y = ad.softmax(ad.matmul(x, w)).sum() + ad.layer_norm(x, np.ones(4), np.zeros(4)).sum()
        ad.backward(y)
        g1 = x.grad.copy(), w.grad.copy()
        x.zero_grad()
        w.zero_grad()
        ad.backward(y)
        assert np.array_equal(g1[0], x.grad) and np.array_equal(g1[1], w.grad)

    def test_no_grad_leaf_untouched(self):
        x = leaf(2.0)
        c = ad.Node(5.0)
        ad.backward(x * c)
        assert not c.requires_grad
        assert np.all(c.grad == 0)

    def test_grad_shape_matches_value(self):
        x = leaf(np.ones((2, 3)))
        assert x.grad.shape == x.shape
        ad.backward((x + np.ones(3)).sum())
        assert x.grad.shape == (2, 3)


class TestGradCheck:
    def test_sum_of_squares(self):
        x = leaf(np.random.default_rng(2).normal(size=4))
        err = ad.grad_check(lambda t: (t * t).sum(), x, 1e-5)
        assert err < 1e-6
        np.testing.assert_allclose(x.grad, 2 * x.value)

    def test_layer_norm_then_sum(self):
        rng = np.random.default_rng(3)
        gain, bias = rng.normal(size=8), rng.normal(size=8)
        x = leaf(rng.normal(size=8))
        assert ad.grad_check(lambda t: ad.layer_norm(t, gain, bias).sum(), x) < 1e-4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self):
        x = leaf([-1.0])
        with pytest.raises(NumericError):
            ad.grad_check(lambda t: ad.log(t).sum(), x)

    def test_bad_eps(self):
        with pytest.raises(ContractViolation):
            ad.grad_check(lambda t: t.sum(), leaf([1.0]), 0.0)


def _primitive_cases():
    """(name, builder) where builder(rng) -> (f, x) with f scalar-valued."""

    def r(rng, *shape):
        return rng.normal(size=shape)

    cases = {
        "matmul_left": lambda rng: (lambda t, w=r(rng, 4, 3): ad.matmul(t, w).sum(), r(rng, 2, 4)),
        "matmul_right": lambda rng: (lambda t, a=r(rng, 2, 5, 4): (ad.matmul(a, t) ** 2).sum(), r(rng, 4, 3)),
        "add_broadcast": lambda rng: (lambda t, a=r(rng, 3, 4): ((a + t) ** 2).sum(), r(rng, 4)),
        "sub": lambda rng: (lambda t, a=r(rng, 5): ((a - t) * a).sum(), r(rng, 5)),
        "mul": lambda rng: (lambda t, a=r(rng, 3, 4): (t * a * t).sum(), r(rng, 3, 4)),
        "div": lambda rng: (lambda t, a=r(rng, 6): (a / (t * t + 1.0)).sum(), r(rng, 6)),
        "relu": lambda rng: (lambda t, a=r(rng, 7): (ad.relu(t) * a).sum(), r(rng, 7)),
        "sigmoid": lambda rng: (lambda t, a=r(rng, 7): (ad.sigmoid(t) * a).sum(), r(rng, 7)),
        "softmax": lambda rng: (lambda t, a=r(rng, 3, 5): (ad.softmax(t, axis=-1) * a).sum(), r(rng, 3, 5)),
        "softmax_axis0": lambda rng: (lambda t, a=r(rng, 4, 3): (ad.softmax(t, axis=0) * a).sum(), r(rng, 4, 3)),
        "softmax_masked": lambda rng: (
            lambda t, a=r(rng, 2, 6), m=np.array([[1, 1, 0, 1, 0, 1], [1, 0, 1, 1, 1, 1]], bool):
            (ad.softmax(t, -1, m) * a).sum(), r(rng, 2, 6)),
        "log": lambda rng: (lambda t, a=r(rng, 6): (ad.log(t * t + 0.5) * a).sum(), r(rng, 6)),
        "exp": lambda rng: (lambda t, a=r(rng, 6): (ad.exp(t) * a).sum(), r(rng, 6)),
        "abs": lambda rng: (lambda t, a=r(rng, 6): (ad.abs_(t) * a).sum(), r(rng, 6)),
        "pow": lambda rng: (lambda t: ad.power(t * t + 1.0, 1.5).sum(), r(rng, 5)),
        "layer_norm": lambda rng: (
            lambda t, g=r(rng, 8), b=r(rng, 8), a=r(rng, 3, 8):
            (ad.layer_norm(t, g, b) * a).sum(), r(rng, 3, 8)),
        "layer_norm_gain": lambda rng: (
            lambda t, x=r(rng, 3, 8), a=r(rng, 3, 8): (ad.layer_norm(x, t, 0.0) * a).sum(), r(rng, 8)),
        "concat": lambda rng: (
            lambda t, b=r(rng, 2, 3), a=r(rng, 2, 7): (ad.concat([t, b], axis=-1) * a).sum(), r(rng, 2, 4)),
        "slice": lambda rng: (lambda t, a=r(rng, 2, 3): (t[1:3, ::2] * a).sum(), r(rng, 4, 6)),
        "fancy_index": lambda rng: (lambda t, a=r(rng, 5, 3): (t[np.array([0, 2, 2, 1, 0])] * a).sum(), r(rng, 3, 3)),
        "reshape_transpose": lambda rng: (
            lambda t, a=r(rng, 3, 2, 4): (t.reshape(2, 3, 4).transpose(1, 0, 2) * a).sum(), r(rng, 6, 4)),
        "sum_axis": lambda rng: (lambda t, a=r(rng, 4): (t.sum(axis=0) * a).sum(), r(rng, 3, 4)),
        "mean": lambda rng: (lambda t, a=r(rng, 3): (t.mean(axis=1) * a).sum(), r(rng, 3, 5)),
        "maximum": lambda rng: (lambda t, a=r(rng, 6): (ad.maximum(t, a) * t).sum(), r(rng, 6)),
        "minimum": lambda rng: (lambda t, a=r(rng, 6): (ad.minimum(t, a) * t).sum(), r(rng, 6)),
        "clip": lambda rng: (lambda t, a=r(rng, 6): (ad.clip(t, -0.5, 0.5) * a).sum(), r(rng, 6)),
    }
    return cases


PRIMITIVES = _primitive_cases()


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        f, x0 = PRIMITIVES[name](rng)
        worst = max(worst, ad.grad_check(f, leaf(x0)))
    assert worst < 1e-4


class TestSoftmax:
    def test_rows_are_distributions(self):
        rng = np.random.default_rng(5)
        out = ad.softmax(ad.Node(rng.normal(size=(10, 16)) * 30)).value
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)

    def test_masked_weight_vanishes(self):
        rng = np.random.default_rng(6)
        mask = rng.random((8, 12)) > 0.4
        mask[:, 0] = True
        out = ad.softmax(ad.Node(rng.normal(size=(8, 12)) * 5), mask=mask).value
        assert np.all(out[~mask] < 1e-12)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)

    def test_large_logits_stable(self):
        out = ad.softmax(ad.Node([1000.0, 1000.0, -1000.0])).value
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0])
