import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masterpde import autodiff as ad
from masterpde.autodiff import Dual2, Tape, forward_eval


def central_diff(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def central_diff2(f, x, h=1e-4):
    return (f(x + h) - 2 * f(x) + f(x - h)) / (h * h)


def smooth_composite(x):
    # generic smooth test function exercising every smooth primitive
    y = ad.tanh(x) * 2.0 + ad.exp(x * 0.3)
    z = ad.log(y + 3.0) / (ad.softplus(x) + 0.5)
    w = ad.power(y + 4.0, 1.7) - ad.sigmoid(z)
    return w + z * y - x * 0.25


finite_floats = st.floats(min_value=-3.0, max_value=3.0,
                          allow_nan=False, allow_infinity=False)


class TestForwardEval:
    @given(finite_floats)
    @settings(max_examples=100, deadline=None)
    def test_first_derivative_matches_fd(self, x):
        v, d1 = forward_eval(smooth_composite, x, order=1)
        assert v == pytest.approx(smooth_composite(x), rel=1e-12, abs=1e-12)
        fd = central_diff(smooth_composite, x)
        assert d1 == pytest.approx(fd, rel=1e-5, abs=1e-6)

    @given(finite_floats)
    @settings(max_examples=100, deadline=None)
    def test_second_derivative_matches_fd(self, x):
        _, _, d2 = forward_eval(smooth_composite, x, order=2)
        fd = central_diff2(smooth_composite, x)
        assert d2 == pytest.approx(fd, rel=2e-4, abs=5e-4)

    def test_polynomial_exact(self):
        f = lambda x: x * x * x - 2.0 * x + 5.0
        v, d1, d2 = forward_eval(f, 2.0)
        assert v == 9.0
        assert d1 == 10.0
        assert d2 == 12.0

    def test_directional_seed(self):
        f = lambda x: x * x
        v, d1, d2 = forward_eval(f, 3.0, direction=2.0)
        assert d1 == 12.0   # 2x * direction
        assert d2 == 8.0    # 2 * direction^2

    def test_array_inputs(self):
        x = np.array([0.5, 1.0, 2.0])
        v, d1 = forward_eval(lambda t: ad.exp(t) * t, x, order=1)
        np.testing.assert_allclose(d1, np.exp(x) * (1 + x), rtol=1e-12)


class TestMaxTieRule:
    def test_tie_subgradient_goes_left(self):
        v, d1, _ = forward_eval(lambda x: ad.maximum(x, x * 2.0 - 1.0), 1.0)
        # both args equal 1 at x=1; left slope is 1, right slope is 2
        assert v == 1.0
        assert d1 == 1.0

    def test_max_selects_larger_branch(self):
        _, d1, _ = forward_eval(lambda x: ad.maximum(x * x, x), 3.0)
        assert d1 == 6.0
        _, d1, _ = forward_eval(lambda x: ad.maximum(x * x, x), 0.5)
        assert d1 == 1.0


class TestDivisionByZero:
    def test_dual_division_by_zero_raises(self):
        with pytest.raises(ZeroDivisionError):
            forward_eval(lambda x: x / (x - 1.0), 1.0)

    def test_tape_division_by_zero_raises(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 0.0]))
        with pytest.raises(ZeroDivisionError):
            1.0 / x


class TestTapeGradients:
    def test_simple_grad(self):
        tape = Tape()
        a = tape.leaf(np.array([2.0]))
        b = tape.leaf(np.array([3.0]))
        loss = ((a * b + ad.exp(a)) ** 2.0).sum()
        ga, gb = tape.grad(loss, [a, b])
        # d/da (ab+e^a)^2 = 2(ab+e^a)(b+e^a)
        val = 2 * 3 + np.exp(2.0)
        np.testing.assert_allclose(ga, 2 * val * (3.0 + np.exp(2.0)))
        np.testing.assert_allclose(gb, 2 * val * 2.0)

    def test_grad_vs_fd_random_params(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=(4, 3))
        x = rng.normal(size=(5, 4))

        def loss_of(wv):
            tape = Tape()
            w = tape.leaf(wv)
            h = ad.tanh(ad.matmul(x, w))
            out = (ad.softplus(h) * h).sum()
            return tape, w, out

        tape, w, out = loss_of(w0)
        (g,) = tape.grad(out, [w])
        h = 1e-6
        for i in range(4):
            for j in range(3):
                wp = w0.copy(); wp[i, j] += h
                wm = w0.copy(); wm[i, j] -= h
                fd = (loss_of(wp)[2].value - loss_of(wm)[2].value) / (2 * h)
                assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_matmul_grads(self):
        rng = np.random.default_rng(1)
        av = rng.normal(size=(3, 4))
        bv = rng.normal(size=(4, 2))
        tape = Tape()
        a = tape.leaf(av)
        b = tape.leaf(bv)
        out = ad.matmul(a, b).sum()
        ga, gb = tape.grad(out, [a, b])
        ones = np.ones((3, 2))
        np.testing.assert_allclose(ga, ones @ bv.T)
        np.testing.assert_allclose(gb, av.T @ ones)

    def test_broadcast_add_unbroadcasts(self):
        tape = Tape()
        b = tape.leaf(np.zeros(3))
        x = np.ones((5, 3))
        out = (x + b).sum()
        (gb,) = tape.grad(out, [b])
        np.testing.assert_allclose(gb, 5.0 * np.ones(3))

    def test_getitem_grad(self):
        tape = Tape()
        x = tape.leaf(np.arange(6.0))
        out = (x[np.array([0, 0, 3])] * np.array([1.0, 2.0, 3.0])).sum()
        (g,) = tape.grad(out, [x])
        np.testing.assert_allclose(g, [3.0, 0, 0, 3.0, 0, 0])

    def test_where_grad(self):
        tape = Tape()
        x = tape.leaf(np.array([-1.0, 2.0]))
        out = ad.where(x.value > 0, x * 3.0, x * 5.0).sum()
        (g,) = tape.grad(out, [x])
        np.testing.assert_allclose(g, [5.0, 3.0])


class TestForwardOverReverse:
    """Parameter gradients of input-derivatives (the trainer's core need)."""

    def test_grad_of_input_derivative(self):
        # y(x; w) = tanh(w x); d1 = w (1 - tanh^2(w x));
        # d/dw [dy/dx] analytically vs tape.
        w0, x0 = 0.7, 1.3

        def build(wv):
            tape = Tape()
            w = tape.leaf(np.array([wv]))
            y = ad.tanh(Dual2(x0, 1.0, 0.0) * w)
            return tape, w, y.d1.sum()

        tape, w, d1 = build(w0)
        (g,) = tape.grad(d1, [w])
        t = np.tanh(w0 * x0)
        expected = (1 - t**2) - w0 * 2 * t * (1 - t**2) * x0
        np.testing.assert_allclose(g, expected, rtol=1e-12)

    def test_grad_of_second_derivative_vs_fd(self):
        x0 = 0.4

        def d2_of(wv):
            tape = Tape()
            w = tape.leaf(np.array([wv]))
            out = ad.exp(ad.tanh(Dual2(x0, 1.0, 0.0) * w) * 2.0)
            return tape, w, out.d2.sum()

        tape, w, d2 = d2_of(0.9)
        (g,) = tape.grad(d2, [w])
        h = 1e-6
        fd = (d2_of(0.9 + h)[2].value - d2_of(0.9 - h)[2].value) / (2 * h)
        assert g[0] == pytest.approx(fd.item(), rel=1e-6)


@given(st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
       st.floats(min_value=-2.0, max_value=2.0, allow_nan=False))
@settings(max_examples=60, deadline=None)
def test_dual2_product_rule(a, b):
    x = Dual2(a, 1.0, 0.0)
    y = x * x * x
    assert y.d1 == pytest.approx(3 * a * a, abs=1e-12)
    assert y.d2 == pytest.approx(6 * a, abs=1e-12)
    q = (x + b) / (x * x + 3.0)
    f = lambda t: (t + b) / (t * t + 3.0)
    assert q.d1 == pytest.approx(central_diff(f, a, 1e-6), rel=1e-4, abs=1e-7)
