"""Tape correctness: per-op finite differences, Adam algebra, determinism."""

import numpy as np
import pytest

from bpnn import autodiff as ad
from bpnn.autodiff import AdamState, Parameter, Tape, Tensor, adam_step, backward, clip_gradients


def fd_gradient(fn, param, eps=1e-6):
    """Central finite differences of a scalar function of param.value."""
    base = param.value.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        param.value[idx] = base[idx] + eps
        hi = fn()
        param.value[idx] = base[idx] - eps
        lo = fn()
        param.value[idx] = base[idx]
        grad[idx] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return grad


def analytic_gradient(build, param):
    tape = Tape()
    loss = build(tape.lift(param), tape)
    backward(loss)
    return tape.lift(param).grad.copy()


def check_op(build, param, rtol=1e-4, atol=1e-7):
    """build(x, tape) must reduce to a scalar Tensor."""
    analytic = analytic_gradient(build, param)

    def value():
        tape = Tape()
        return float(build(tape.lift(param), tape).value)

    fd = fd_gradient(value, param)
    np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)


def weighted_sum(t, weights, tape):
    flat = ad.reshape(t, (t.value.size,))
    return ad.sum_over(ad.multiply(flat, Tensor(weights.reshape(-1))))


class TestElementwiseOps:
    def test_add_with_broadcasting(self):
        rng = np.random.default_rng(0)
        p = Parameter("p", rng.standard_normal((3, 4)))
        other = Tensor(rng.standard_normal(4))
        w = rng.standard_normal((3, 4))
        check_op(lambda x, tape: weighted_sum(ad.add(x, other), w, tape), p)

    def test_broadcast_gradient_reduces_to_param_shape(self):
        rng = np.random.default_rng(1)
        p = Parameter("p", rng.standard_normal(4))
        big = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        check_op(lambda x, tape: weighted_sum(ad.add(big, x), w, tape), p)

    def test_subtract_and_negation(self):
        rng = np.random.default_rng(2)
        p = Parameter("p", rng.standard_normal((2, 5)))
        other = Tensor(rng.standard_normal((2, 5)))
        w = rng.standard_normal((2, 5))
        check_op(lambda x, tape: weighted_sum(ad.subtract(other, x), w, tape), p)

    def test_multiply(self):
        rng = np.random.default_rng(3)
        p = Parameter("p", rng.standard_normal((4, 3)))
        other = Tensor(rng.standard_normal((4, 3)))
        w = rng.standard_normal((4, 3))
        check_op(lambda x, tape: weighted_sum(ad.multiply(x, other), w, tape), p)

    def test_multiply_by_self_doubles_gradient(self):
        p = Parameter("p", np.array([2.0, -3.0]))
        tape = Tape()
        x = tape.lift(p)
        backward(ad.sum_over(ad.multiply(x, x)))
        np.testing.assert_allclose(tape.lift(p).grad, 2.0 * p.value, atol=1e-12)

    def test_scalar_multiply(self):
        rng = np.random.default_rng(4)
        p = Parameter("p", rng.standard_normal(6))
        w = rng.standard_normal(6)
        check_op(lambda x, tape: weighted_sum(ad.scalar_multiply(x, -1.7), w, tape), p)

    def test_exp_and_ln(self):
        rng = np.random.default_rng(5)
        p = Parameter("p", rng.uniform(0.5, 2.0, size=(3, 3)))
        w = rng.standard_normal((3, 3))
        check_op(lambda x, tape: weighted_sum(ad.exp(x), w, tape), p)
        check_op(lambda x, tape: weighted_sum(ad.ln(x), w, tape), p)

    def test_ln_rejects_non_positive(self):
        with pytest.raises(ValueError, match="positive"):
            ad.ln(Tensor(np.array([1.0, 0.0])))

    def test_relu_gradient_masks_negatives(self):
        p = Parameter("p", np.array([-2.0, 3.0, -0.5, 1.5]))
        tape = Tape()
        backward(ad.sum_over(ad.relu(tape.lift(p))))
        np.testing.assert_array_equal(tape.lift(p).grad, [0.0, 1.0, 0.0, 1.0])

    def test_relu_fd(self):
        rng = np.random.default_rng(6)
        values = rng.standard_normal(8)
        values[np.abs(values) < 0.1] = 0.5  # keep clear of the kink
        p = Parameter("p", values)
        w = rng.standard_normal(8)
        check_op(lambda x, tape: weighted_sum(ad.relu(x), w, tape), p)

    def test_clamp_min_gradient_zero_in_clamped_region(self):
        p = Parameter("p", np.array([0.5, 2.0]))
        tape = Tape()
        backward(ad.sum_over(ad.clamp_min(tape.lift(p), 1.0)))
        np.testing.assert_array_equal(tape.lift(p).grad, [0.0, 1.0])


class TestShapeOps:
    def test_matmul_both_sides(self):
        rng = np.random.default_rng(7)
        a = Parameter("a", rng.standard_normal((2, 3)))
        b = Parameter("b", rng.standard_normal((3, 4)))
        w = rng.standard_normal((2, 4))
        check_op(lambda x, tape: weighted_sum(
            ad.matmul(x, ad.lift(b, tape)), w, tape), a)
        check_op(lambda x, tape: weighted_sum(
            ad.matmul(ad.lift(a, tape), x), w, tape), b)

    def test_concat_gradient_splits(self):
        rng = np.random.default_rng(8)
        p = Parameter("p", rng.standard_normal((2, 3)))
        q = Parameter("q", rng.standard_normal((4, 3)))
        w = rng.standard_normal((6, 3))
        check_op(lambda x, tape: weighted_sum(
            ad.concat([x, ad.lift(q, tape)], axis=0), w, tape), p)
        check_op(lambda x, tape: weighted_sum(
            ad.concat([ad.lift(p, tape), x], axis=0), w, tape), q)

    def test_concat_axis1(self):
        rng = np.random.default_rng(9)
        p = Parameter("p", rng.standard_normal((3, 2)))
        other = Tensor(rng.standard_normal((3, 5)))
        w = rng.standard_normal((3, 7))
        check_op(lambda x, tape: weighted_sum(ad.concat([other, x], axis=1), w, tape), p)

    def test_take_rows_accumulates_duplicates(self):
        rng = np.random.default_rng(10)
        p = Parameter("p", rng.standard_normal((4, 3)))
        rows = np.array([0, 2, 2, 3, 0, 2])
        w = rng.standard_normal((6, 3))
        check_op(lambda x, tape: weighted_sum(ad.take_rows(x, rows), w, tape), p)

    def test_add_at_rows_scatter(self):
        rng = np.random.default_rng(11)
        base = Parameter("base", rng.standard_normal((5, 2)))
        values = Parameter("values", rng.standard_normal((7, 2)))
        rows = np.array([1, 1, 0, 4, 3, 4, 4])
        w = rng.standard_normal((5, 2))
        check_op(lambda x, tape: weighted_sum(
            ad.add_at_rows(x, rows, ad.lift(values, tape)), w, tape), base)
        check_op(lambda x, tape: weighted_sum(
            ad.add_at_rows(ad.lift(base, tape), rows, x), w, tape), values)

    def test_reshape_and_transpose(self):
        rng = np.random.default_rng(12)
        p = Parameter("p", rng.standard_normal((2, 3, 4)))
        w1 = rng.standard_normal((4, 6))
        w2 = rng.standard_normal((4, 2, 3))
        check_op(lambda x, tape: weighted_sum(ad.reshape(x, (4, 6)), w1, tape), p)
        check_op(lambda x, tape: weighted_sum(ad.transpose(x, (2, 0, 1)), w2, tape), p)


class TestReductions:
    @pytest.mark.parametrize("axes,keepdims", [((1,), False), ((0, 2), False),
                                               ((1,), True), (None, False)])
    def test_sum_over(self, axes, keepdims):
        rng = np.random.default_rng(13)
        p = Parameter("p", rng.standard_normal((2, 3, 4)))

        def build(x, tape):
            reduced = ad.sum_over(x, axes=axes, keepdims=keepdims)
            w = np.arange(1.0, reduced.value.size + 1.0)
            return weighted_sum(reduced, w, tape)

        check_op(build, p)

    @pytest.mark.parametrize("axes,keepdims", [((1,), False), ((2,), True),
                                               ((0, 2), False)])
    def test_logsumexp_over(self, axes, keepdims):
        rng = np.random.default_rng(14)
        p = Parameter("p", rng.standard_normal((3, 4, 2)))

        def build(x, tape):
            reduced = ad.logsumexp_over(x, axes=axes, keepdims=keepdims)
            w = np.arange(1.0, reduced.value.size + 1.0)
            return weighted_sum(reduced, w, tape)

        check_op(build, p)

    def test_logsumexp_matches_numpy_reference(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((5, 7))
        out = ad.logsumexp_over(Tensor(x), axes=(1,))
        expected = np.log(np.exp(x).sum(axis=1))
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_logsumexp_with_minus_inf_entries(self):
        x = np.array([[0.0, -np.inf], [-np.inf, -np.inf]])
        p = Parameter("p", np.array([1.0, 2.0]))
        tape = Tape()
        lifted = tape.lift(p)
        mixed = ad.add(Tensor(x), ad.reshape(lifted, (1, 2)))
        out = ad.logsumexp_over(mixed, axes=(1,))
        np.testing.assert_allclose(out.value, [1.0, -np.inf])
        backward(ad.sum_over(out))
        # only the single finite entry receives gradient
        np.testing.assert_allclose(tape.lift(p).grad, [1.0, 0.0], atol=1e-12)


class TestBackwardMechanics:
    def test_gradient_is_bitwise_deterministic(self):
        rng = np.random.default_rng(16)
        p = Parameter("p", rng.standard_normal((4, 4)))
        q = Parameter("q", rng.standard_normal((4, 4)))

        def run():
            tape = Tape()
            x, y = tape.lift(p), tape.lift(q)
            z = ad.matmul(ad.relu(ad.add(x, y)), ad.exp(ad.scalar_multiply(y, 0.1)))
            loss = ad.logsumexp_over(ad.reshape(z, (16,)), axes=(0,))
            backward(loss)
            return tape.lift(p).grad.copy(), tape.lift(q).grad.copy()

        g1p, g1q = run()
        g2p, g2q = run()
        assert np.array_equal(g1p, g2p)
        assert np.array_equal(g1q, g2q)

    def test_untouched_parameter_gets_zero_grad(self):
        p = Parameter("p", np.ones(3))
        q = Parameter("q", np.ones(3))
        tape = Tape()
        x = tape.lift(p)
        tape.lift(q)  # lifted but unused
        backward(ad.sum_over(x))
        np.testing.assert_array_equal(tape.lift(q).grad, np.zeros(3))

    def test_fan_out_accumulates(self):
        p = Parameter("p", np.array([1.0, 2.0]))
        tape = Tape()
        x = tape.lift(p)
        loss = ad.sum_over(ad.add(ad.multiply(x, x), ad.scalar_multiply(x, 3.0)))
        backward(loss)
        np.testing.assert_allclose(tape.lift(p).grad, 2.0 * p.value + 3.0, atol=1e-12)

    def test_backward_requires_scalar_and_tape(self):
        p = Parameter("p", np.ones(3))
        tape = Tape()
        with pytest.raises(ValueError, match="scalar"):
            backward(tape.lift(p))
        with pytest.raises(ValueError, match="tape"):
            backward(Tensor(np.array(1.0)))

    def test_untraced_path_produces_plain_values(self):
        x = Tensor(np.array([1.0, 2.0]))
        out = ad.exp(ad.scalar_multiply(x, 2.0))
        assert out.tape is None
        np.testing.assert_allclose(out.value, np.exp([2.0, 4.0]), atol=1e-12)


class TestAdam:
    def test_single_step_closed_form(self):
        # with constant gradient g: m-hat = g, v-hat = g^2, so the first
        # update is exactly lr * g / (|g| + eps)
        p = Parameter("p", np.array([1.0, -2.0, 3.0]))
        start = p.value.copy()
        g = np.array([0.5, -1.5, 2.0])
        state = AdamState([p])
        adam_step(state, [g], lr=0.01)
        expected = start - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.value, expected, atol=1e-15)

    def test_constant_gradient_accumulates_linearly(self):
        p = Parameter("p", np.zeros(2))
        g = np.array([1.0, -4.0])
        state = AdamState([p])
        for _ in range(10):
            adam_step(state, [g], lr=0.1)
        expected = -10 * 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.value, expected, rtol=1e-10)

    def test_step_counter_and_moments_update(self):
        p = Parameter("p", np.zeros(1))
        state = AdamState([p])
        adam_step(state, [np.array([2.0])], lr=0.1)
        assert state.step_count == 1
        np.testing.assert_allclose(state.m[0], 0.1 * 2.0, atol=1e-15)
        np.testing.assert_allclose(state.v[0], 0.001 * 4.0, atol=1e-15)

    def test_clip_gradients_global_norm(self):
        grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
        clipped = clip_gradients(grads, max_norm=1.0)
        total = np.sqrt(sum(float((g ** 2).sum()) for g in clipped))
        np.testing.assert_allclose(total, 1.0, rtol=1e-12)
        np.testing.assert_allclose(clipped[0], [0.6, 0.0], rtol=1e-12)
        # under the cap: values unchanged
        small = [np.array([0.1, 0.2])]
        np.testing.assert_array_equal(clip_gradients(small, 10.0)[0], small[0])
