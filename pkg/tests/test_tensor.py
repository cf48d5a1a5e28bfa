#!/usr/bin/env python3
"""
Tests for the differentiation tape and primitives.
"""

import threading

import numpy as np
import pytest

from hcan import tensor as T
from hcan.errors import ConfigError, DimensionError, DomainError, UsageError


def weighted_sum(out, weights):
    return T.sum(out * T.constant(weights))


class TestTensorBasics:
    """Construction, shapes and operator sugar."""

    def test_scalar_is_reshaped_to_one_by_one(self):
        t = T.constant(3.0)
        assert t.shape == (1, 1)
        assert t.item() == 3.0

    def test_zero_sized_tensor_rejected(self):
        with pytest.raises(DimensionError):
            T.constant(np.zeros((0, 3)))

    def test_values_are_row_major(self):
        t = T.constant([[1.0, 2.0], [3.0, 4.0]])
        assert t.values.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_item_needs_single_element(self):
        with pytest.raises(UsageError):
            T.constant(np.ones((2, 2))).item()

    def test_operator_sugar_matches_primitives(self):
        a = T.constant([[1.0, 2.0]])
        b = T.constant([[3.0, 5.0]])
        assert np.array_equal((a + b).data, [[4.0, 7.0]])
        assert np.array_equal((a - b).data, [[-2.0, -3.0]])
        assert np.array_equal((a * b).data, [[3.0, 10.0]])
        assert np.array_equal((a * 2.0).data, [[2.0, 4.0]])
        assert np.array_equal((-a).data, [[-1.0, -2.0]])
        assert np.array_equal((a @ b.T).data, [[13.0]])

    def test_no_implicit_broadcast(self):
        with pytest.raises(DimensionError):
            T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((1, 3))))

    def test_matmul_inner_dimension_checked(self):
        with pytest.raises(DimensionError):
            T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))

    def test_dtype_is_preserved(self):
        a = T.constant(np.ones((2, 2), dtype=np.float32))
        assert (T.tanh(a) * 0.5).dtype == np.float32


class TestPrimitiveValues:
    """Forward values and edge cases of individual primitives."""

    def test_sigmoid_at_zero_is_exact_half(self):
        assert T.sigmoid(T.constant(0.0)).item() == 0.5

    def test_sigmoid_is_finite_for_extreme_inputs(self):
        out = T.sigmoid(T.constant([[-1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(0.0)
        assert out[0, 1] == pytest.approx(1.0)

    def test_log_rejects_non_positive(self):
        with pytest.raises(DomainError):
            T.log(T.constant([[1.0, 0.0]]))

    def test_softmax_rows_sum_to_one(self):
        x = T.constant(np.random.default_rng(0).standard_normal((4, 6)) * 10)
        assert np.allclose(T.softmax(x).data.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_is_shift_invariant(self):
        x = np.random.default_rng(1).standard_normal((3, 5))
        assert np.allclose(T.softmax(T.constant(x)).data, T.softmax(T.constant(x + 100.0)).data, atol=1e-12)

    def test_masked_softmax_gives_zero_weight_to_masked_entries(self):
        mask = np.array([[True, False, True]])
        out = T.softmax(T.constant([[1.0, 50.0, 1.0]]), mask=mask).data
        assert out[0, 1] == 0.0
        assert np.allclose(out[0, [0, 2]], [0.5, 0.5])

    def test_fully_masked_row_is_all_zero_with_zero_gradient(self):
        x = T.parameter(np.random.default_rng(2).standard_normal((3, 3)))
        mask = np.tril(np.ones((3, 3), dtype=bool), k=-1)
        with T.Tape():
            y = T.softmax(x, mask=mask)
            assert np.all(y.data[0] == 0.0)
            (g,) = T.gradients(weighted_sum(y, np.arange(9.0).reshape(3, 3)), [x])
        assert np.all(g[0] == 0.0)
        assert np.all(g[~mask] == 0.0)

    def test_dropout_identity_when_not_training(self):
        x = T.constant(np.ones((2, 3)))
        assert T.dropout(x, 0.5, training=False) is x

    def test_dropout_rate_range(self):
        with pytest.raises(ConfigError):
            T.dropout(T.constant(np.ones((2, 2))), 1.0, training=True, rng=np.random.default_rng(0))

    def test_dropout_training_needs_rng(self):
        with pytest.raises(UsageError):
            T.dropout(T.constant(np.ones((2, 2))), 0.2, training=True)

    def test_dropout_scales_kept_entries(self):
        out = T.dropout(T.constant(np.ones((50, 50))), 0.2, True, np.random.default_rng(3)).data
        kept = out[out != 0]
        assert np.allclose(kept, 1.25)

    def test_expand_and_shape_errors(self):
        assert T.expand(T.constant([[1.0, 2.0]]), (3, 2)).shape == (3, 2)
        with pytest.raises(DimensionError):
            T.expand(T.constant(np.ones((2, 2))), (3, 2))
        with pytest.raises(DimensionError):
            T.slice_cols(T.constant(np.ones((2, 4))), 2, 5)
        with pytest.raises(DimensionError):
            T.row(T.constant(np.ones((2, 4))), 2)

    def test_concat_single_part_is_identity(self):
        a = T.constant(np.ones((2, 2)))
        assert T.concat([a]) is a

    def test_elementwise_dispatch(self):
        a = T.constant([[0.5]])
        assert T.elementwise("exp", a).item() == pytest.approx(np.exp(0.5))
        assert T.elementwise("scale", a, constant=4.0).item() == 2.0
        with pytest.raises(UsageError):
            T.elementwise("mul", a)
        with pytest.raises(UsageError):
            T.elementwise("cube", a)

    def test_softmax_matches_term_by_term_reference(self):
        x = np.random.default_rng(9).standard_normal((5, 7)) * 3
        out = T.softmax(T.constant(x)).data
        for i in range(5):
            denom = sum(np.exp(x[i, k]) for k in range(7))
            for j in range(7):
                assert abs(out[i, j] - np.exp(x[i, j]) / denom) < 1e-12

    def test_dropout_keeps_half_and_preserves_the_mean(self):
        x = T.constant(np.full((100, 1000), 2.0))
        out = T.dropout(x, 0.5, True, np.random.default_rng(10)).data
        survivors = np.count_nonzero(out) / out.size
        assert survivors == pytest.approx(0.5, abs=0.01)
        assert out.mean() == pytest.approx(2.0, rel=0.01)


def reference_lstm(gates_x, w_h, reverse=False):
    n, width = gates_x.shape
    d = width // 4
    h = np.zeros(d)
    c = np.zeros(d)
    out = np.zeros((n, d))
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = gates_x[t] + h @ w_h
        i = 1.0 / (1.0 + np.exp(-z[:d]))
        f = 1.0 / (1.0 + np.exp(-z[d:2 * d]))
        o = 1.0 / (1.0 + np.exp(-z[2 * d:3 * d]))
        g = np.tanh(z[3 * d:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[t] = h
    return out


def reference_attention(q, k, v, heads, scale, mask=None, alt_q=None, use_q=None):
    n, width = q.shape
    m = k.shape[0]
    sub = width // heads
    vsub = v.shape[1] // heads
    out = np.zeros((n, v.shape[1]))
    for h in range(heads):
        cols = slice(h * sub, (h + 1) * sub)
        vcols = slice(h * vsub, (h + 1) * vsub)
        for i in range(n):
            allowed = [j for j in range(m) if mask is None or mask[i, j]]
            if not allowed:
                continue
            logits = []
            for j in allowed:
                query = q[i, cols] if use_q is None or use_q[i, j] else alt_q[i, cols]
                logits.append(scale * float(query @ k[j, cols]))
            e = np.exp(np.array(logits) - max(logits))
            w = e / e.sum()
            for weight, j in zip(w, allowed):
                out[i, vcols] += weight * v[j, vcols]
    return out


class TestFusedPrimitives:
    """log_softmax, lstm_scan and attention against plain references."""

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(11).standard_normal((4, 5))
        expected = np.log(T.softmax(T.constant(x)).data)
        assert np.allclose(T.log_softmax(T.constant(x)).data, expected, atol=1e-12)

    def test_log_softmax_is_finite_where_softmax_underflows(self):
        x = T.constant([[0.0, 1000.0, -1000.0]])
        assert T.softmax(x).data[0, 0] == 0.0
        assert np.allclose(T.log_softmax(x).data, [[-1000.0, 0.0, -2000.0]])

    @pytest.mark.parametrize("reverse", [False, True])
    def test_lstm_scan_matches_step_by_step_reference(self, reverse):
        rng = np.random.default_rng(12)
        gates_x = rng.standard_normal((6, 12))
        w_h = rng.standard_normal((3, 12)) * 0.5
        out = T.lstm_scan(T.constant(gates_x), T.constant(w_h), reverse=reverse).data
        assert np.allclose(out, reference_lstm(gates_x, w_h, reverse), atol=1e-12)

    def test_lstm_scan_reverse_equals_forward_on_reversed_rows(self):
        rng = np.random.default_rng(13)
        gates_x = rng.standard_normal((5, 8))
        w_h = T.constant(rng.standard_normal((2, 8)))
        backward_run = T.lstm_scan(T.constant(gates_x), w_h, reverse=True).data
        forward_on_flipped = T.lstm_scan(T.constant(gates_x[::-1].copy()), w_h).data
        assert np.allclose(backward_run, forward_on_flipped[::-1], atol=1e-14)

    def test_lstm_scan_shape_checks(self):
        with pytest.raises(DimensionError):
            T.lstm_scan(T.constant(np.ones((3, 8))), T.constant(np.ones((3, 12))))

    def test_attention_matches_per_pair_reference(self):
        rng = np.random.default_rng(14)
        q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
        out, weights = T.attention(T.constant(q), T.constant(k), T.constant(v), 3, scale=0.5)
        assert weights.shape == (3, 4, 4)
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.abs(out.data - reference_attention(q, k, v, 3, 0.5)).max() < 1e-12

    def test_masked_attention_with_alternate_queries(self):
        rng = np.random.default_rng(15)
        q, k, v, alt = (rng.standard_normal((4, 4)) for _ in range(4))
        mask = np.tril(np.ones((4, 4), dtype=bool), k=-1)
        use_q = rng.random((4, 4)) < 0.5
        out, weights = T.attention(T.constant(q), T.constant(k), T.constant(v), 2, mask=mask,
                                   alt_q=T.constant(alt), use_q=use_q)
        assert np.all(out.data[0] == 0.0)
        assert np.all(weights[:, ~mask] == 0.0)
        expected = reference_attention(q, k, v, 2, 1.0, mask=mask, alt_q=alt, use_q=use_q)
        assert np.abs(out.data - expected).max() < 1e-12

    def test_attention_argument_checks(self):
        x = T.constant(np.ones((3, 4)))
        with pytest.raises(ConfigError):
            T.attention(x, x, x, 3)
        with pytest.raises(UsageError):
            T.attention(x, x, x, 2, alt_q=x)
        with pytest.raises(DimensionError):
            T.attention(x, x, x, 2, mask=np.ones((2, 3), dtype=bool))


class TestTape:
    """Recording, backward and gradients."""

    def test_ops_outside_a_tape_are_not_recorded(self):
        x = T.parameter([[1.0]])
        y = T.tanh(x)
        assert y.tape_id is None

    def test_ops_on_constants_are_not_recorded(self):
        with T.Tape() as tape:
            T.tanh(T.constant([[1.0]]))
        assert len(tape) == 0

    def test_backward_needs_scalar_root(self):
        x = T.parameter(np.ones((2, 2)))
        with T.Tape():
            y = T.tanh(x)
            with pytest.raises(UsageError):
                T.backward(y)

    def test_backward_needs_recorded_root(self):
        with pytest.raises(UsageError):
            T.backward(T.constant([[1.0]]))

    def test_simple_gradient(self):
        x = T.parameter([[3.0]])
        with T.Tape():
            y = x * x
            T.backward(y)
        assert x.grad[0, 0] == 6.0

    def test_backward_twice_doubles_leaf_gradients(self):
        rng = np.random.default_rng(4)
        w = T.parameter(rng.standard_normal((3, 2)))
        x = T.constant(rng.standard_normal((4, 3)))
        with T.Tape():
            loss = T.sum(T.tanh(x @ w))
            T.backward(loss)
            once = w.grad.copy()
            T.backward(loss)
        assert np.array_equal(w.grad, 2 * once)

    def test_backward_twice_doubles_intermediate_gradients(self):
        rng = np.random.default_rng(16)
        w = T.parameter(rng.standard_normal((3, 2)))
        x = T.constant(rng.standard_normal((4, 3)))
        with T.Tape():
            hidden = x @ w
            loss = T.sum(T.tanh(hidden))
            T.backward(loss)
            once = hidden.grad.copy()
            T.backward(loss)
        assert np.any(once != 0.0)
        assert np.array_equal(hidden.grad, 2 * once)

    def test_gradients_do_not_touch_grad(self):
        x = T.parameter([[2.0, -1.0]])
        with T.Tape():
            y = T.sum(x * x)
            (g,) = T.gradients(y, [x])
        assert np.array_equal(g, [[4.0, -2.0]])
        assert np.all(x.grad == 0.0)

    def test_gradients_for_unreachable_tensor_are_zero(self):
        x = T.parameter([[1.0]])
        other = T.parameter([[5.0, 6.0]])
        with T.Tape():
            y = T.sum(x * 2.0)
            gx, go = T.gradients(y, [x, other])
        assert gx[0, 0] == 2.0
        assert np.all(go == 0.0)

    def test_shared_input_accumulates(self):
        x = T.parameter([[1.5]])
        with T.Tape():
            T.backward(T.add(x, x))
        assert x.grad[0, 0] == 2.0

    def test_zero_grad(self):
        x = T.parameter([[1.0]])
        with T.Tape():
            T.backward(x * 3.0)
        T.zero_grad([x])
        assert x.grad[0, 0] == 0.0

    def test_suspend_tape(self):
        x = T.parameter([[1.0]])
        with T.Tape() as tape:
            with T.suspend_tape():
                T.tanh(x)
            assert len(tape) == 0
            T.tanh(x)
        assert len(tape) == 1

    def test_tapes_are_thread_local(self):
        seen = {}

        def worker():
            seen["tape"] = T.active_tape()

        with T.Tape():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen["tape"] is None


class TestFiniteDifferences:
    """finite_diff_check itself."""

    def test_matches_for_smooth_objective(self):
        rng = np.random.default_rng(5)
        w = T.parameter(rng.standard_normal((3, 3)))
        x = T.constant(rng.standard_normal((2, 3)))
        err = T.finite_diff_check(lambda: T.sum(T.sigmoid(x @ w)), [w])
        assert err < 1e-6

    def test_restores_parameter_values(self):
        w = T.parameter(np.random.default_rng(6).standard_normal((2, 2)))
        before = w.data.copy()
        T.finite_diff_check(lambda: T.sum(T.exp(w)), [w])
        assert np.array_equal(w.data, before)

    def test_constant_objective_has_zero_error(self):
        w = T.parameter([[1.0]])
        assert T.finite_diff_check(lambda: T.constant([[2.0]]), [w]) == 0.0

    def test_detects_a_wrong_rule(self, monkeypatch):
        monkeypatch.setitem(T.BACKWARD_RULES, "tanh", lambda node, g, needs: (g,))
        w = T.parameter(np.random.default_rng(7).uniform(0.5, 1.5, size=(2, 2)))
        assert T.finite_diff_check(lambda: T.sum(T.tanh(w)), [w]) > 1e-2

    def test_sampling_limits_coordinates(self):
        calls = []
        w = T.parameter(np.ones((10, 10)))

        def f():
            calls.append(1)
            return T.sum(w * 2.0)

        T.finite_diff_check(f, [w], max_coords=5, rng=np.random.default_rng(0))
        assert len(calls) == 1 + 2 * 5

    def test_rejects_non_positive_step(self):
        w = T.parameter([[1.0]])
        with pytest.raises(ConfigError):
            T.finite_diff_check(lambda: T.sum(w), [w], step=0.0)

    def test_report_counts_coordinates_below_the_floor(self):
        w = T.parameter([[1.0, 1e-9, 2.0]])
        scale = T.constant([[1.0, 0.0, 1.0]])
        report = T.finite_diff_report(lambda: T.sum(w * w * scale), [w], floor=1e-6)
        assert report.checked == 3
        assert report.below_floor == 1
        assert report.worst < 1e-6

    def test_floor_absorbs_round_off_on_tiny_gradients(self):
        w = T.parameter([[0.3]])
        # the change in f across the step is below one ulp of 100
        f = lambda: T.sum(T.exp(w) * 1e-11) + T.constant([[100.0]])
        tight = T.finite_diff_report(f, [w], floor=1e-12)
        loose = T.finite_diff_report(f, [w], floor=1e-5)
        assert loose.worst < 1e-5
        assert loose.below_floor == 1
        assert tight.worst > loose.worst

    def test_rejects_non_positive_floor(self):
        w = T.parameter([[1.0]])
        with pytest.raises(ConfigError):
            T.finite_diff_report(lambda: T.sum(w), [w], floor=0.0)

    @pytest.mark.parametrize("reverse", [False, True])
    def test_lstm_scan_gradients(self, reverse):
        rng = np.random.default_rng(17)
        gates_x = T.parameter(rng.standard_normal((5, 8)))
        w_h = T.parameter(rng.standard_normal((2, 8)) * 0.5)
        weights = rng.standard_normal((5, 2))
        f = lambda: weighted_sum(T.lstm_scan(gates_x, w_h, reverse=reverse), weights)
        assert T.finite_diff_check(f, [gates_x, w_h]) < 1e-5

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(18)
        x = T.parameter(rng.uniform(-2, 2, size=(3, 4)))
        weights = rng.standard_normal((3, 4))
        assert T.finite_diff_check(lambda: weighted_sum(T.log_softmax(x), weights), [x]) < 1e-5

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp", "softmax"])
    def test_unary_primitives(self, op):
        rng = np.random.default_rng(8)
        x = T.parameter(rng.uniform(-2, 2, size=(3, 4)))
        weights = rng.standard_normal((3, 4))
        fn = getattr(T, op)
        assert T.finite_diff_check(lambda: weighted_sum(fn(x), weights), [x]) < 1e-5
