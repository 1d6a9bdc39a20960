import math

import numpy as np
import pytest

from ovvad import numkernel as nk
from ovvad.errors import NumericalError


def naive_matmul(a, b):
    """Triple-loop oracle."""
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatrix:
    def test_rejects_nan_inf(self):
        with pytest.raises(ValueError):
            nk.as_matrix([[1.0, np.nan]])
        with pytest.raises(ValueError):
            nk.as_matrix([[np.inf, 0.0]])

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ValueError):
            nk.as_matrix([1.0, 2.0])

    def test_shape_pins(self):
        a = nk.as_matrix([[1.0, 2.0]], rows=1, cols=2)
        assert a.shape == (1, 2)
        with pytest.raises(ValueError):
            nk.as_matrix([[1.0, 2.0]], rows=2)


class TestMatmul:
    def test_identity(self):
        b = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(nk.matmul(np.eye(2), b), b)

    def test_hand_arithmetic(self):
        out = nk.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        got = nk.matmul(a, b)
        want = naive_matmul(a, b)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_triple_loop_up_to_64(self):
        rng = np.random.default_rng(1)
        for n, k, m in [(1, 1, 1), (8, 3, 5), (64, 64, 64)]:
            a = rng.standard_normal((n, k))
            b = rng.standard_normal((k, m))
            got = nk.matmul(a, b)
            want = naive_matmul(a, b)
            denom = max(1.0, np.max(np.abs(want)))
            assert np.max(np.abs(got - want)) / denom < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            nk.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestRowSoftmax:
    def test_uniform(self):
        out = nk.row_softmax(np.array([[0.0, 0.0, 0.0]]))
        assert np.allclose(out, 1.0 / 3.0)

    def test_scalar_oracle(self):
        # independent scalar evaluation of exp/sum for the row [0,-1,-2]
        row = [0.0, -1.0, -2.0]
        es = [math.exp(v) for v in row]
        z = sum(es)
        want = [e / z for e in es]
        got = nk.row_softmax(np.array([row]))[0]
        assert np.allclose(got, want, atol=1e-12)
        assert np.allclose(got, [0.66524, 0.24473, 0.09003], atol=1e-4)

    def test_extreme_magnitudes_no_overflow(self):
        out = nk.row_softmax(np.array([[1000.0, 0.0]]))
        assert np.isfinite(out).all()
        assert out[0, 0] > 1.0 - 1e-12
        assert abs(out[0].sum() - 1.0) < 1e-9

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            c = int(rng.integers(1, 12))
            a = rng.standard_normal((n, c)) * rng.choice([1.0, 100.0, 1e4])
            out = nk.row_softmax(a)
            assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-9


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        x = np.full((1, 4), 3.7)
        out = nk.layer_norm(x, np.ones(4), np.zeros(4))
        assert np.allclose(out, 0.0, atol=1e-6)

    def test_two_point_standardization(self):
        out = nk.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)

    def test_moments(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 32)) * 5 + 2
        out = nk.layer_norm(x, np.ones(32), np.zeros(32))
        assert np.max(np.abs(out.mean(axis=1))) < 1e-6
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-4

    def test_rejects_bad_eps_and_shapes(self):
        with pytest.raises(ValueError):
            nk.layer_norm(np.zeros((2, 3)), np.ones(3), np.zeros(3), eps=0.0)
        with pytest.raises(ValueError):
            nk.layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(3))


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        before = params["w"].copy()
        state = nk.adamw_init(params, lr=0.1, weight_decay=0.0)
        nk.adamw_step(params, {"w": np.zeros(3)}, state)
        assert np.array_equal(params["w"], before)

    def test_hand_evaluated_first_step(self):
        params = {"p": np.array([1.0])}
        state = nk.adamw_init(params, lr=0.1, betas=(0.9, 0.999), weight_decay=0.0)
        nk.adamw_step(params, {"p": np.array([1.0])}, state)
        # m=0.1, v=0.001, mhat=1, vhat=1 -> p = 1 - 0.1/(1+1e-8)
        assert abs(params["p"][0] - 0.9) < 1e-7

    def test_decoupled_decay_exact(self):
        params = {"p": np.array([2.0, -4.0])}
        before = params["p"].copy()
        state = nk.adamw_init(params, lr=0.05, weight_decay=0.1)
        nk.adamw_step(params, {"p": np.zeros(2)}, state)
        assert np.allclose(before - params["p"], 0.05 * 0.1 * before, atol=1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        g = rng.standard_normal(5)
        runs = []
        for _ in range(2):
            params = {"w": np.linspace(-1, 1, 5)}
            state = nk.adamw_init(params, lr=0.01)
            for _ in range(7):
                nk.adamw_step(params, {"w": g}, state)
            runs.append(params["w"].copy())
        assert np.array_equal(runs[0], runs[1])

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = nk.adamw_init(params, lr=0.1)
        with pytest.raises(ValueError):
            nk.adamw_step(params, {"w": np.zeros(4)}, state)


class TestGradCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((3, 4))

        def loss(p):
            return nk.vsum(p["w"] * p["w"])

        err = nk.grad_check(loss, {"w": w})
        assert err < 1e-8

    def test_dead_parameter_gets_exact_zero(self):
        def loss(p):
            return nk.vsum(p["a"] * p["a"])

        tape = nk.Tape()
        pv = {"a": tape.leaf(np.ones(3)), "b": tape.leaf(np.ones(2))}
        out = nk.vsum(pv["a"] * pv["a"])
        tape.backward(out)
        assert np.array_equal(tape.gradient(pv["b"]), np.zeros(2))
        err = nk.grad_check(lambda p: nk.vsum(p["a"] * p["a"]), {"a": np.ones(3), "b": np.ones(2)})
        assert err < 1e-8

    def test_nonfinite_loss_names_parameter(self):
        def loss(p):
            return log_of(p["bad"])

        def log_of(v):
            return nk.vsum(nk.log_v(v))

        with np.errstate(invalid="ignore"), pytest.raises(NumericalError, match="bad"):
            nk.grad_check(loss, {"bad": np.array([1e-9])}, eps=1e-5)


def _check_primitive(build, params, tol=1e-6, eps=1e-5):
    err = nk.grad_check(build, params, eps=eps)
    assert err < tol, f"grad error {err}"


class TestPrimitiveBackwardRules:
    """Each tape primitive against central finite differences."""

    def setup_method(self):
        self.rng = np.random.default_rng(6)

    def test_add_sub_broadcast(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal(4)
        _check_primitive(lambda p: nk.vsum((p["a"] + p["b"]) * (p["a"] - 0.5 * p["b"])), {"a": a, "b": b})

    def test_mul_div(self):
        a = self.rng.standard_normal((2, 5))
        b = self.rng.standard_normal((2, 5)) + 3.0
        _check_primitive(lambda p: nk.vsum(p["a"] * p["b"] / (p["b"] + 1.0)), {"a": a, "b": b})

    def test_matmul(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((4, 2))
        _check_primitive(lambda p: nk.vsum(nk.matmul_v(p["a"], p["b"])), {"a": a, "b": b})

    def test_transpose_reshape(self):
        a = self.rng.standard_normal((3, 4))
        _check_primitive(
            lambda p: nk.vsum(nk.reshape(nk.transpose(p["a"]), (2, 6)) * np.arange(12.0).reshape(2, 6)),
            {"a": a},
        )

    def test_concat_cols(self):
        a = self.rng.standard_normal((3, 2))
        b = self.rng.standard_normal((3, 3))
        w = np.arange(15.0).reshape(3, 5)
        _check_primitive(lambda p: nk.vsum(nk.concat_cols(p["a"], p["b"]) * w), {"a": a, "b": b})

    def test_row_softmax(self):
        a = self.rng.standard_normal((4, 5))
        w = self.rng.standard_normal((4, 5))
        _check_primitive(lambda p: nk.vsum(nk.row_softmax_v(p["a"]) * w), {"a": a})

    def test_sigmoid(self):
        a = self.rng.standard_normal((3, 3))
        _check_primitive(lambda p: nk.vsum(nk.sigmoid_v(p["a"])), {"a": a})

    def test_gelu(self):
        a = self.rng.standard_normal((4, 4)) * 2
        _check_primitive(lambda p: nk.vsum(nk.gelu_v(p["a"])), {"a": a})

    def test_layer_norm(self):
        x = self.rng.standard_normal((3, 6)) * 2
        gamma = self.rng.standard_normal(6)
        beta = self.rng.standard_normal(6)
        w = self.rng.standard_normal((3, 6))
        _check_primitive(
            lambda p: nk.vsum(nk.layer_norm_v(p["x"], p["g"], p["b"]) * w),
            {"x": x, "g": gamma, "b": beta},
            tol=1e-5,
        )

    def test_log_sqrt(self):
        a = np.abs(self.rng.standard_normal((3, 3))) + 0.5
        _check_primitive(lambda p: nk.vsum(nk.log_v(p["a"]) + nk.sqrt_v(p["a"])), {"a": a})

    def test_clip_interior_and_clamped(self):
        a = np.array([[-2.0, 0.3, 2.0]])
        tape = nk.Tape()
        v = tape.leaf(a)
        out = nk.vsum(nk.clip_v(v, -1.0, 1.0))
        tape.backward(out)
        assert np.array_equal(tape.gradient(v), np.array([[0.0, 1.0, 0.0]]))

    def test_sum_mean_axes(self):
        a = self.rng.standard_normal((3, 4))
        _check_primitive(
            lambda p: nk.vsum(nk.vmean(p["a"], axis=1, keepdims=True) * np.arange(3.0).reshape(3, 1))
            + nk.vsum(nk.vsum(p["a"], axis=0) * np.arange(4.0)),
            {"a": a},
        )

    def test_take_rows_cols(self):
        a = self.rng.standard_normal((4, 5))
        ridx = np.array([0, 2, 2])
        cidx = np.array([1, 1, 4])
        _check_primitive(
            lambda p: nk.vsum(nk.take_rows(p["a"], ridx)) + nk.vsum(nk.take_cols(p["a"], cidx)),
            {"a": a},
        )

    def test_take_along_cols(self):
        a = self.rng.standard_normal((3, 5))
        idx = np.array([[0, 1], [4, 4], [2, 0]])
        w = np.arange(6.0).reshape(3, 2)
        _check_primitive(lambda p: nk.vsum(nk.take_along_cols(p["a"], idx) * w), {"a": a})


class TestTapeInvariants:
    def test_backward_requires_scalar(self):
        tape = nk.Tape()
        v = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ValueError):
            tape.backward(v + v)

    def test_bit_identical_replay(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 4))
        grads = []
        for _ in range(2):
            tape = nk.Tape()
            v = tape.leaf(a)
            out = nk.vsum(nk.row_softmax_v(nk.gelu_v(v @ v)))
            tape.backward(out)
            grads.append(tape.gradient(v).copy())
        assert np.array_equal(grads[0], grads[1])
