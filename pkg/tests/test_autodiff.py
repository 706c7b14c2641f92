import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmfusion import autodiff as ad
from mmfusion.gradcheck import check_primitives


def finite_diff(f, x, h=1e-6):
    """Central differences of scalar f(x) w.r.t. every entry of array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                     elements=st.floats(-50, 50, allow_nan=False))


class TestTensor:
    def test_shape_and_data(self):
        t = ad.Tensor([[1, 2, 3], [4, 5, 6]])
        assert t.shape == (2, 3)
        assert t.data.dtype == np.float64
        assert t.data.size == 6

    def test_nonfinite_forward_is_hard_error(self):
        x = ad.Tensor([1e308, 1e308])
        with pytest.raises(ad.NonFiniteError):
            ad.add(x, x)

    def test_error_names_scope(self):
        with ad.scope("layer7"):
            with pytest.raises(ad.NonFiniteError, match="layer7"):
                ad.mul(ad.Tensor([1e200]), ad.Tensor([1e200]))


class TestMatmulBias:
    def test_identity(self):
        out = ad.matmul_bias(ad.Tensor(np.eye(2)), ad.Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_zero_input_gives_bias_rows(self):
        out = ad.matmul_bias(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.ones((3, 4))),
                             ad.Tensor([1, 2, 3, 4]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]] * 2)

    def test_small_case_and_gradient(self):
        A = ad.Parameter("A", np.array([[1.0, 2.0]]))
        W = ad.Tensor([[3.0], [4.0]])
        b = ad.Tensor([1.0])
        with ad.Tape() as tape:
            out = ad.matmul_bias(A, W, b)
            loss = ad.sum(out)
        assert out.data.tolist() == [[12.0]]
        tape.backward(loss)
        fd = finite_diff(lambda a: float(np.sum(a @ W.data + b.data)), A.data)
        np.testing.assert_allclose(tape.grad(A), fd, atol=1e-8)
        np.testing.assert_allclose(tape.grad(A), [[3.0, 4.0]], atol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul_bias(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 2))))

    def test_bias_length_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul_bias(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))), ad.Tensor([1.0]))


class TestSoftmax:
    def test_constant_row(self):
        for c in (-7.0, 0.0, 123.0):
            np.testing.assert_allclose(ad.softmax_rows(ad.Tensor([[c, c, c]])).data, [[1 / 3] * 3],
                                       rtol=0, atol=1e-15)

    def test_single_column(self):
        assert ad.softmax_rows(ad.Tensor([[42.0]])).data.tolist() == [[1.0]]

    def test_high_precision_oracle(self):
        getcontext().prec = 40
        e = [Decimal(k).exp() for k in (1, 2, 3)]
        ref = [float(v / sum(e)) for v in e]
        out = ad.softmax_rows(ad.Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=0)

    def test_large_inputs_are_stable(self):
        out = ad.softmax_rows(ad.Tensor([[1000.0, 1000.0]])).data
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    @given(finite_rows)
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, X):
        s = ad.softmax_rows(ad.Tensor(X)).data
        assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all((s > 0) & (s <= 1))

    @given(finite_rows, st.floats(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, X, c):
        a = ad.softmax_rows(ad.Tensor(X)).data
        b = ad.softmax_rows(ad.Tensor(X + c)).data
        assert np.max(np.abs(a - b)) <= 1e-12


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = ad.layer_norm(ad.Tensor([[5.0, 5, 5, 5]]), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, [[0, 0, 0, 0]])

    def test_beta_shift(self):
        out = ad.layer_norm(ad.Tensor([[0.0, 0.0]]), ad.Tensor(np.ones(2)), ad.Tensor([7.0, 9.0]))
        np.testing.assert_array_equal(out.data, [[7.0, 9.0]])

    def test_direct_formula(self):
        getcontext().prec = 40
        v = Decimal(1)  # population variance of [1, 3]
        ref = float(Decimal(1) / (v + Decimal("1e-5")).sqrt())
        out = ad.layer_norm(ad.Tensor([[1.0, 3.0]]), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)),
                            eps=1e-5).data[0]
        np.testing.assert_allclose(out, [-ref, ref], rtol=1e-13)

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                  elements=st.floats(-100, 100, allow_nan=False)))
    @settings(max_examples=60, deadline=None)
    def test_standardises_rows(self, X):
        d = X.shape[1]
        out = ad.layer_norm(ad.Tensor(X), ad.Tensor(np.ones(d)), ad.Tensor(np.zeros(d))).data
        assert np.all(np.abs(out.mean(axis=1)) <= 1e-9)
        spread = X.var(axis=1) > 1.0
        if np.any(spread):
            np.testing.assert_allclose(out[spread].var(axis=1), 1.0, atol=1e-4)

    def test_variance_when_sigma_dominates_eps(self):
        X = np.random.default_rng(0).normal(0, 10, size=(5, 16))
        out = ad.layer_norm(ad.Tensor(X), ad.Tensor(np.ones(16)), ad.Tensor(np.zeros(16))).data
        assert np.all(np.abs(out.var(axis=1) - 1.0) <= 1e-6)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 5, 6))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernels(self):
        x = np.random.default_rng(2).normal(size=(2, 4, 4))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.zeros((3, 2, 3, 3))), padding=1)
        assert out.shape == (3, 4, 4)
        assert not np.any(out.data)

    def test_hand_enumerated_windows(self):
        x = np.arange(1.0, 10.0).reshape(1, 3, 3)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, [[[12, 16], [24, 28]]])

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 4, 4))
        for n in range(2):
            for o in range(4):
                for i in range(4):
                    for j in range(4):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_non_integral_output_is_configuration_error(self):
        with pytest.raises(ad.ConfigurationError):
            ad.conv2d(ad.Tensor(np.ones((1, 32, 32))), ad.Tensor(np.ones((1, 1, 3, 3))), stride=2)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ad.ConfigurationError):
            ad.conv2d(ad.Tensor(np.ones((1, 2, 2))), ad.Tensor(np.ones((1, 1, 3, 3))))


class TestPoolingAndRelu:
    def test_gap(self):
        assert ad.global_avg_pool(ad.Tensor(np.full((1, 3, 3), 2.5))).data.tolist() == [2.5]
        x = np.arange(4.0).reshape(4, 1, 1)
        np.testing.assert_array_equal(ad.global_avg_pool(ad.Tensor(x)).data, [0, 1, 2, 3])
        assert ad.global_avg_pool(ad.Tensor([[[1.0, 2.0], [3.0, 6.0]]])).data.tolist() == [3.0]

    def test_relu_values(self):
        assert ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_relu_negative_block(self):
        x = ad.Parameter("x", -np.ones(4))
        with ad.Tape() as tape:
            loss = ad.sum(ad.relu(x))
        tape.backward(loss)
        assert not np.any(tape.grad(x))
        assert loss.item() == 0.0

    def test_relu_gradient(self):
        x = ad.Parameter("x", np.array([-1.0, 3.0]))
        with ad.Tape() as tape:
            loss = ad.sum(ad.relu(x))
        tape.backward(loss)
        fd = finite_diff(lambda v: float(np.maximum(v, 0).sum()), x.data)
        np.testing.assert_allclose(tape.grad(x), fd, atol=1e-9)
        assert tape.grad(x).tolist() == [0.0, 1.0]

    def test_relu_subgradient_at_zero(self):
        x = ad.Parameter("x", np.zeros(3))
        with ad.Tape() as tape:
            loss = ad.sum(ad.relu(x))
        tape.backward(loss)
        assert tape.grad(x).tolist() == [0.0, 0.0, 0.0]


class TestBackward:
    def test_quadratic(self):
        x = ad.Parameter("x", np.array([1.0, -2.0]))
        with ad.Tape() as tape:
            loss = ad.sum(ad.mul(x, x))
        grads = ad.backward(loss, tape, {"x": x})
        assert grads["x"].tolist() == [2.0, -4.0]

    def test_unreachable_parameter_gets_exact_zero(self):
        x = ad.Parameter("x", np.array([1.0, 2.0]))
        y = ad.Parameter("y", np.array([[3.0, 4.0]]))
        with ad.Tape() as tape:
            loss = ad.sum(ad.scale(x, 3.0))
        grads = ad.backward(loss, tape, {"x": x, "y": y})
        assert grads["y"].shape == (1, 2)
        assert not np.any(grads["y"])

    def test_fan_out_accumulates(self):
        x = ad.Parameter("x", np.array([2.0]))
        with ad.Tape() as tape:
            loss = ad.sum(ad.add(ad.mul(x, x), ad.scale(x, 5.0)))
        assert ad.backward(loss, tape, {"x": x})["x"].tolist() == [9.0]

    def test_non_scalar_loss_rejected(self):
        x = ad.Parameter("x", np.ones(3))
        with ad.Tape() as tape:
            out = ad.scale(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(out)

    def test_tape_is_topological(self):
        x = ad.Parameter("x", np.ones((2, 2)))
        with ad.Tape() as tape:
            loss = ad.sum(ad.softmax_rows(ad.matmul(x, x)))
        seen = {x.node_id}
        for entry in tape.entries:
            inputs, out = entry[1], entry[2]
            for t in inputs:
                if t.requires_grad:
                    assert t.node_id in seen or t.node_id is None
            seen.add(out.node_id)
        assert loss.node_id in seen

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        W = ad.Parameter("W", rng.normal(size=(3, 3)))
        X = rng.normal(size=(4, 3))

        def run():
            with ad.Tape() as tape:
                loss = ad.sum(ad.softmax_rows(ad.matmul_bias(ad.Tensor(X), W)))
            return loss.item(), ad.backward(loss, tape, {"W": W})["W"]

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        assert np.array_equal(g1, g2)


class TestGradCheck:
    def test_linear_function_at_rounding_level(self):
        w = ad.Parameter("w", np.array([1.0, -3.0, 0.5]))
        c = np.array([2.0, 1.0, -4.0])
        rep = ad.grad_check(lambda: ad.sum(ad.mul(w, c)), {"w": w})
        assert rep.passed
        assert rep.max_error < 1e-8

    def test_unused_parameter_passes(self):
        w = ad.Parameter("w", np.array([1.0]))
        u = ad.Parameter("u", np.array([5.0, 6.0]))
        rep = ad.grad_check(lambda: ad.sum(ad.mul(w, w)), {"w": w, "u": u})
        assert rep.passed
        assert rep.errors["u"] == 0.0

    def test_detects_wrong_gradient(self):
        w = ad.Parameter("w", np.array([1.0, 2.0]))

        def bad():
            out = ad.mul(w, w)
            # forward uses w^2 but we hand back a tensor carrying a wrong rule
            wrong = ad.Tensor(out.data * 1.0)
            return ad.sum(ad.add(ad.scale(w, 1.0), ad.sub(wrong, w)))

        rep = ad.grad_check(bad, {"w": w})
        assert not rep.passed
        assert "w" in rep.failures()

    def test_nan_gradient_fails_with_name(self):
        w = ad.Parameter("w", np.array([1.0]))

        def f():
            return ad.sum(ad.mul(w, w))

        rep = ad.GradCheckReport({"w": math.nan}, 1e-4)
        assert not rep.passed
        assert list(rep.failures()) == ["w"]
        assert ad.grad_check(f, {"w": w}).passed

    def test_parameters_restored(self):
        w = ad.Parameter("w", np.array([0.3, -0.7]))
        before = w.data.copy()
        ad.grad_check(lambda: ad.sum(ad.mul(w, w)), {"w": w})
        assert np.array_equal(w.data, before)

    @pytest.mark.parametrize("seed", range(5))
    def test_every_primitive(self, seed):
        results = check_primitives(seed)
        bad = [(r.name, r.max_error) for r in results if not r.passed]
        assert not bad
        assert len(results) >= 18

    def test_relative_error_definition(self):
        assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert ad.relative_error(np.array([1.0]), np.array([0.5])) == 0.5
