import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewshot_asd import autodiff as ad
from fewshot_asd.autodiff import GraphError, ParameterVector, ShapeError, Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def numeric_grad(f, x, step=1e-6):
    """Central differences of a numpy scalar function, coordinate by coordinate."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


class TestForwardOps:
    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]

    def test_relu_propagates_nan(self):
        assert np.isnan(ad.relu(Tensor([np.nan])).values[0])

    def test_pairwise_sqdist_345(self):
        out = ad.pairwise_sqdist(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]]))
        assert out.values.tolist() == [[25.0]]

    def test_logsumexp_large(self):
        out = ad.logsumexp(Tensor([[1000.0, 1000.0]]), axis=1)
        # shift-by-max reference in extended precision
        ref = np.longdouble(1000) + np.log(np.longdouble(2))
        assert abs(out.values[0] - float(ref)) < 1e-12

    def test_logsumexp_very_negative_is_finite(self):
        out = ad.logsumexp(Tensor([[-1e4, -1e4 - 1.0]]), axis=1)
        assert np.isfinite(out.values).all()

    def test_matmul_and_affine(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
        b = Tensor([0.5, 0.5, 0.5])
        assert ad.affine(x, w, b).values.tolist() == [[1.5, 2.5, 4.5]]

    def test_mean_axes(self):
        a = Tensor([[1.0, 2.0], [3.0, 6.0]])
        assert ad.mean(a).item() == 3.0
        assert ad.mean(a, axis=0).values.tolist() == [2.0, 4.0]
        assert ad.mean(a, axis=1).values.tolist() == [1.5, 4.5]

    def test_gather_and_take_rows(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        assert ad.gather(a, [1, 0, 1]).values.tolist() == [2.0, 3.0, 6.0]
        assert ad.take_rows(a, [2, 0]).values.tolist() == [[5.0, 6.0], [1.0, 2.0]]

    def test_nll_from_logits_equal_logits(self):
        out = ad.nll_from_logits(Tensor([[0.3, 0.3], [1.0, 1.0]]), [0, 1])
        assert out.item() == pytest.approx(np.log(2), abs=1e-15)

    def test_forward_is_bit_deterministic(self):
        rng = np.random.default_rng(0)
        x, c = rng.normal(size=(5, 3)), rng.normal(size=(2, 3))
        a = ad.logsumexp(ad.pairwise_sqdist(Tensor(x), Tensor(c)), axis=1).values
        b = ad.logsumexp(ad.pairwise_sqdist(Tensor(x), Tensor(c)), axis=1).values
        assert a.tobytes() == b.tobytes()


class TestShapeErrors:
    @pytest.mark.parametrize("op, args", [
        ("matmul", (Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))),
        ("add", (Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))),
        ("pairwise_sqdist", (Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))),
    ])
    def test_mismatch_names_op_and_shapes(self, op, args):
        with pytest.raises(ShapeError) as info:
            getattr(ad, op)(*args)
        assert info.value.op == op
        assert len(info.value.shapes) == 2
        assert op in str(info.value)

    def test_affine_bias_shape(self):
        with pytest.raises(ShapeError, match="affine"):
            ad.affine(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(Tensor(np.zeros((2, 2))), [0, 2])


class TestBackward:
    def test_quadratic(self):
        w = leaf([[1.0, 2.0]])
        loss = ad.mean(ad.pairwise_sqdist(w, Tensor([[0.0, 0.0]])))  # sum of w * w
        ad.backward(loss)
        assert w.grad.tolist() == [[2.0, 4.0]]

    def test_logsumexp_equal_logits(self):
        v = leaf([[0.0, 0.0]])
        ad.backward(ad.mean(ad.logsumexp(v, axis=1)))
        assert v.grad.tolist() == [[0.5, 0.5]]

    def test_non_scalar_loss_rejected(self):
        v = leaf([[1.0, 2.0]])
        with pytest.raises(GraphError, match="scalar"):
            ad.backward(ad.relu(v))

    def test_second_backward_rejected(self):
        v = leaf([[1.0, 2.0]])
        loss = ad.mean(ad.relu(v))
        ad.backward(loss)
        with pytest.raises(GraphError, match="consumed"):
            ad.backward(loss)

    def test_non_grad_leaves_untouched(self):
        v = leaf([[1.0, -2.0]])
        c = Tensor([[0.5, 0.5]])
        ad.backward(ad.mean(ad.pairwise_sqdist(v, c)))
        assert c.grad is None
        assert v.grad is not None

    def test_shared_subexpression_accumulates(self):
        # y = x + x -> dy/dx = 2
        x = leaf([[3.0]])
        ad.backward(ad.mean(ad.add(x, x)))
        assert x.grad.tolist() == [[2.0]]

    @pytest.mark.parametrize("op", ["relu", "logsumexp", "mean0", "mean1", "take_rows", "gather", "sqdist",
                                    "matmul", "bias_add", "scalar_add", "nll"])
    def test_op_gradient_matches_central_differences(self, op):
        rng = np.random.default_rng(zlib.crc32(op.encode()))
        x0 = rng.uniform(-1, 1, size=(4, 3))
        other = rng.uniform(-1, 1, size=(3, 3))
        wvec = rng.uniform(-1, 1, size=3)

        def build(t):
            if op == "relu":
                return ad.mean(ad.relu(t))
            if op == "logsumexp":
                return ad.mean(ad.logsumexp(t, axis=1))
            if op == "mean0":
                return ad.mean(ad.logsumexp(ad.mean(t, axis=0), axis=0))
            if op == "mean1":
                return ad.logsumexp(ad.mean(t, axis=1), axis=0)
            if op == "take_rows":
                return ad.mean(ad.pairwise_sqdist(ad.take_rows(t, [0, 2, 2]), Tensor(other)))
            if op == "gather":
                return ad.mean(ad.gather(ad.pairwise_sqdist(t, Tensor(other)), [0, 1, 2, 1]))
            if op == "sqdist":
                return ad.mean(ad.pairwise_sqdist(Tensor(other), t))
            if op == "matmul":
                return ad.mean(ad.relu(ad.matmul(t, Tensor(other))))
            if op == "bias_add":
                return ad.mean(ad.logsumexp(ad.add(t, Tensor(wvec)), axis=1))
            if op == "scalar_add":
                return ad.mean(ad.logsumexp(ad.add(t, Tensor(0.7)), axis=1))
            return ad.nll_from_logits(ad.scale(ad.pairwise_sqdist(t, Tensor(other)), -1.0), [0, 1, 2, 0])

        t = leaf(x0)
        ad.backward(build(t))
        num = numeric_grad(lambda x: build(Tensor(x)).item(), x0)
        np.testing.assert_allclose(t.grad, num, atol=1e-7)


class TestLogsumexpProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50)),
           st.floats(-1e3, 1e3))
    def test_shift_invariance(self, v, c):
        a = ad.logsumexp(Tensor(v), axis=1).values
        b = ad.logsumexp(Tensor(v + c), axis=1).values
        np.testing.assert_allclose(b, a + c, atol=1e-12 * max(1.0, abs(c)) + 1e-12)


class TestFiniteDifferenceCheck:
    def test_quadratic_is_near_exact(self):
        params = ParameterVector([("w", np.array([[1.0]]))])
        fn = lambda leaves: ad.mean(ad.pairwise_sqdist(leaves["w"], Tensor([[0.0]])))
        assert ad.finite_difference_check(fn, params, step=1e-5) < 1e-8

    def test_constant_function(self):
        params = ParameterVector([("w", np.array([1.0, 2.0]))])
        assert ad.finite_difference_check(lambda leaves: Tensor(3.0), params) == 0.0

    def test_non_finite_output_raises(self):
        params = ParameterVector([("w", np.array([[1.0]]))])
        fn = lambda leaves: ad.mean(ad.scale(leaves["w"], np.inf))
        with pytest.raises(FloatingPointError):
            ad.finite_difference_check(fn, params)

    def test_rejects_bad_step(self):
        params = ParameterVector([("w", np.array([1.0]))])
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda leaves: Tensor(0.0), params, step=0.0)

    def test_detects_wrong_gradient(self):
        params = ParameterVector([("w", np.array([[0.3, -0.4]]))])

        def broken(leaves):
            w = leaves["w"]
            out = ad._record(w.values * 2.0, "bad", (w,), lambda g: (g * 3.0,))
            return ad.mean(out)

        assert ad.finite_difference_check(broken, params) > 0.1

    def test_random_encoder_episode(self):
        from fewshot_asd.selfcheck import episode_objective, gradient_fixture
        fx = gradient_fixture(7)
        assert ad.finite_difference_check(episode_objective(fx), fx.params) < 1e-4


class TestParameterVector:
    def make(self):
        return ParameterVector([("a", np.arange(6.0).reshape(2, 3)), ("b", np.array([1.0, -1.0]))])

    def test_order_and_size(self):
        p = self.make()
        assert p.names() == ["a", "b"]
        assert p.size == 8
        assert p.flat().tolist() == [0, 1, 2, 3, 4, 5, 1, -1]

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ParameterVector([("a", [1.0]), ("a", [2.0])])

    def test_flat_roundtrip(self):
        p = self.make()
        assert p.with_flat(p.flat()).equals(p)

    def test_with_flat_wrong_size(self):
        with pytest.raises(ShapeError):
            self.make().with_flat(np.zeros(3))

    def test_copy_is_independent(self):
        p = self.make()
        q = p.copy()
        q["a"][0, 0] = 99
        assert p["a"][0, 0] == 0

    def test_equals_is_bitwise(self):
        p = self.make()
        q = p.map(lambda k, v: v + 0.0)
        assert p.equals(q)
        r = p.map(lambda k, v: v + 1e-300 if k == "b" else v)
        assert p.equals(r)  # 1e-300 vanishes against 1.0
        s = p.map(lambda k, v: np.nextafter(v, np.inf) if k == "b" else v)
        assert not p.equals(s)

    def test_check_aligned(self):
        p = self.make()
        with pytest.raises(ShapeError):
            p.check_aligned(ParameterVector([("a", np.zeros((2, 3)))]))

    def test_value_and_grad(self):
        p = ParameterVector([("w", np.array([[1.0, 2.0]]))])
        value, g = ad.value_and_grad(lambda lv: ad.mean(ad.pairwise_sqdist(lv["w"], Tensor([[0.0, 0.0]]))), p)
        assert value == 5.0
        assert g["w"].tolist() == [[2.0, 4.0]]
