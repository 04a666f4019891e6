import numpy as np
import pytest

from htmnet import ops
from htmnet.autodiff import (NonFiniteError, ShapeError, Tape, TapeError, Tensor, get_default_dtype,
                             grad_check, precision)


class TestTensor:
    def test_default_dtype_is_f32(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_restores(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_rejects_unknown_precision(self):
        with pytest.raises(ValueError):
            with precision(np.int32):
                pass

    def test_scalar_keeps_zero_rank(self):
        assert Tensor(3.0).shape == ()

    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 and t.ndim == 3


class TestBackwardExamples:
    def test_square_sum(self, f64):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_bilinear_form(self, f64):
        a = Tensor([[3.0]], requires_grad=True)
        b = Tensor([[5.0]], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.matmul(a, b))
        tape.backward(loss)
        assert a.grad.tolist() == [[5.0]]
        assert b.grad.tolist() == [[3.0]]

    def test_unreachable_leaf_has_no_grad(self, f64):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, 3.0))
            ops.mul(y, 2.0)
        tape.backward(loss)
        assert x.grad is not None and y.grad is None


class TestTapeErrors:
    def test_second_backward_raises(self, f64):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_loss(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_loss_not_on_tape(self, f64):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as other:
            loss = ops.sum(x)
        with Tape() as tape:
            pass
        with pytest.raises(TapeError):
            tape.backward(loss)
        other.backward(loss)

    def test_no_recording_without_grad(self):
        with Tape() as tape:
            ops.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape.records) == 0


class TestFiniteness:
    def test_non_finite_forward_names_op(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError, match="div"):
                ops.div(Tensor([1.0]), Tensor([0.0]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestGradCheck:
    def test_identity_is_exact(self, f64, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        assert grad_check(lambda t: t, [x]) <= 1e-10

    def test_requires_f64(self, rng):
        with pytest.raises(TypeError):
            grad_check(lambda t: t, [Tensor(rng.standard_normal(3))])

    @pytest.mark.parametrize("eps", [1e-7, 1e-2])
    def test_eps_range(self, f64, eps):
        with pytest.raises(ValueError):
            grad_check(lambda t: t, [Tensor([1.0])], eps=eps)

    def test_detects_nondeterminism(self, f64):
        calls = iter(range(100))
        with pytest.raises(RuntimeError, match="deterministic"):
            grad_check(lambda t: ops.mul(t, float(next(calls))), [Tensor([1.0])])

    def test_detects_wrong_backward(self, f64, rng):
        from htmnet.autodiff import make_op

        def bad_double(t):
            return make_op("bad_double", 2.0 * t.data, [t], lambda g: [3.0 * g])
        assert grad_check(bad_double, [Tensor(rng.standard_normal(4))]) > 0.1

    def test_composite_graph(self, f64, rng):
        a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))

        def f(x, y):
            return ops.softmax(ops.gelu(ops.matmul(x, y)), axis=-1)
        assert grad_check(f, [a, b]) <= 1e-6


class TestDeterminism:
    def test_forward_and_grads_repeat_bitwise(self, f64, rng):
        x0 = rng.standard_normal((2, 3, 8, 8))
        w0 = rng.standard_normal((4, 3, 3, 3))
        results = []
        for _ in range(2):
            x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
            with Tape() as tape:
                loss = ops.sum(ops.silu(ops.conv2d(x, w, padding=1)))
            tape.backward(loss)
            results.append((loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()))
        assert results[0] == results[1]
