import threading

import numpy as np
import pytest

from conftest import analytic_grad, numerical_grad
from errors import DimensionError, StaleTapeError, TapeError
from tensor import Tape, Tensor, concat, default_dtype, get_default_dtype, no_grad, parameter


# ── Recording ───────────────────────────────────────────────────────────────

class TestTape:
    def test_backward_twice_is_stale(self):
        x = parameter([1.0, 2.0])
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        with pytest.raises(StaleTapeError):
            tape.backward(loss)

    def test_recording_on_consumed_tape_is_stale(self):
        x = parameter([1.0])
        with Tape() as tape:
            loss = (x * 2.0).sum()
            tape.backward(loss)
            with pytest.raises(StaleTapeError):
                x * 3.0

    def test_empty_tape(self):
        with Tape() as tape:
            pass
        with pytest.raises(TapeError):
            tape.backward(Tensor(1.0))

    def test_non_scalar_loss(self):
        x = parameter([1.0, 2.0])
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_no_grad_records_nothing(self):
        x = parameter([1.0, 2.0])
        with Tape() as tape:
            with no_grad():
                x * 2.0
        assert len(tape) == 0

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            Tensor([1.0]) * 2.0
        assert len(tape) == 0

    def test_gradients_accumulate_across_uses(self):
        x = parameter([3.0])
        (g,) = analytic_grad(lambda: (x * x + x).sum(), [x])
        assert g[0] == pytest.approx(7.0)

    def test_unused_leaf_gets_zero_gradient(self):
        x = parameter([1.0, 2.0])
        y = parameter([5.0])
        gx, gy = analytic_grad(lambda: (x * 1.0).sum() + (y * 0.0).sum(), [x, y])
        np.testing.assert_array_equal(gx, [1.0, 1.0])
        np.testing.assert_array_equal(gy, [0.0])

    def test_tapes_are_per_thread(self):
        errors = []

        def worker(seed):
            try:
                x = parameter(np.full(3, float(seed)))
                (g,) = analytic_grad(lambda: (x * x).sum(), [x])
                np.testing.assert_allclose(g, 2.0 * seed)
            except Exception as exc:  # surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(s,)) for s in range(1, 6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors


# ── Ops ─────────────────────────────────────────────────────────────────────

class TestOps:
    def test_broadcast_gradient_is_summed(self, float64):
        a = parameter(np.ones((3, 4)))
        b = parameter(np.arange(4.0))
        ga, gb = analytic_grad(lambda: (a * b).sum(), [a, b])
        np.testing.assert_allclose(ga, np.tile(np.arange(4.0), (3, 1)))
        np.testing.assert_allclose(gb, np.full(4, 3.0))

    def test_matmul_gradients_match_finite_differences(self, float64, rng):
        a_data = rng.standard_normal((3, 4))
        b_data = rng.standard_normal((4, 2))
        a, b = parameter(a_data), parameter(b_data)
        ga, gb = analytic_grad(lambda: ((a @ b) * (a @ b)).sum(), [a, b])

        def value():
            return float(np.sum((a_data @ b_data) ** 2))

        np.testing.assert_allclose(ga, numerical_grad(value, a_data), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(gb, numerical_grad(value, b_data), rtol=1e-5, atol=1e-7)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_division_pow_sqrt_exp_log(self, float64, rng):
        data = rng.uniform(0.5, 2.0, size=5)
        x = parameter(data)

        def build():
            return ((x ** 3) / (x.sqrt() + 1.0) + x.exp().log() * 2.0).sum()

        (g,) = analytic_grad(build, [x])

        def value():
            return float(np.sum(data ** 3 / (np.sqrt(data) + 1.0) + 2.0 * data))

        np.testing.assert_allclose(g, numerical_grad(value, data), rtol=1e-6)

    def test_getitem_and_concat(self, float64):
        a = parameter(np.arange(6.0).reshape(2, 3))
        b = parameter(np.ones((1, 3)))

        def build():
            joined = concat([a, b], axis=0)
            return (joined[1:] * 2.0).sum()

        ga, gb = analytic_grad(build, [a, b])
        np.testing.assert_array_equal(ga, [[0, 0, 0], [2, 2, 2]])
        np.testing.assert_array_equal(gb, [[2, 2, 2]])

    def test_reductions_and_reshape(self, float64):
        x = parameter(np.arange(12.0).reshape(3, 4))
        (g,) = analytic_grad(lambda: x.mean(axis=0).reshape(2, 2).transpose().sum(), [x])
        np.testing.assert_allclose(g, np.full((3, 4), 1.0 / 3.0))


# ── Dtype ───────────────────────────────────────────────────────────────────

class TestDtype:
    def test_default_dtype_context_restores(self):
        before = get_default_dtype()
        with default_dtype("float64"):
            assert Tensor([1.0]).data.dtype == np.float64
        assert get_default_dtype() is before

    def test_unknown_dtype(self):
        with pytest.raises(ValueError):
            with default_dtype("float16"):
                pass
