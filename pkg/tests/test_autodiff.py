"""Tensor/tape primitives against independent oracles and finite differences."""

import numpy as np
import pytest

from marrow import autodiff as ad
from marrow.errors import ContractError, NumericError, ShapeError

RTOL = 1e-4
N_SEEDS = 20


def t64(arr, grad=True):
    return ad.Tensor(arr, requires_grad=grad, dtype=np.float64)


def assert_gradcheck(build, tensors, rtol=RTOL, step=1e-5):
    """Compare tape gradients with central finite differences.

    build(tape) must rebuild the same scalar loss from the given tensors.
    """
    tape = ad.Tape()
    loss = build(tape)
    for t in tensors:
        t.grad = None
    tape.backward(loss)
    for t in tensors:
        numeric = ad.numeric_gradient(lambda: build(None).item(), t.data, step=step)
        assert t.grad is not None, "missing analytic gradient"
        err = ad.max_relative_error(t.grad, numeric)
        assert err <= rtol, f"gradcheck failed: rel err {err:.2e}"


def project_to_scalar(out, rng, tape):
    """Random linear functional of the op output; harder to fool than sum."""
    r = ad.Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return ad.sum_all(ad.mul(out, r, tape), tape)


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor(np.eye(2))
        b = ad.Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_one_by_one_dot(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.item() == 11.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 2)).astype(np.float32)
        expected = np.zeros((3, 2), dtype=np.float32)
        for i in range(3):
            for j in range(2):
                acc = np.float32(0.0)
                for t in range(4):
                    acc += a[i, t] * b[t, j]
                expected[i, j] = acc
        got = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        np.testing.assert_allclose(got, expected, rtol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 2))))


class TestSoftmax:
    def test_uniform_row(self):
        out = ad.softmax_rows(ad.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-7)

    def test_shift_invariance_ln2(self):
        for c in (-100.0, -1.0, 0.0, 3.5, 80.0):
            out = ad.softmax_rows(ad.Tensor([[c, c + np.log(2.0)]], dtype=np.float64))
            np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-9)

    def test_scalar_oracle(self):
        row = [1.0, 2.0, 3.0]
        exps = [np.exp(v) for v in row]
        expected = [e / sum(exps) for e in exps]
        out = ad.softmax_rows(ad.Tensor([row], dtype=np.float64))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        m = ad.softmax_rows(ad.Tensor(rng.normal(size=(50, 17)) * 10))
        np.testing.assert_allclose(m.data.sum(axis=1), 1.0, atol=1e-6)
        assert (m.data >= 0).all()

    def test_random_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 9))
        shift = rng.normal(size=(8, 1)) * 50
        a = ad.softmax_rows(ad.Tensor(x)).data
        b = ad.softmax_rows(ad.Tensor(x + shift)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_nan_rejected(self):
        bad = np.array([[1.0, np.nan]])
        with pytest.raises(NumericError):
            ad.softmax_rows(ad.Tensor(bad))


class TestRmsNorm:
    def test_unit_rows(self):
        x = ad.Tensor([[1.0, 1.0, 1.0, 1.0]])
        g = ad.Tensor([1.0, 1.0, 1.0, 1.0])
        out = ad.rms_norm(x, g, eps=1e-12)
        np.testing.assert_allclose(out.data, x.data, atol=1e-5)

    def test_scale_normalization(self):
        out = ad.rms_norm(ad.Tensor([[2.0, 2.0]]), ad.Tensor([1.0, 1.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, 1.0]], atol=1e-5)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=6)
        gamma = rng.normal(size=6)
        eps = 1e-6
        rms = np.sqrt(sum(v * v for v in x) / 6 + eps)
        expected = [x[i] * gamma[i] / rms for i in range(6)]
        out = ad.rms_norm(ad.Tensor([x], dtype=np.float64),
                          ad.Tensor(gamma, dtype=np.float64), eps=eps)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)


class TestBackwardBasics:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 5)))
        tape = ad.Tape()
        loss = ad.sum_all(x, tape)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_quadratic_gives_2x(self):
        rng = np.random.default_rng(1)
        x = t64(rng.normal(size=(1, 6)))
        tape = ad.Tape()
        loss = ad.sum_all(ad.matmul(x, ad.transpose(x, tape), tape), tape)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = t64(np.ones((2, 2)))
        tape = ad.Tape()
        out = ad.scale(x, 2.0, tape)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_loss_not_on_tape_rejected(self):
        x = t64(np.ones((2, 2)))
        tape = ad.Tape()
        ad.scale(x, 2.0, tape)
        stray = ad.sum_all(x, None)
        with pytest.raises(ContractError):
            tape.backward(stray)

    def test_grad_accumulates_over_reuse(self):
        x = t64(np.array([[1.0, 2.0]]))
        tape = ad.Tape()
        loss = ad.sum_all(ad.add(x, x, tape), tape)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full((1, 2), 2.0))


class TestGradcheckPrimitives:
    """Finite-difference checks, 20 seeds per primitive."""

    def test_add_mul_scale(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(3, 4)))

            def build(tape, rng=rng, a=a, b=b):
                out = ad.scale(ad.mul(ad.add(a, b, tape), b, tape), 1.7, tape)
                return project_to_scalar(out, np.random.default_rng(0), tape)

            assert_gradcheck(build, [a, b])

    def test_matmul_transpose(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))

            def build(tape, a=a, b=b):
                out = ad.transpose(ad.matmul(a, b, tape), tape)
                return project_to_scalar(out, np.random.default_rng(1), tape)

            assert_gradcheck(build, [a, b])

    def test_gather_rows(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            table = t64(rng.normal(size=(6, 3)))
            ids = rng.integers(0, 6, size=5).tolist()  # repeats exercise accumulation

            def build(tape, table=table, ids=ids):
                out = ad.gather_rows(table, ids, tape)
                return project_to_scalar(out, np.random.default_rng(2), tape)

            assert_gradcheck(build, [table])

    def test_softmax_rows(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(4, 5)) * 2)

            def build(tape, x=x):
                return project_to_scalar(ad.softmax_rows(x, tape), np.random.default_rng(3), tape)

            assert_gradcheck(build, [x])

    def test_log_softmax_rows(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(4, 5)) * 2)

            def build(tape, x=x):
                return project_to_scalar(ad.log_softmax_rows(x, tape), np.random.default_rng(4), tape)

            assert_gradcheck(build, [x])

    def test_rms_norm(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(3, 6)))
            gamma = t64(rng.normal(size=6))

            def build(tape, x=x, gamma=gamma):
                return project_to_scalar(ad.rms_norm(x, gamma, 1e-5, tape), np.random.default_rng(5), tape)

            assert_gradcheck(build, [x, gamma])

    def test_silu(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(3, 4)) * 3)

            def build(tape, x=x):
                return project_to_scalar(ad.silu(x, tape), np.random.default_rng(6), tape)

            assert_gradcheck(build, [x])

    def test_rope(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(5, 8)))
            angles = np.outer(np.arange(5), 0.3 * np.arange(1, 5))
            cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1)
            sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1)

            def build(tape, x=x, cos=cos, sin=sin):
                return project_to_scalar(ad.rope(x, cos, sin, tape), np.random.default_rng(7), tape)

            assert_gradcheck(build, [x])

    def test_slices_and_concats(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(4, 6)))
            y = t64(rng.normal(size=(2, 6)))

            def build(tape, x=x, y=y):
                top = ad.slice_rows(x, 0, 2, tape)
                cols = ad.slice_cols(x, 1, 4, tape)
                stacked = ad.concat_rows([top, y], tape)
                wide = ad.concat_cols([stacked, ad.slice_cols(stacked, 0, 2, tape)], tape)
                return ad.add(ad.sum_all(wide, tape),
                              ad.sum_all(cols, tape), tape)

            assert_gradcheck(build, [x, y])

    def test_reductions_and_pick(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(5, 4)))
            cols = rng.integers(0, 4, size=5).tolist()

            def build(tape, x=x, cols=cols):
                picked = ad.pick_per_row(x, cols, tape)
                return ad.add(ad.mean_all(x, tape),
                              ad.sum_all(picked, tape), tape)

            assert_gradcheck(build, [x])

    def test_l2_normalize_rows(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            x = t64(rng.normal(size=(3, 8)) + 0.1)

            def build(tape, x=x):
                return project_to_scalar(ad.l2_normalize_rows(x, tape), np.random.default_rng(8), tape)

            assert_gradcheck(build, [x])


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def compute(seed):
            rng = np.random.default_rng(seed)
            a = ad.Tensor(rng.normal(size=(16, 16)).astype(np.float32))
            b = ad.Tensor(rng.normal(size=(16, 16)).astype(np.float32))
            return ad.softmax_rows(ad.matmul(a, b)).data.tobytes()

        assert compute(42) == compute(42)


class TestFrozenInputs:
    def test_no_grad_into_constants(self):
        rng = np.random.default_rng(0)
        x = t64(rng.normal(size=(2, 3)))
        const = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=False, dtype=np.float64)
        tape = ad.Tape()
        loss = ad.sum_all(ad.mul(x, const, tape), tape)
        tape.backward(loss)
        assert const.grad is None
        np.testing.assert_allclose(x.grad, const.data, atol=1e-12)
