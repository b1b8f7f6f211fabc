import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsrm import tensor as T
from fsrm.errors import (
    DegenerateBlockError,
    ShapeMismatchError,
    TapeError,
)


def matmul_oracle(a, b):
    # naive triple loop, independent of the engine's BLAS path
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += float(a[i, l]) * float(b[l, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = T.tensor(np.eye(2))
        b = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_scalar_case(self):
        out = T.matmul(T.tensor([[2.0]]), T.tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        out = T.matmul(T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, matmul_oracle(a, b), atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))

    def test_batched_against_loop(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((3, 5, 2))
        out = T.matmul(T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64))
        for i in range(3):
            np.testing.assert_allclose(out.data[i], matmul_oracle(a[i], b[i]), atol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_lastdim(T.tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0], dtype=np.float32)
        a = T.softmax_lastdim(T.tensor(x)).data
        b = T.softmax_lastdim(T.tensor(x + 7.5)).data
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 7)).astype(np.float32)
        out = T.softmax_lastdim(T.tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)

    def test_large_inputs_stable(self):
        out = T.softmax_lastdim(T.tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])


class TestNormalizeBlocks:
    def test_three_four_five(self):
        out = T.unit_normalize_blocks(T.tensor([3.0, 4.0]), 2)
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-7)

    def test_idempotent(self):
        x = T.unit_normalize_blocks(T.tensor(np.random.default_rng(3).standard_normal(8)), 4)
        again = T.unit_normalize_blocks(x, 4)
        np.testing.assert_allclose(again.data, x.data, atol=1e-7)

    def test_all_blocks_unit(self):
        rng = np.random.default_rng(4)
        out = T.unit_normalize_blocks(T.tensor(rng.standard_normal(8)), 4)
        norms = np.linalg.norm(out.data.reshape(2, 4), axis=-1)
        np.testing.assert_allclose(norms, [1.0, 1.0], atol=1e-6)

    def test_degenerate_block_identifies_index(self):
        x = np.ones((2, 4), dtype=np.float32)
        x[1] = 0.0
        with pytest.raises(DegenerateBlockError, match=r"block \(1, 0\)"):
            T.unit_normalize_blocks(T.tensor(x), 4)


class TestTangentProject:
    def test_basis_case(self):
        out = T.tangent_project(T.tensor([1.0, 1.0]), T.tensor([1.0, 0.0]), 2)
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-7)

    def test_parallel_annihilates(self):
        x = T.unit_normalize_blocks(T.tensor([1.0, 2.0, 2.0, 0.0]), 4)
        v = T.scale(x, 3.0)
        out = T.tangent_project(v, x, 4)
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-6)

    def test_orthogonal_to_x(self):
        rng = np.random.default_rng(5)
        x = T.unit_normalize_blocks(T.tensor(rng.standard_normal(12)), 4)
        v = T.tensor(rng.standard_normal(12))
        out = T.tangent_project(v, x, 4)
        dots = (out.data.reshape(3, 4) * x.data.reshape(3, 4)).sum(axis=-1)
        assert np.all(np.abs(dots) < 1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.tangent_project(T.tensor(np.ones(4)), T.tensor(np.ones(8)), 4)


class TestBackward:
    def test_sum_gradient(self):
        x = T.tensor(np.arange(3.0), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            loss = T.sum_all(x)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_squared_norm_gradient(self):
        x = T.tensor([1.0, -2.0, 3.0], requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            loss = T.dot_all(x, x)
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_fanout_sums_branch_adjoints(self):
        # f(x) = x*x + x => f'(x) = 2x + 1
        x = T.tensor([1.5, -0.5], requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            loss = T.sum_all(T.add(T.mul(x, x), x))
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1.0, atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = T.tensor(np.ones(3), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            y = T.mul(x, x)
        with pytest.raises(ShapeMismatchError):
            T.backward(tape, y)

    def test_consumed_tape_rejected(self):
        x = T.tensor(np.ones(3), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            loss = T.sum_all(x)
        T.backward(tape, loss)
        with pytest.raises(TapeError):
            T.backward(tape, loss)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(10)
            x = T.tensor(rng.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
            w = T.tensor(rng.standard_normal((6, 3)).astype(np.float32), requires_grad=True)
            tape = T.Tape()
            with T.recording(tape):
                loss = T.sum_all(T.softmax_lastdim(T.matmul(x, w)))
            T.backward(tape, loss)
            return x.grad.tobytes(), w.grad.tobytes(), loss.data.tobytes()

        assert run() == run()


class TestCheckpoint:
    def test_matches_plain_backward_bitwise(self):
        rng = np.random.default_rng(11)
        w = T.tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)

        def block(x):
            return T.tanh(T.matmul(x, w))

        def run(use_ckpt):
            w.zero_grad()
            x = T.tensor(np.ones((2, 6), dtype=np.float32), requires_grad=True)
            tape = T.Tape()
            with T.recording(tape):
                h = T.checkpoint(block, x) if use_ckpt else block(x)
                loss = T.sum_all(h)
            T.backward(tape, loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        plain = run(False)
        ckpt = run(True)
        for a, b in zip(plain, ckpt):
            np.testing.assert_array_equal(a, b)

    def test_no_tape_passthrough(self):
        x = T.tensor(np.ones(3))
        out = T.checkpoint(lambda t: T.scale(t, 2.0), x)
        np.testing.assert_array_equal(out.data, 2 * np.ones(3))


class TestShapeOps:
    def test_concat_split_roundtrip_grads(self):
        a = T.tensor(np.ones((2, 3)), requires_grad=True)
        b = T.tensor(2 * np.ones((2, 3)), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            cat = T.concat([a, b], axis=1)
            loss = T.dot_all(cat, cat)
        T.backward(tape, loss)
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 2 * b.data)

    def test_transpose_reshape_grads(self):
        x = T.tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            y = T.transpose(x, (0, 2, 1))
            z = T.reshape(y, (2, 12))
            loss = T.sum_all(z)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_add_bias_reduces_over_leading(self):
        x = T.tensor(np.zeros((4, 3)), requires_grad=True)
        b = T.tensor(np.zeros(3), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            loss = T.sum_all(T.add_bias(x, b))
        T.backward(tape, loss)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


class TestScale:
    def test_scalar_tensor_gradient(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        s = T.tensor(np.asarray(3.0), requires_grad=True)
        tape = T.Tape()
        with T.recording(tape):
            loss = T.sum_all(T.scale(x, s))
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, [3.0, 3.0])
        assert float(s.grad) == pytest.approx(3.0)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_property_normalize_blocks_unit(nblocks, block, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(nblocks * block) + 0.5  # keep away from zero norm
    if np.any(np.linalg.norm(x.reshape(nblocks, block), axis=-1) < 1e-6):
        return
    out = T.unit_normalize_blocks(T.tensor(x, dtype=np.float64), block)
    norms = np.linalg.norm(out.data.reshape(nblocks, block), axis=-1)
    np.testing.assert_allclose(norms, np.ones(nblocks), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_property_tangent_is_orthogonal(seed):
    rng = np.random.default_rng(seed)
    x = T.unit_normalize_blocks(T.tensor(rng.standard_normal(8), dtype=np.float64), 4)
    v = T.tensor(rng.standard_normal(8), dtype=np.float64)
    out = T.tangent_project(v, x, 4)
    dots = (out.data.reshape(2, 4) * x.data.reshape(2, 4)).sum(axis=-1)
    assert np.all(np.abs(dots) < 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_property_softmax_rows_sum_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    out = T.softmax_lastdim(T.tensor(x, dtype=np.float64))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(3), atol=1e-12)
