import numpy as np
import pytest

from fsrm import tensor as T
from fsrm.gradcheck import gradient_check


def test_square_at_three():
    x = T.tensor(np.asarray(3.0), dtype=np.float64, requires_grad=True)
    err = gradient_check(lambda t: T.mul(t, t), [x], eps=1e-5)
    assert err < 1e-9


def test_softmax_matmul_chain():
    rng = np.random.default_rng(7)
    x = T.tensor(rng.standard_normal((3, 4)), dtype=np.float64, requires_grad=True)
    w = T.tensor(rng.standard_normal((4, 5)), dtype=np.float64, requires_grad=True)

    def f(x_, w_):
        return T.sum_all(T.mul(T.softmax_lastdim(T.matmul(x_, w_)),
                               T.softmax_lastdim(T.matmul(x_, w_))))

    err = gradient_check(f, [x, w], eps=1e-6)
    assert err < 1e-6


def test_normalize_blocks_gradient():
    rng = np.random.default_rng(8)
    x = T.tensor(rng.standard_normal(8), dtype=np.float64, requires_grad=True)
    w = T.tensor(rng.standard_normal(8), dtype=np.float64, requires_grad=False)

    def f(x_):
        return T.dot_all(T.unit_normalize_blocks(x_, 4), w)

    err = gradient_check(f, [x], eps=1e-6)
    assert err < 1e-7


def test_tangent_project_gradient_both_args():
    rng = np.random.default_rng(9)
    v = T.tensor(rng.standard_normal(8), dtype=np.float64, requires_grad=True)
    x = T.tensor(rng.standard_normal(8), dtype=np.float64, requires_grad=True)
    w = T.tensor(rng.standard_normal(8), dtype=np.float64)

    def f(v_, x_):
        return T.dot_all(T.tangent_project(v_, x_, 4), w)

    err = gradient_check(f, [v, x], eps=1e-6)
    assert err < 1e-7


def test_rotary_gradient():
    rng = np.random.default_rng(10)
    x = T.tensor(rng.standard_normal((2, 2, 3, 4)), dtype=np.float64, requires_grad=True)
    fr = T.tensor(rng.standard_normal((2, 2)) * 0.3, dtype=np.float64, requires_grad=True)
    probe = T.tensor(rng.standard_normal((2, 2, 3, 4)), dtype=np.float64)

    def f(x_, f_):
        return T.dot_all(T.rotary_phase(x_, f_), probe)

    err = gradient_check(f, [x, fr], eps=1e-6)
    assert err < 1e-7


def test_block_rotate_gradient():
    rng = np.random.default_rng(11)
    x = T.tensor(rng.standard_normal((3, 8)), dtype=np.float64, requires_grad=True)
    g = T.tensor(rng.standard_normal((2, 4, 4)), dtype=np.float64, requires_grad=True)
    probe = T.tensor(rng.standard_normal((3, 8)), dtype=np.float64)

    def f(x_, g_):
        return T.dot_all(T.block_rotate(x_, T.antisymmetrize(g_)), probe)

    err = gradient_check(f, [x, g], eps=1e-6)
    assert err < 1e-7


def test_cross_entropy_gradient():
    rng = np.random.default_rng(12)
    logits = T.tensor(rng.standard_normal((5, 7)), dtype=np.float64, requires_grad=True)
    labels = rng.integers(0, 7, size=5)
    mask = np.array([1, 1, 0, 1, 1])

    def f(l_):
        return T.softmax_cross_entropy(l_, labels, mask)

    err = gradient_check(f, [logits], eps=1e-6)
    assert err < 1e-7


def test_sigmoid_tanh_gradients():
    rng = np.random.default_rng(13)
    x = T.tensor(rng.standard_normal(6), dtype=np.float64, requires_grad=True)
    probe = T.tensor(rng.standard_normal(6), dtype=np.float64)

    err = gradient_check(lambda t: T.dot_all(T.sigmoid(t), probe), [x], eps=1e-6)
    assert err < 1e-6
    err = gradient_check(lambda t: T.dot_all(T.tanh(t), probe), [x], eps=1e-6)
    assert err < 1e-6


def test_non_scalar_function_rejected():
    x = T.tensor(np.ones(3), dtype=np.float64, requires_grad=True)
    with pytest.raises(ValueError):
        gradient_check(lambda t: T.mul(t, t), [x])


def test_float32_inputs_rejected():
    x = T.tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        gradient_check(lambda t: T.sum_all(t), [x])
