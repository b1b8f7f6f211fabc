import numpy as np
import pytest

from fsrm import tensor as T
from fsrm.errors import ConfigError, VocabularyError
from fsrm.gradcheck import gradient_check
from fsrm.lstm import LstmClassifier, LstmConfig

SMALL = LstmConfig(embed=6, hidden=8, depth=2)


def test_zero_weights_hidden_stays_zero():
    m = LstmClassifier(SMALL, init_seed=0)
    for _, p in m.parameters():
        p.data = np.zeros_like(p.data)
    logits, state = m.forward(np.array([1, 5, 9, 2]))
    # c = 0.5 * c_prev with c_0 = 0, so everything stays exactly zero
    for layer in range(SMALL.depth):
        np.testing.assert_array_equal(state.h[layer].data, 0)
        np.testing.assert_array_equal(state.c[layer].data, 0)
    np.testing.assert_array_equal(logits.data, np.zeros_like(logits.data))
    assert np.all(logits.data == logits.data[0])  # constant over steps


def test_output_shape():
    m = LstmClassifier(SMALL)
    logits, _ = m.forward(np.arange(7))
    assert logits.shape == (7, SMALL.vocab_out)


def test_gate_and_squash_bounds():
    m = LstmClassifier(SMALL, init_seed=1)
    state = m.new_episode([0])
    for tok in (3, 14, 59):
        m.step(state, np.array([tok]))
    for layer in range(SMALL.depth):
        assert np.all(np.abs(state.c[layer].data) < 50)  # cell unbounded but finite
        assert np.all(np.abs(np.tanh(state.c[layer].data)) < 1)
        assert np.all(np.abs(state.h[layer].data) < 1)  # o in (0,1), tanh(c) in (-1,1)


def test_streaming_consistency_bitwise():
    m = LstmClassifier(SMALL, init_seed=2)
    tokens = np.random.default_rng(3).integers(0, 60, size=11)
    whole, _ = m.forward(tokens)
    state = m.new_episode([0])
    parts = [m.step(state, tokens[s : s + 1]).data.copy() for s in range(len(tokens))]
    assert np.concatenate(parts, axis=0).tobytes() == whole.data.tobytes()


def test_batched_matches_single():
    m = LstmClassifier(SMALL, init_seed=4)
    tokens = np.array([2, 30, 41])
    single, _ = m.forward(tokens)
    batched = m.forward_batch(tokens[None, :], seeds=[0])
    np.testing.assert_array_equal(batched.data[0], single.data)


def test_out_of_range_token():
    m = LstmClassifier(SMALL)
    with pytest.raises(VocabularyError):
        m.forward(np.array([60]))


def test_truncate_rejected():
    m = LstmClassifier(SMALL)
    with pytest.raises(ConfigError):
        m.forward(np.array([1, 2]), truncate=2)


def test_gradient_through_five_steps():
    cfg = LstmConfig(embed=4, hidden=6, depth=2)
    m = LstmClassifier(cfg, init_seed=5, dtype=np.float64)
    tokens = np.array([3, 17, 42, 8, 55])
    probe = T.tensor(
        np.random.default_rng(6).standard_normal((5, cfg.vocab_out)), dtype=np.float64
    )

    def loss_fn():
        logits, _ = m.forward(tokens, training=True)
        return T.dot_all(logits, probe)

    params = [p for _, p in m.parameters()]
    for p in params:
        p.zero_grad()
    tape = T.Tape()
    with T.recording(tape):
        loss = loss_fn()
    T.backward(tape, loss)

    worst = 0.0
    eps = 1e-5
    for p in params:
        an = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(0, flat.shape[0], 7):  # deterministic subsample
            orig = flat[i]
            flat[i] = orig + eps
            with T.no_grad():
                hi = float(loss_fn().data)
            flat[i] = orig - eps
            with T.no_grad():
                lo = float(loss_fn().data)
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            worst = max(worst, abs(an[i] - num) / (abs(num) + 1e-8))
    assert worst < 1e-4
