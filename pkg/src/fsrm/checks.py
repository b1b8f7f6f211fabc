"""Gradient-fidelity battery: every primitive op plus the full model.

Everything runs in float64. The full-model check builds the same graph the
trainer uses (checkpointed fast loops, cross-entropy over all positions) on a
tiny configuration and differences every parameter coordinate.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import gradient_check
from .model import FSRM, ModelConfig

TINY_CHECK_CONFIG = ModelConfig(
    k_tokens=4, d=8, osc_dim=4, heads=2, t_fast=2, history=2, mlp_hidden=16
)
TINY_CHECK_TOKENS = np.array([7, 41, 3])
TINY_CHECK_SEED = 12


def primitive_checks(seed: int = 100) -> dict[str, float]:
    """Finite-difference error for each primitive op, keyed by op name."""
    rng = np.random.default_rng(seed)

    def t(shape, scale=1.0, grad=True):
        return T.tensor(rng.standard_normal(shape) * scale, dtype=np.float64, requires_grad=grad)

    results: dict[str, float] = {}
    probe = T.tensor(rng.standard_normal((3, 5)), dtype=np.float64)

    a, b = t((3, 4)), t((4, 5))
    results["matmul"] = gradient_check(
        lambda a_, b_: T.dot_all(T.matmul(a_, b_), probe), [a, b], eps=1e-6
    )

    ab, bb = t((2, 3, 4)), t((2, 4, 5))
    probe_b = T.tensor(rng.standard_normal((2, 3, 5)), dtype=np.float64)
    results["matmul_batched"] = gradient_check(
        lambda a_, b_: T.dot_all(T.matmul(a_, b_), probe_b), [ab, bb], eps=1e-6
    )

    x = t((3, 5))
    results["softmax_lastdim"] = gradient_check(
        lambda x_: T.dot_all(T.softmax_lastdim(x_), probe), [x], eps=1e-6
    )

    x = t((2, 8))
    probe8 = T.tensor(rng.standard_normal((2, 8)), dtype=np.float64)
    results["unit_normalize_blocks"] = gradient_check(
        lambda x_: T.dot_all(T.unit_normalize_blocks(x_, 4), probe8), [x], eps=1e-6
    )

    v, x = t((2, 8)), t((2, 8))
    results["tangent_project"] = gradient_check(
        lambda v_, x_: T.dot_all(T.tangent_project(v_, x_, 4), probe8), [v, x], eps=1e-6
    )

    g = t((2, 4, 4))
    xr = t((3, 8))
    probe38 = T.tensor(rng.standard_normal((3, 8)), dtype=np.float64)
    results["block_rotate"] = gradient_check(
        lambda x_, g_: T.dot_all(T.block_rotate(x_, T.antisymmetrize(g_)), probe38),
        [xr, g],
        eps=1e-6,
    )

    xq = t((2, 2, 3, 4))
    fr = t((2, 2), scale=0.3)
    probe_q = T.tensor(rng.standard_normal((2, 2, 3, 4)), dtype=np.float64)
    results["rotary_phase"] = gradient_check(
        lambda x_, f_: T.dot_all(T.rotary_phase(x_, f_), probe_q), [xq, fr], eps=1e-6
    )

    x = t((3, 5))
    for name, fn in (("relu", T.relu), ("sigmoid", T.sigmoid), ("tanh", T.tanh)):
        results[name] = gradient_check(
            lambda x_, fn=fn: T.dot_all(fn(x_), probe), [x], eps=1e-6
        )

    a, b = t((3, 5)), t((3, 5))
    results["add"] = gradient_check(
        lambda a_, b_: T.dot_all(T.add(a_, b_), probe), [a, b], eps=1e-6
    )
    results["mul"] = gradient_check(
        lambda a_, b_: T.dot_all(T.mul(a_, b_), probe), [a, b], eps=1e-6
    )
    bias = t((5,))
    results["add_bias"] = gradient_check(
        lambda a_, b_: T.dot_all(T.add_bias(a_, b_), probe), [a, bias], eps=1e-6
    )
    s = T.tensor(np.asarray(0.7), dtype=np.float64, requires_grad=True)
    results["scale"] = gradient_check(
        lambda a_, s_: T.dot_all(T.scale(a_, s_), probe), [a, s], eps=1e-6
    )

    logits = t((4, 6))
    labels = rng.integers(0, 6, size=4)
    mask = np.array([1, 0, 1, 1])
    results["softmax_cross_entropy"] = gradient_check(
        lambda l_: T.softmax_cross_entropy(l_, labels, mask), [logits], eps=1e-6
    )

    table = t((7, 6))
    ids = np.array([2, 2, 5])
    probe_e = T.tensor(rng.standard_normal((3, 6)), dtype=np.float64)
    results["embedding"] = gradient_check(
        lambda t_: T.dot_all(T.embedding(t_, ids), probe_e), [table], eps=1e-6
    )

    x = t((2, 3, 4))
    probe_t = T.tensor(rng.standard_normal((2, 12)), dtype=np.float64)
    results["reshape_transpose"] = gradient_check(
        lambda x_: T.dot_all(T.reshape(T.transpose(x_, (0, 2, 1)), (2, 12)), probe_t),
        [x],
        eps=1e-6,
    )

    a, b = t((2, 3)), t((2, 3))
    probe_c = T.tensor(rng.standard_normal((2, 6)), dtype=np.float64)
    results["concat"] = gradient_check(
        lambda a_, b_: T.dot_all(T.concat([a_, b_], axis=1), probe_c), [a, b], eps=1e-6
    )

    return results


def fast_step_check(seed: int = 200) -> float:
    """Finite differences through one fast update (state input only)."""
    from .model import FastBlockParams

    cfg = TINY_CHECK_CONFIG
    rng = np.random.default_rng(seed)
    params = FastBlockParams(cfg, rng, np.float64)
    x0 = rng.standard_normal((1, cfg.k_tokens, cfg.d))
    x0 /= np.linalg.norm(x0.reshape(1, cfg.k_tokens, -1, cfg.osc_dim), axis=-1, keepdims=True).repeat(cfg.osc_dim, -1).reshape(x0.shape)
    c = T.tensor(rng.standard_normal((1, cfg.k_tokens, cfg.d)), dtype=np.float64)
    probe = T.tensor(rng.standard_normal((1, cfg.k_tokens, cfg.d)), dtype=np.float64)
    x = T.tensor(x0, dtype=np.float64, requires_grad=True)
    return gradient_check(
        lambda x_: T.dot_all(params.fast_step(x_, c), probe), [x], eps=1e-6
    )


def full_model_check(
    cfg: ModelConfig | None = None,
    tokens: np.ndarray | None = None,
    seed: int = TINY_CHECK_SEED,
    eps: float = 1e-5,
    coord_stride: int = 1,
) -> float:
    """Max FD error over every parameter of the full two-process model.

    The loss is the training loss (mean cross entropy over all positions) on a
    short sequence; the graph uses the trainer's checkpointed fast loops.
    ``coord_stride`` > 1 differences a deterministic subsample of coordinates.
    """
    cfg = cfg or TINY_CHECK_CONFIG
    tokens = TINY_CHECK_TOKENS if tokens is None else tokens
    model = FSRM(cfg, init_seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    labels = rng.integers(0, cfg.vocab_out, size=tokens.shape[0])
    mask = np.ones(tokens.shape[0], dtype=np.int64)

    def loss_fn():
        logits = model.forward_batch(tokens[None, :], seeds=[seed], training=True)
        return T.softmax_cross_entropy(
            logits, labels[None, :], mask[None, :]
        )

    params = [t for _, t in model.parameters()]
    for p in params:
        p.zero_grad()
    tape = T.Tape()
    with T.recording(tape):
        out = loss_fn()
    T.backward(tape, out)
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    ]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(0, flat.shape[0], coord_stride):
            orig = flat[i]
            flat[i] = orig + eps
            with T.no_grad():
                hi = float(loss_fn().data)
            flat[i] = orig - eps
            with T.no_grad():
                lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(an_flat[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, float(err))
    return worst


def run_battery(full_stride: int = 1) -> dict[str, float]:
    """The complete gradient-fidelity report used by the CLI and acceptance."""
    results = primitive_checks()
    results["fast_step"] = fast_step_check()
    results["full_model"] = full_model_check(coord_stride=full_stride)
    return results
