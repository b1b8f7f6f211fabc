"""Dense tensors with tape-based reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the fast-slow recurrence, the
LSTM baseline, and the training loss need. Broadcasting is restricted to bias
addition over the last axis and scalar scaling; everything else requires exact
shape agreement. float32 is the training dtype, float64 exists for gradient
checking.

Recording model: while a :class:`Tape` is active (see :func:`recording`),
every op whose inputs require grad appends a backward closure to the tape.
:func:`backward` replays the closures in reverse record order, so each node is
visited after all of its consumers; gradients accumulate additively across
fan-out.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import (
    DegenerateBatchError,
    DegenerateBlockError,
    ShapeMismatchError,
    TapeError,
)

NORM_FLOOR = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations, replayable once in reverse."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Callable[[], None]] = []
        self.consumed = False


_active_tape: Tape | None = None


@contextlib.contextmanager
def recording(tape: Tape):
    """Route op recording onto ``tape`` for the duration of the block."""
    global _active_tape
    prev = _active_tape
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = prev


@contextlib.contextmanager
def no_grad():
    global _active_tape
    prev = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = prev


def _recording_for(*tensors) -> bool:
    if _active_tape is None:
        return False
    return any(t.requires_grad for t in tensors)


def _record(fn):
    _active_tape.nodes.append(fn)


def _accum(t: Tensor, g: np.ndarray, donate=False):
    """Add ``g`` into ``t.grad``; the first accumulation may take ownership."""
    if t.grad is None:
        if donate and g.flags.owndata and g.flags.writeable:
            t.grad = g
        else:
            t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor):
    """Replay adjoints in reverse record order, seeding d(loss)/d(loss)=1.

    Every tensor reachable from the recorded graph with requires_grad ends up
    holding dLoss/dtensor in ``.grad``. The tape is single-use.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.shape != ():
        raise ShapeMismatchError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    tape.consumed = True
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tape.nodes):
        node()
    tape.nodes.clear()


def backward_from(tape: Tape, output: Tensor, seed: np.ndarray):
    """Like :func:`backward` but seeds an arbitrary output adjoint."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    _accum(output, seed)
    for node in reversed(tape.nodes):
        node()
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# construction helpers


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not match"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if _recording_for(a, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, out.grad)
            if b.requires_grad:
                _accum(b, out.grad)

        _record(bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _recording_for(a, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, out.grad)
            if b.requires_grad:
                _accum(b, -out.grad, donate=True)

        _record(bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _recording_for(a, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, out.grad * b.data, donate=True)
            if b.requires_grad:
                _accum(b, out.grad * a.data, donate=True)

        _record(bw)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    if _recording_for(a):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(a, -out.grad, donate=True)

        _record(bw)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes (bias add)."""
    if b.data.shape != x.data.shape[-1:]:
        raise ShapeMismatchError(
            f"add_bias: bias shape {b.data.shape} does not match last axis of {x.data.shape}"
        )
    out = Tensor(x.data + b.data)
    if _recording_for(x, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if x.requires_grad:
                _accum(x, out.grad)
            if b.requires_grad:
                _accum(b, out.grad.reshape(-1, b.data.shape[0]).sum(axis=0), donate=True)

        _record(bw)
    return out


def scale(x: Tensor, s) -> Tensor:
    """x * s where s is a python float or a scalar Tensor."""
    if isinstance(s, Tensor):
        if s.data.shape != ():
            raise ShapeMismatchError(f"scale: scalar expected, got shape {s.data.shape}")
        out = Tensor(x.data * s.data)
        if _recording_for(x, s):
            out.requires_grad = True

            def bw():
                if out.grad is None:
                    return
                if x.requires_grad:
                    _accum(x, out.grad * s.data, donate=True)
                if s.requires_grad:
                    _accum(s, np.asarray((out.grad * x.data).sum(), dtype=x.data.dtype))

            _record(bw)
        return out
    c = float(s)
    out = Tensor(x.data * c)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(x, out.grad * c, donate=True)

        _record(bw)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(x, out.grad.reshape(x.data.shape))

        _record(bw)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if _recording_for(x):
        out.requires_grad = True
        inv = tuple(np.argsort(axes))

        def bw():
            if out.grad is None:
                return
            _accum(x, np.ascontiguousarray(out.grad.transpose(inv)), donate=True)

        _record(bw)
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    datas = [x.data for x in xs]
    out = Tensor(np.concatenate(datas, axis=axis))
    if _recording_for(*xs):
        out.requires_grad = True
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def bw():
            if out.grad is None:
                return
            g = out.grad
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                if x.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(x, g[tuple(idx)])

        _record(bw)
    return out


def split(x: Tensor, sections: int, axis: int) -> list[Tensor]:
    parts = np.split(x.data, sections, axis=axis)
    outs = [Tensor(np.ascontiguousarray(p)) for p in parts]
    if _recording_for(x):
        for o in outs:
            o.requires_grad = True

        def bw():
            grads = []
            for o, p in zip(outs, parts):
                grads.append(o.grad if o.grad is not None else np.zeros_like(p))
            _accum(x, np.concatenate(grads, axis=axis), donate=True)

        _record(bw)
    return outs


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported: 2-D @ 2-D, N-D @ 2-D (shared right operand), and N-D @ N-D
    with identical leading batch axes.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or (
        ad.ndim != bd.ndim and bd.ndim != 2
    ) or (ad.ndim == bd.ndim and ad.shape[:-2] != bd.shape[:-2]):
        raise ShapeMismatchError(
            f"matmul: shapes {ad.shape} and {bd.shape} are not compatible"
        )
    if bd.ndim == 2 and ad.ndim > 2:
        out_data = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out_data = np.matmul(ad, bd)
    out = Tensor(out_data)
    if _recording_for(a, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            if a.requires_grad:
                if bd.ndim == 2:
                    ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
                else:
                    ga = np.matmul(g, bd.swapaxes(-1, -2))
                _accum(a, ga, donate=True)
            if b.requires_grad:
                if bd.ndim == 2:
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = np.matmul(ad.swapaxes(-1, -2), g)
                _accum(b, gb, donate=True)

        _record(bw)
    return out


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w for x of shape (..., d) and weight (d, m)."""
    return matmul(x, w)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(x, np.where(x.data > 0, out.grad, 0), donate=True)

        _record(bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(x, out.grad * (y * (1.0 - y)), donate=True)

        _record(bw)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(x, out.grad * (1.0 - y * y), donate=True)

        _record(bw)
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    xd = x.data
    use_kernel = K.ENABLED and xd.flags.c_contiguous and xd.ndim >= 1
    if use_kernel:
        flat = xd.reshape(-1, xd.shape[-1])
        y = K.softmax_fwd(flat).reshape(xd.shape)
    else:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
        y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            if use_kernel and g.flags.c_contiguous:
                dx = K.softmax_bwd(
                    y.reshape(-1, y.shape[-1]), g.reshape(-1, g.shape[-1])
                ).reshape(xd.shape)
            else:
                dot = (g * y).sum(axis=-1, keepdims=True)
                dx = y * (g - dot)
            _accum(x, dx, donate=True)

        _record(bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            _accum(x, np.full(x.data.shape, out.grad, dtype=x.data.dtype), donate=True)

        _record(bw)
    return out


def dot_all(a: Tensor, b: Tensor) -> Tensor:
    """Scalar sum(a * b); fused to avoid materializing the product."""
    _same_shape(a, b, "dot_all")
    af = a.data.reshape(-1)
    bf = b.data.reshape(-1)
    out = Tensor(np.asarray(af @ bf, dtype=a.data.dtype))
    if _recording_for(a, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, out.grad * b.data, donate=True)
            if b.requires_grad:
                _accum(b, out.grad * a.data, donate=True)

        _record(bw)
    return out


# ---------------------------------------------------------------------------
# sphere geometry


def _block_view(data: np.ndarray, block: int) -> np.ndarray:
    if data.shape[-1] % block != 0:
        raise ShapeMismatchError(
            f"last axis {data.shape[-1]} is not divisible by block size {block}"
        )
    return data.reshape(data.shape[:-1] + (data.shape[-1] // block, block))


def unit_normalize_blocks(x: Tensor, block: int) -> Tensor:
    """Scale each contiguous length-``block`` slice of the last axis to unit norm."""
    use_kernel = K.ENABLED and x.data.flags.c_contiguous
    if use_kernel:
        flat = _block_view(x.data, block).reshape(-1, block)
        yf, rf = K.norm_fwd(flat)
        if np.any(rf < NORM_FLOOR):
            sq = (flat * flat).sum(axis=-1)
            shape = x.data.shape[:-1] + (x.data.shape[-1] // block,)
            bad = tuple(int(i) for i in np.unravel_index(int(np.argmin(sq)), shape))
            raise DegenerateBlockError(
                f"block {bad} has norm below {NORM_FLOOR}; cannot normalize"
            )
        y = yf.reshape(x.data.shape)
    else:
        xb = _block_view(x.data, block)
        sq = np.einsum("...i,...i->...", xb, xb)
        if np.any(sq < NORM_FLOOR * NORM_FLOOR):
            bad = tuple(int(i) for i in np.unravel_index(int(np.argmin(sq)), sq.shape))
            raise DegenerateBlockError(
                f"block {bad} has norm below {NORM_FLOOR}; cannot normalize"
            )
        r = np.sqrt(sq)[..., None]
        y = (xb / r).reshape(x.data.shape)
    out = Tensor(y)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            if use_kernel and g.flags.c_contiguous:
                gx = K.norm_bwd(
                    y.reshape(-1, block), rf, g.reshape(-1, block)
                ).reshape(x.data.shape)
            else:
                gb = _block_view(g, block)
                yb = _block_view(y, block)
                rr = np.sqrt(np.einsum("...i,...i->...", _block_view(x.data, block), _block_view(x.data, block)))[..., None]
                dot = np.einsum("...i,...i->...", gb, yb)[..., None]
                gx = ((gb - dot * yb) / rr).reshape(x.data.shape)
            _accum(x, gx, donate=True)

        _record(bw)
    return out


def tangent_project(v: Tensor, x: Tensor, block: int) -> Tensor:
    """Per block: v - (v.x) x, removing the radial component at unit-norm x."""
    _same_shape(v, x, "tangent_project")
    vb = _block_view(v.data, block)
    xb = _block_view(x.data, block)
    dot = np.einsum("...i,...i->...", vb, xb)[..., None]
    yb = vb - dot * xb
    out = Tensor(yb.reshape(v.data.shape))
    if _recording_for(v, x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            gb = _block_view(out.grad, block)
            gdx = np.einsum("...i,...i->...", gb, xb)[..., None]
            if v.requires_grad:
                gv = gb - gdx * xb
                _accum(v, gv.reshape(v.data.shape), donate=True)
            if x.requires_grad:
                gx = -(gdx * vb) - dot * gb
                _accum(x, gx.reshape(x.data.shape), donate=True)

        _record(bw)
    return out


def antisymmetrize(a: Tensor) -> Tensor:
    """a - a^T over the trailing two axes; the result is exactly anti-symmetric."""
    if a.data.shape[-1] != a.data.shape[-2]:
        raise ShapeMismatchError(f"antisymmetrize: trailing axes of {a.data.shape} must be square")
    out = Tensor(a.data - a.data.swapaxes(-1, -2))
    if _recording_for(a):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            _accum(a, g - g.swapaxes(-1, -2), donate=True)

        _record(bw)
    return out


def block_rotate(x: Tensor, mats: Tensor) -> Tensor:
    """Apply one matrix per oscillator-block index: out[..., b, :] = mats[b] @ x[..., b, :].

    ``x`` has shape (..., D) with D = nb * n and ``mats`` has shape (nb, n, n).
    """
    nb, n, n2 = mats.data.shape
    if n != n2 or x.data.shape[-1] != nb * n:
        raise ShapeMismatchError(
            f"block_rotate: x shape {x.data.shape} incompatible with mats {mats.data.shape}"
        )
    xb = x.data.reshape(-1, nb, n)
    yb = np.einsum("bij,mbj->mbi", mats.data, xb)
    out = Tensor(yb.reshape(x.data.shape))
    if _recording_for(x, mats):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            gb = out.grad.reshape(-1, nb, n)
            if x.requires_grad:
                gx = np.einsum("bij,mbi->mbj", mats.data, gb)
                _accum(x, gx.reshape(x.data.shape), donate=True)
            if mats.requires_grad:
                gm = np.einsum("mbi,mbj->bij", gb, xb)
                _accum(mats, gm, donate=True)

        _record(bw)
    return out


def rotary_phase(x: Tensor, freq: Tensor) -> Tensor:
    """Rotate feature pairs of each head by an angle that grows with token index.

    ``x``: (B, heads, N, hd) with hd even; ``freq``: (heads, hd // 2). Pair j of
    head h at token position t is rotated by angle t * freq[h, j]; pairs are
    (x[..., j], x[..., j + hd//2]).
    """
    B, h, N, hd = x.data.shape
    p = hd // 2
    if freq.data.shape != (h, p):
        raise ShapeMismatchError(
            f"rotary_phase: freq shape {freq.data.shape}, expected {(h, p)}"
        )
    pos = np.arange(N, dtype=x.data.dtype)
    theta = pos[None, :, None] * freq.data[:, None, :]  # (h, N, p)
    c = np.cos(theta)[None]
    s = np.sin(theta)[None]
    x1 = x.data[..., :p]
    x2 = x.data[..., p:]
    o1 = x1 * c - x2 * s
    o2 = x1 * s + x2 * c
    out = Tensor(np.concatenate([o1, o2], axis=-1))
    if _recording_for(x, freq):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g1 = out.grad[..., :p]
            g2 = out.grad[..., p:]
            if x.requires_grad:
                gx1 = g1 * c + g2 * s
                gx2 = -g1 * s + g2 * c
                _accum(x, np.concatenate([gx1, gx2], axis=-1), donate=True)
            if freq.requires_grad:
                # dtheta = g2 * o1 - g1 * o2, then dfreq = sum_t pos_t * dtheta
                dtheta = (g2 * o1 - g1 * o2).sum(axis=0)  # (h, N, p)
                gf = np.einsum("n,hnp->hp", pos, dtheta)
                _accum(freq, gf, donate=True)

        _record(bw)
    return out


# ---------------------------------------------------------------------------
# fused attention/sphere paths (numpy fallbacks keep semantics identical)


def attn_split_rotary(x: Tensor, freq: Tensor, heads: int, scale_by: float) -> Tensor:
    """(B, N, D) -> (B, heads, N, hd), pairs rotated by token-index phases.

    Equivalent to a head split followed by :func:`rotary_phase` and a scalar
    multiply; fused because it sits inside every fast step.
    """
    B, N, D = x.data.shape
    hd = D // heads
    p = hd // 2
    if freq.data.shape != (heads, p):
        raise ShapeMismatchError(
            f"attn_split_rotary: freq shape {freq.data.shape}, expected {(heads, p)}"
        )
    pos = np.arange(N, dtype=x.data.dtype)
    theta = pos[None, :, None] * freq.data[:, None, :]
    cs = np.cos(theta)
    sn = np.sin(theta)
    x4 = x.data.reshape(B, N, heads, hd)
    if K.ENABLED:
        y = K.rotary_fwd(x4, cs, sn, x.data.dtype.type(scale_by))
    else:
        xt = np.ascontiguousarray(x4.transpose(0, 2, 1, 3))
        x1, x2 = xt[..., :p], xt[..., p:]
        c, s = cs[None], sn[None]
        y = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1) * scale_by
    out = Tensor(y)
    if _recording_for(x, freq):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            if x.requires_grad:
                if K.ENABLED:
                    dx = K.rotary_bwd_x(g, cs, sn, x.data.dtype.type(scale_by)).reshape(B, N, D)
                else:
                    g1, g2 = g[..., :p] * scale_by, g[..., p:] * scale_by
                    c, s = cs[None], sn[None]
                    dxt = np.concatenate([g1 * c + g2 * s, -g1 * s + g2 * c], axis=-1)
                    dx = np.ascontiguousarray(dxt.transpose(0, 2, 1, 3)).reshape(B, N, D)
                _accum(x, dx, donate=True)
            if freq.requires_grad:
                if K.ENABLED:
                    dth = K.rotary_bwd_theta(g, y)
                else:
                    o1, o2 = y[..., :p], y[..., p:]
                    dth = (g[..., p:] * o1 - g[..., :p] * o2).sum(axis=0)
                gf = np.einsum("n,hnp->hp", pos, dth)
                _accum(freq, gf, donate=True)

        _record(bw)
    return out


def attn_split(x: Tensor, heads: int) -> Tensor:
    """(B, N, D) -> contiguous (B, heads, N, hd)."""
    B, N, D = x.data.shape
    hd = D // heads
    x4 = x.data.reshape(B, N, heads, hd)
    if K.ENABLED:
        y = K.heads_to_batch(x4)
    else:
        y = np.ascontiguousarray(x4.transpose(0, 2, 1, 3))
    out = Tensor(y)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            if K.ENABLED:
                dx = K.batch_to_heads(g).reshape(B, N, D)
            else:
                dx = np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(B, N, D)
            _accum(x, dx, donate=True)

        _record(bw)
    return out


def attn_merge(x: Tensor) -> Tensor:
    """(B, heads, N, hd) -> contiguous (B, N, heads*hd)."""
    B, h, N, hd = x.data.shape
    if K.ENABLED:
        y = K.batch_to_heads(x.data).reshape(B, N, h * hd)
    else:
        y = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(B, N, h * hd)
    out = Tensor(y)
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad.reshape(B, N, h, hd)
            if K.ENABLED:
                dx = K.heads_to_batch(g)
            else:
                dx = np.ascontiguousarray(g.transpose(0, 2, 1, 3))
            _accum(x, dx, donate=True)

        _record(bw)
    return out


def bias_relu(x: Tensor, b: Tensor) -> Tensor:
    """relu(x + b) with b broadcast over leading axes."""
    if b.data.shape != x.data.shape[-1:]:
        raise ShapeMismatchError(
            f"bias_relu: bias shape {b.data.shape} does not match last axis of {x.data.shape}"
        )
    if K.ENABLED and x.data.flags.c_contiguous:
        y = K.bias_relu_fwd(x.data.reshape(-1, x.data.shape[-1]), b.data).reshape(x.data.shape)
    else:
        y = np.maximum(x.data + b.data, 0)
    out = Tensor(y)
    if _recording_for(x, b):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            g = out.grad
            if K.ENABLED and g.flags.c_contiguous:
                dx = K.bias_relu_bwd(
                    g.reshape(-1, g.shape[-1]), y.reshape(-1, y.shape[-1])
                ).reshape(x.data.shape)
            else:
                dx = np.where(y > 0, g, 0)
            if b.requires_grad:
                _accum(b, dx.reshape(-1, b.data.shape[0]).sum(axis=0), donate=True)
            if x.requires_grad:
                _accum(x, dx, donate=True)

        _record(bw)
    return out


def sphere_update(x: Tensor, raw: Tensor, bias: Tensor, om: Tensor, gamma: Tensor, block: int) -> Tensor:
    """Fused fast-step tail: Pi(x + gamma * (Proj_x(raw + bias) + Om x)).

    ``x``/``raw``: (..., D) with unit-norm blocks in x; ``bias``: (D,);
    ``om``: (D/block, block, block) anti-symmetric; ``gamma``: scalar.
    Equivalent to the composition of add_bias, tangent_project, block_rotate,
    scale, add, and unit_normalize_blocks.
    """
    _same_shape(x, raw, "sphere_update")
    D = x.data.shape[-1]
    nbk = D // block
    shape3 = (-1, nbk, block)
    if K.ENABLED and x.data.flags.c_contiguous and raw.data.flags.c_contiguous:
        y = K.sphere_update_fwd(
            x.data.reshape(shape3),
            raw.data.reshape(shape3),
            bias.data.reshape(nbk, block),
            om.data,
            x.data.dtype.type(float(gamma.data)),
        ).reshape(x.data.shape)
        out = Tensor(y)
        if _recording_for(x, raw, bias, om, gamma):
            out.requires_grad = True

            def bw():
                if out.grad is None:
                    return
                dx, draw, dom, dgamma = K.sphere_update_bwd(
                    x.data.reshape(shape3),
                    raw.data.reshape(shape3),
                    bias.data.reshape(nbk, block),
                    om.data,
                    x.data.dtype.type(float(gamma.data)),
                    out.grad.reshape(shape3),
                )
                if x.requires_grad:
                    _accum(x, dx.reshape(x.data.shape), donate=True)
                if raw.requires_grad:
                    if bias.requires_grad:
                        _accum(bias, draw.sum(axis=0).reshape(D), donate=True)
                    _accum(raw, draw.reshape(x.data.shape), donate=True)
                if om.requires_grad:
                    _accum(om, dom, donate=True)
                if gamma.requires_grad:
                    _accum(gamma, np.asarray(dgamma, dtype=x.data.dtype))

            _record(bw)
        return out
    # reference composition
    v = add_bias(raw, bias)
    f = add(tangent_project(v, x, block), block_rotate(x, om))
    return unit_normalize_blocks(add(x, scale(f, gamma)), block)


def slice_rows(x: Tensor, count: int) -> Tensor:
    """First ``count`` rows along axis 0; gradient scatters back into place."""
    if count > x.data.shape[0]:
        raise ShapeMismatchError(
            f"slice_rows: want {count} rows from {x.data.shape}"
        )
    if count == x.data.shape[0]:
        return x
    out = Tensor(x.data[:count])
    if _recording_for(x):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:count] += out.grad

        _record(bw)
    return out


# ---------------------------------------------------------------------------
# embedding and classification


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])
    if _recording_for(table):
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)

        _record(bw)
    return out


def softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, mask: np.ndarray, reduction: str = "mean"
) -> Tensor:
    """-log softmax(logits)[label] over unmasked positions, mean or sum.

    ``logits``: (..., V); ``labels``/``mask``: (...). Raises
    DegenerateBatchError when the mask selects nothing.
    """
    ld = logits.data
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    if labels.shape != ld.shape[:-1] or mask.shape != ld.shape[:-1]:
        raise ShapeMismatchError(
            f"cross entropy: logits {ld.shape} vs labels {labels.shape} / mask {mask.shape}"
        )
    flat = ld.reshape(-1, ld.shape[-1])
    lab = labels.reshape(-1)
    msk = mask.reshape(-1).astype(ld.dtype)
    count = msk.sum()
    if count == 0:
        raise DegenerateBatchError("all positions are masked; loss undefined")
    denom = count if reduction == "mean" else 1.0
    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (flat - m) - np.log(z)
    nll = -logp[np.arange(flat.shape[0]), lab]
    out = Tensor(np.asarray((nll * msk).sum() / denom, dtype=ld.dtype))
    if _recording_for(logits):
        out.requires_grad = True
        probs = e / z

        def bw():
            if out.grad is None:
                return
            g = probs.copy()
            g[np.arange(flat.shape[0]), lab] -= 1.0
            g *= (msk / denom)[:, None]
            g *= out.grad
            _accum(logits, g.reshape(ld.shape), donate=True)

        _record(bw)
    return out


# ---------------------------------------------------------------------------
# graph utilities


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn`` without recording; recompute its graph during backward.

    ``fn`` must be a pure function of its tensor inputs (plus parameters it
    closes over). Forward values are identical to running ``fn`` recorded;
    gradients are identical because the recomputation performs the same float
    ops in the same order.
    """
    if _active_tape is None:
        return fn(*inputs)
    with no_grad():
        out_value = fn(*inputs)
    out = Tensor(out_value.data)
    # fn may close over trainable parameters, so the output is treated as
    # grad-requiring even when no explicit input requires grad.
    out.requires_grad = True
    outer_inputs = inputs

    def bw():
        if out.grad is None:
            return
        boundary = tuple(
            Tensor(t.data, requires_grad=t.requires_grad) for t in outer_inputs
        )
        sub = Tape()
        with recording(sub):
            replay = fn(*boundary)
        backward_from(sub, replay, out.grad)
        for orig, copy in zip(outer_inputs, boundary):
            if orig.requires_grad and copy.grad is not None:
                _accum(orig, copy.grad, donate=True)

    _record(bw)
    return out
