"""Fast-slow recurrent model (FSRM).

The latent state is a set of tokens whose contiguous oscillator blocks live on
unit spheres. Per incoming observation the state takes ``t_fast`` update steps

    X <- Pi(X + gamma * F(X, C)),   F = Omega x + Proj_x(raw(X, C))

where ``raw`` is an attention+MLP interaction over latent tokens with the
condition injected additively, Proj removes the radial component per block,
and Omega is anti-symmetric by construction so the rotation term is tangent
as well.

The two-process architecture stacks a second fast layer whose condition is
the elementwise sum of a queue of the first layer's readouts (stacked along
the token axis, zero-filled until the queue warms up) and the second layer's
previous readout. Latents are drawn once per episode and never reset while
the episode runs.

All state tensors carry a leading batch axis; single-sequence entry points
wrap a batch of one, so streamed and batched execution share one code path
and produce bit-identical values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError, VocabularyError


@dataclass
class ModelConfig:
    vocab_in: int = 60
    vocab_out: int = 31
    k_tokens: int = 16          # latent tokens in the first fast process
    d: int = 64                 # channels per latent token
    osc_dim: int = 4            # oscillator block size (divides d)
    heads: int = 4
    t_fast: int = 5             # fast steps per observation
    layers: int = 2             # fixed two-process architecture
    history: int = 4            # readout queue length feeding layer 2
    gamma_init: float = 0.1
    omega_init: float = 0.1
    mlp_hidden: int = 128

    def validate(self):
        if self.d % self.osc_dim != 0:
            raise ConfigError(f"d={self.d} not divisible by osc_dim={self.osc_dim}")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if (self.d // self.heads) % 2 != 0:
            raise ConfigError("head dimension must be even for phase rotations")
        if self.t_fast < 1 or self.history < 1 or self.k_tokens < 1:
            raise ConfigError("t_fast, history and k_tokens must all be >= 1")
        if self.layers != 2:
            raise ConfigError("the two-process architecture requires layers=2")
        if self.vocab_in < 1 or self.vocab_out < 1 or self.mlp_hidden < 1:
            raise ConfigError("vocab and hidden sizes must be positive")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def desk_config(**overrides) -> ModelConfig:
    """CPU-feasible preset; the paper-scale preset uses d=256."""
    cfg = ModelConfig(d=64, k_tokens=16, mlp_hidden=128, heads=4, t_fast=5, history=4)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def paper_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(d=256, k_tokens=16, mlp_hidden=512, heads=4, t_fast=5, history=4)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def _glorot(rng, shape, dtype):
    fan_in, fan_out = shape[0], shape[-1]
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class FastBlockParams:
    """One fast process: attention, MLP, anti-symmetric generator, step size."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d, hidden = cfg.d, cfg.mlp_hidden
        p = (d // cfg.heads) // 2
        nb = d // cfg.osc_dim
        self.cfg = cfg
        self.wq = T.tensor(_glorot(rng, (d, d), dtype), requires_grad=True)
        self.wk = T.tensor(_glorot(rng, (d, d), dtype), requires_grad=True)
        self.wv = T.tensor(_glorot(rng, (d, d), dtype), requires_grad=True)
        self.wo = T.tensor(_glorot(rng, (d, d), dtype), requires_grad=True)
        # per-head log-spaced phase frequencies, rotary-style over token index
        base = np.power(100.0, -np.arange(p) / max(p, 1))
        self.rot_freq = T.tensor(
            np.tile(base, (cfg.heads, 1)).astype(dtype), requires_grad=True
        )
        self.w1 = T.tensor(_glorot(rng, (d, hidden), dtype), requires_grad=True)
        self.b1 = T.tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = T.tensor(_glorot(rng, (hidden, d), dtype), requires_grad=True)
        self.b2 = T.tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.omega_gen = T.tensor(
            rng.uniform(-cfg.omega_init, cfg.omega_init, size=(nb, cfg.osc_dim, cfg.osc_dim)).astype(dtype),
            requires_grad=True,
        )
        self.gamma = T.tensor(np.asarray(cfg.gamma_init, dtype=dtype), requires_grad=True)

    def named(self, prefix):
        return [
            (f"{prefix}.attn.wq", self.wq),
            (f"{prefix}.attn.wk", self.wk),
            (f"{prefix}.attn.wv", self.wv),
            (f"{prefix}.attn.wo", self.wo),
            (f"{prefix}.attn.rot_freq", self.rot_freq),
            (f"{prefix}.mlp.w1", self.w1),
            (f"{prefix}.mlp.b1", self.b1),
            (f"{prefix}.mlp.w2", self.w2),
            (f"{prefix}.mlp.b2", self.b2),
            (f"{prefix}.omega.gen", self.omega_gen),
            (f"{prefix}.gamma", self.gamma),
        ]

    def omega(self) -> T.Tensor:
        """Materialized anti-symmetric rotation generators, gen - gen^T."""
        return T.antisymmetrize(self.omega_gen)

    def _mlp_head(self, x: T.Tensor, c: T.Tensor) -> T.Tensor:
        """Attention + first MLP affine; the final bias is folded downstream."""
        if x.shape != c.shape:
            raise ShapeMismatchError(
                f"state {x.shape} and condition {c.shape} must match"
            )
        a = T.add(x, c)
        hd = self.cfg.d // self.cfg.heads
        scale = 1.0 / math.sqrt(hd)
        q = T.attn_split_rotary(T.linear(a, self.wq), self.rot_freq, self.cfg.heads, scale)
        k = T.attn_split_rotary(T.linear(a, self.wk), self.rot_freq, self.cfg.heads, 1.0)
        v = T.attn_split(T.linear(a, self.wv), self.cfg.heads)
        att = T.softmax_lastdim(T.matmul(q, T.transpose(k, (0, 1, 3, 2))))
        o = T.linear(T.attn_merge(T.matmul(att, v)), self.wo)
        m = T.add(a, o)  # x + c + attention output
        h = T.bias_relu(T.linear(m, self.w1), self.b1)
        return T.linear(h, self.w2)

    def raw_interaction(self, x: T.Tensor, c: T.Tensor) -> T.Tensor:
        """Attention + MLP mixing of latent tokens with additive condition."""
        return T.add_bias(self._mlp_head(x, c), self.b2)

    def interaction(self, x: T.Tensor, c: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """Tangent update F and the raw interaction it was projected from."""
        raw = self.raw_interaction(x, c)
        tan = T.tangent_project(raw, x, self.cfg.osc_dim)
        rot = T.block_rotate(x, self.omega())
        return T.add(tan, rot), raw

    def fast_step(self, x: T.Tensor, c: T.Tensor) -> T.Tensor:
        pre = self._mlp_head(x, c)
        return T.sphere_update(x, pre, self.b2, self.omega(), self.gamma, self.cfg.osc_dim)

    def fast_step_with_energy(self, x: T.Tensor, c: T.Tensor) -> tuple[T.Tensor, float]:
        """One step plus the energy driving it, -1/2 sum_i x_i . raw_i."""
        pre = self._mlp_head(x, c)
        raw = T.add_bias(pre, self.b2)
        e = -0.5 * float(np.sum(x.data * raw.data))
        return (
            T.sphere_update(x, pre, self.b2, self.omega(), self.gamma, self.cfg.osc_dim),
            e,
        )

    def fast_loop(
        self,
        x: T.Tensor,
        c: T.Tensor,
        steps: int,
        truncate: int | None = None,
        use_checkpoint: bool = False,
    ) -> T.Tensor:
        """``steps`` sequential fast updates against a fixed condition.

        In truncated mode gradients flow through only the last ``truncate``
        iterations; forward values are identical to the full mode.
        """
        if steps < 1:
            raise ConfigError(f"fast_loop requires steps >= 1, got {steps}")

        def run(x_, c_):
            cur = x_
            skip = 0 if truncate is None else max(steps - truncate, 0)
            if skip > 0:
                with T.no_grad():
                    for _ in range(skip):
                        cur = self.fast_step(cur, c_)
                cur = T.detach(cur)
            for _ in range(steps - skip):
                cur = self.fast_step(cur, c_)
            return cur

        if use_checkpoint:
            return T.checkpoint(run, x, c)
        return run(x, c)


def j_interaction(x: T.Tensor, c: T.Tensor, params: FastBlockParams) -> T.Tensor:
    """The full tangent update F(X, C); see FastBlockParams.interaction."""
    f, _ = params.interaction(x, c)
    return f


def energy(x: T.Tensor, c: T.Tensor, params: FastBlockParams) -> float:
    """Scalar energy -1/2 sum_i x_i . raw_i from the dynamics' own interaction."""
    raw = params.raw_interaction(x, c)
    return -0.5 * float(np.sum(x.data * raw.data))


def init_latent(seed, token_count: int, d: int, block: int, dtype=np.float32) -> T.Tensor:
    """I.i.d. standard-normal draw, then per-block unit normalization."""
    raw = gaussian_latent(seed, token_count, d, dtype)
    return T.unit_normalize_blocks(T.tensor(raw), block)


def gaussian_latent(seed, token_count: int, d: int, dtype=np.float32) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return rng.standard_normal((token_count, d)).astype(dtype)


class EpisodeState:
    """Per-sequence persistent state: both latents, the readout queue, counters.

    Latents are written only by the fast loops; every write is logged so tests
    can assert the never-reset contract.
    """

    def __init__(self, model: "FSRM", batch: int, seeds):
        cfg = model.cfg
        if len(seeds) != batch:
            raise ConfigError(f"need {batch} episode seeds, got {len(seeds)}")
        self._cap = cfg.history
        dt = model.dtype
        x_rows = [gaussian_latent((s, 0), cfg.k_tokens, cfg.d, dt) for s in seeds]
        z_rows = [
            gaussian_latent((s, 1), cfg.history * cfg.k_tokens, cfg.d, dt) for s in seeds
        ]
        with T.no_grad():
            self.layer1 = T.unit_normalize_blocks(T.tensor(np.stack(x_rows)), cfg.osc_dim)
            self.layer2 = T.unit_normalize_blocks(T.tensor(np.stack(z_rows)), cfg.osc_dim)
        self.history: list[T.Tensor] = []
        self.prev_z_out = T.zeros((batch, cfg.history * cfg.k_tokens, cfg.d), dtype=dt)
        self._zero_slot = T.zeros((batch, cfg.k_tokens, cfg.d), dtype=dt)
        self.batch = batch
        self.seeds = list(seeds)
        self.fast_steps_layer1 = 0
        self.fast_steps_layer2 = 0
        self.slow_steps = 0
        self.write_log: list[tuple[str, int]] = []

    @property
    def fast_step_count(self) -> int:
        return self.fast_steps_layer1 + self.fast_steps_layer2

    @property
    def slow_step_count(self) -> int:
        return self.slow_steps

    def stacked_history(self) -> T.Tensor:
        """Queue slots joined along the token axis, oldest first, zero-filled."""
        slots = [self._zero_slot] * (self._cap - len(self.history)) + self.history
        return T.concat(slots, axis=1)


class TraceCollector:
    """Accumulates per-fast-step energies and per-slow-step readout snapshots."""

    def __init__(self):
        self.energy_records = []  # (fast_step, slow_step, layer, token_id, energy)
        self.latent_records = []  # (slow_step, layer, flattened readout)

    def energy(self, fast_step, slow_step, layer, token_id, value):
        self.energy_records.append((fast_step, slow_step, layer, token_id, value))

    def latent(self, slow_step, layer, vec):
        self.latent_records.append((slow_step, layer, np.asarray(vec, dtype=np.float64)))


class FSRM:
    """Two-process fast-slow model over bracket streams."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((init_seed, 7))))
        kd = cfg.k_tokens * cfg.d
        self.embed = T.tensor(
            (rng.standard_normal((cfg.vocab_in, kd)) * 0.5).astype(dtype), requires_grad=True
        )
        self.fast1 = FastBlockParams(cfg, rng, dtype)
        self.fast2 = FastBlockParams(cfg, rng, dtype)
        self.w_xread = T.tensor(_glorot(rng, (cfg.d, cfg.d), dtype), requires_grad=True)
        self.w_zread = T.tensor(_glorot(rng, (cfg.d, cfg.d), dtype), requires_grad=True)
        flat = cfg.history * cfg.k_tokens * cfg.d
        self.w_cls = T.tensor(_glorot(rng, (flat, cfg.vocab_out), dtype), requires_grad=True)
        self.b_cls = T.tensor(np.zeros(cfg.vocab_out, dtype=dtype), requires_grad=True)

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        out = [("embed.table", self.embed)]
        out += self.fast1.named("fast1")
        out += self.fast2.named("fast2")
        out += [
            ("readout.x.w", self.w_xread),
            ("readout.z.w", self.w_zread),
            ("cls.w", self.w_cls),
            ("cls.b", self.b_cls),
        ]
        return out

    def load_parameters(self, tensors: dict[str, np.ndarray]):
        mine = dict(self.parameters())
        missing = set(mine) - set(tensors)
        extra = set(tensors) - set(mine)
        if missing or extra:
            raise ConfigError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in mine.items():
            arr = np.asarray(tensors[name], dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} vs model {t.data.shape}")
            t.data = arr
        return self

    # ------------------------------------------------------------------
    # episode interface

    def new_episode(self, seeds) -> EpisodeState:
        return EpisodeState(self, len(seeds), seeds)

    def encode_token(self, token_ids) -> T.Tensor:
        ids = np.asarray(token_ids)
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_in:
            bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
            raise VocabularyError(
                f"token id {bad} outside input vocabulary [0, {self.cfg.vocab_in})"
            )
        emb = T.embedding(self.embed, ids)
        return T.reshape(emb, (ids.shape[0], self.cfg.k_tokens, self.cfg.d))

    def step(
        self,
        state: EpisodeState,
        token_ids,
        training: bool = False,
        truncate: int | None = None,
        collector: TraceCollector | None = None,
        token_scalar: int | None = None,
    ) -> T.Tensor:
        """Advance one observation; returns per-sequence logits (batch, vocab_out)."""
        cfg = self.cfg
        c = self.encode_token(token_ids)
        use_ckpt = training

        if collector is None:
            state.layer1 = self.fast1.fast_loop(
                state.layer1, c, cfg.t_fast, truncate, use_checkpoint=use_ckpt
            )
        else:
            state.layer1 = self._traced_loop(
                self.fast1, state.layer1, c, 1, state, collector, token_scalar
            )
        state.fast_steps_layer1 += cfg.t_fast
        state.write_log.append(("layer1", state.slow_steps))

        x_out = T.linear(state.layer1, self.w_xread)
        state.history.append(x_out)
        if len(state.history) > cfg.history:
            state.history.pop(0)

        cond2 = T.add(state.stacked_history(), state.prev_z_out)
        if collector is None:
            state.layer2 = self.fast2.fast_loop(
                state.layer2, cond2, cfg.t_fast, truncate, use_checkpoint=use_ckpt
            )
        else:
            state.layer2 = self._traced_loop(
                self.fast2, state.layer2, cond2, 2, state, collector, token_scalar
            )
        state.fast_steps_layer2 += cfg.t_fast
        state.write_log.append(("layer2", state.slow_steps))

        z_out = T.linear(state.layer2, self.w_zread)
        state.prev_z_out = z_out
        state.slow_steps += 1

        flat = T.reshape(z_out, (state.batch, cfg.history * cfg.k_tokens * cfg.d))
        logits = T.add_bias(T.matmul(flat, self.w_cls), self.b_cls)
        if collector is not None:
            collector.latent(state.slow_steps - 1, 1, x_out.data.reshape(state.batch, -1)[0])
            collector.latent(state.slow_steps - 1, 2, z_out.data.reshape(state.batch, -1)[0])
        return logits

    def _traced_loop(self, block, x, c, layer, state, collector, token_scalar):
        base = state.slow_steps * self.cfg.t_fast
        cur = x
        for t in range(self.cfg.t_fast):
            cur, e = block.fast_step_with_energy(cur, c)
            collector.energy(base + t + 1, state.slow_steps, layer, token_scalar, e)
        return cur

    def forward(
        self,
        tokens,
        seed: int = 0,
        training: bool = False,
        truncate: int | None = None,
        collector: TraceCollector | None = None,
    ) -> T.Tensor:
        """Process one token sequence; returns (logits (len, vocab_out), episode state)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.shape[0] == 0:
            raise ConfigError("forward expects a non-empty 1-D token sequence")
        state = self.new_episode([seed])
        rows = []
        for s in range(tokens.shape[0]):
            rows.append(
                self.step(
                    state,
                    tokens[s : s + 1],
                    training=training,
                    truncate=truncate,
                    collector=collector,
                    token_scalar=int(tokens[s]),
                )
            )
        return T.concat(rows, axis=0), state

    def forward_batch(
        self,
        tokens: np.ndarray,
        seeds,
        training: bool = False,
        truncate: int | None = None,
    ) -> T.Tensor:
        """Batched unroll over padded token matrix (batch, steps)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ConfigError("forward_batch expects a non-empty (batch, steps) matrix")
        state = self.new_episode(seeds)
        rows = []
        for s in range(tokens.shape[1]):
            rows.append(
                T.reshape(
                    self.step(state, tokens[:, s], training=training, truncate=truncate),
                    (tokens.shape[0], 1, self.cfg.vocab_out),
                )
            )
        return T.concat(rows, axis=1)

    def unroll_loss(
        self,
        tokens: np.ndarray,
        labels: np.ndarray,
        mask: np.ndarray,
        seeds,
        truncate: int | None = None,
    ) -> T.Tensor:
        """Training loss over a padded batch sorted by descending length.

        Rows whose sequence has ended are dropped from all computation (the
        active set is always a row prefix), which skips the padding work that
        masked-loss batching would otherwise pay. The returned loss equals
        the mean cross entropy over real positions.
        """
        tokens = np.asarray(tokens)
        labels = np.asarray(labels)
        mask = np.asarray(mask)
        lengths = mask.sum(axis=1)
        if np.any(np.diff(lengths) > 0):
            raise ConfigError("unroll_loss requires rows sorted by descending length")
        cfg = self.cfg
        B, S = tokens.shape
        total = int(lengths.sum())
        state = self.new_episode(seeds)
        x, z = state.layer1, state.layer2
        history: list[T.Tensor] = []
        prev_z_out: T.Tensor | None = None
        loss_sum = None
        for s in range(S):
            k = int(np.count_nonzero(lengths > s))
            if k == 0:
                break
            c = self.encode_token(tokens[:k, s])
            x = self.fast1.fast_loop(
                T.slice_rows(x, k), c, cfg.t_fast, truncate, use_checkpoint=True
            )
            state.fast_steps_layer1 += cfg.t_fast
            x_out = T.linear(x, self.w_xread)
            history.append(x_out)
            if len(history) > cfg.history:
                history.pop(0)
            zero = T.zeros((k, cfg.k_tokens, cfg.d), dtype=self.dtype)
            slots = [zero] * (cfg.history - len(history)) + [
                T.slice_rows(h, k) for h in history
            ]
            cond2 = T.concat(slots, axis=1)
            if prev_z_out is not None:
                cond2 = T.add(cond2, T.slice_rows(prev_z_out, k))
            z = self.fast2.fast_loop(
                T.slice_rows(z, k), cond2, cfg.t_fast, truncate, use_checkpoint=True
            )
            state.fast_steps_layer2 += cfg.t_fast
            z_out = T.linear(z, self.w_zread)
            prev_z_out = z_out
            state.slow_steps += 1
            flat = T.reshape(z_out, (k, cfg.history * cfg.k_tokens * cfg.d))
            logits = T.add_bias(T.matmul(flat, self.w_cls), self.b_cls)
            term = T.softmax_cross_entropy(
                logits, labels[:k, s], mask[:k, s], reduction="sum"
            )
            loss_sum = term if loss_sum is None else T.add(loss_sum, term)
        return T.scale(loss_sum, 1.0 / total)


# ---------------------------------------------------------------------------
# constrained configuration for the energy-descent property


def energy_descent_trajectory(
    k: int,
    n: int,
    coupling: np.ndarray,
    gamma: float,
    steps: int,
    seed: int = 0,
    condition: np.ndarray | None = None,
) -> np.ndarray:
    """Energies along the dynamics with a linear symmetric interaction.

    Omega is zero and the interaction is J_i = sum_j coupling[i, j] x_j + c_i
    with a symmetric scalar coupling matrix, the regime in which the update is
    projected gradient descent on the energy. Returns the energy after each of
    ``steps`` updates (float64).
    """
    coupling = np.asarray(coupling, dtype=np.float64)
    if coupling.shape != (k, k) or not np.allclose(coupling, coupling.T, atol=0.0):
        raise ConfigError("coupling must be a symmetric k x k matrix")
    if condition is None:
        condition = np.zeros((k, n), dtype=np.float64)
    condition = np.asarray(condition, dtype=np.float64)
    if condition.shape != (k, n):
        raise ConfigError(f"condition must have shape {(k, n)}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 3))))
    x = rng.standard_normal((k, n))
    x /= np.linalg.norm(x, axis=-1, keepdims=True)

    energies = np.empty(steps, dtype=np.float64)
    for t in range(steps):
        j = coupling @ x + condition
        dots = (j * x).sum(axis=-1, keepdims=True)
        f = j - dots * x  # tangent projection, Omega = 0
        x = x + gamma * f
        x /= np.linalg.norm(x, axis=-1, keepdims=True)
        j_new = coupling @ x + condition
        energies[t] = -0.5 * float((x * j_new).sum())
    return energies
