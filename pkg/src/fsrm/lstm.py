"""Stacked LSTM sequence classifier on the same tensor engine.

Standard gated recurrence: sigmoid input/forget/output gates, tanh candidate
and cell squash, zero-initialized hidden and cell state, per-step classifier
on the top hidden state. Trained and evaluated through the same harness as
the fast-slow model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, VocabularyError
from .model import _glorot


@dataclass
class LstmConfig:
    vocab_in: int = 60
    vocab_out: int = 31
    embed: int = 64
    hidden: int = 256
    depth: int = 2

    def validate(self):
        if min(self.vocab_in, self.vocab_out, self.embed, self.hidden, self.depth) < 1:
            raise ConfigError("all LSTM dimensions must be positive")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


class LstmEpisode:
    def __init__(self, batch: int, cfg: LstmConfig, dtype):
        self.h = [T.zeros((batch, cfg.hidden), dtype=dtype) for _ in range(cfg.depth)]
        self.c = [T.zeros((batch, cfg.hidden), dtype=dtype) for _ in range(cfg.depth)]
        self.batch = batch
        self.slow_steps = 0


class LstmClassifier:
    GATES = ("i", "f", "g", "o")

    def __init__(self, cfg: LstmConfig, init_seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((init_seed, 8))))
        self.embed = T.tensor(
            (rng.standard_normal((cfg.vocab_in, cfg.embed)) * 0.1).astype(dtype),
            requires_grad=True,
        )
        self.w = []  # per layer: dict gate -> weight ((in+hidden), hidden)
        self.b = []
        for layer in range(cfg.depth):
            fan_in = (cfg.embed if layer == 0 else cfg.hidden) + cfg.hidden
            wd, bd = {}, {}
            for gate in self.GATES:
                wd[gate] = T.tensor(_glorot(rng, (fan_in, cfg.hidden), dtype), requires_grad=True)
                init = 1.0 if gate == "f" else 0.0  # forget bias at 1 for trainability
                bd[gate] = T.tensor(np.full(cfg.hidden, init, dtype=dtype), requires_grad=True)
            self.w.append(wd)
            self.b.append(bd)
        self.w_cls = T.tensor(_glorot(rng, (cfg.hidden, cfg.vocab_out), dtype), requires_grad=True)
        self.b_cls = T.tensor(np.zeros(cfg.vocab_out, dtype=dtype), requires_grad=True)

    def parameters(self):
        out = [("embed.table", self.embed)]
        for layer in range(self.cfg.depth):
            for gate in self.GATES:
                out.append((f"lstm{layer}.w_{gate}", self.w[layer][gate]))
                out.append((f"lstm{layer}.b_{gate}", self.b[layer][gate]))
        out += [("cls.w", self.w_cls), ("cls.b", self.b_cls)]
        return out

    def load_parameters(self, tensors):
        mine = dict(self.parameters())
        missing = set(mine) - set(tensors)
        extra = set(tensors) - set(mine)
        if missing or extra:
            raise ConfigError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in mine.items():
            t.data = np.asarray(tensors[name], dtype=self.dtype)
        return self

    def new_episode(self, seeds) -> LstmEpisode:
        return LstmEpisode(len(seeds), self.cfg, self.dtype)

    def step(self, state: LstmEpisode, token_ids, training: bool = False,
             truncate=None, collector=None, token_scalar=None) -> T.Tensor:
        if truncate is not None:
            raise ConfigError("truncated backprop applies to fast loops, not the LSTM")
        ids = np.asarray(token_ids)
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_in:
            bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
            raise VocabularyError(
                f"token id {bad} outside input vocabulary [0, {self.cfg.vocab_in})"
            )
        x = T.embedding(self.embed, ids)
        for layer in range(self.cfg.depth):
            cat = T.concat([x, state.h[layer]], axis=1)
            w, b = self.w[layer], self.b[layer]
            gi = T.sigmoid(T.add_bias(T.matmul(cat, w["i"]), b["i"]))
            gf = T.sigmoid(T.add_bias(T.matmul(cat, w["f"]), b["f"]))
            gg = T.tanh(T.add_bias(T.matmul(cat, w["g"]), b["g"]))
            go = T.sigmoid(T.add_bias(T.matmul(cat, w["o"]), b["o"]))
            c_new = T.add(T.mul(gf, state.c[layer]), T.mul(gi, gg))
            h_new = T.mul(go, T.tanh(c_new))
            state.c[layer] = c_new
            state.h[layer] = h_new
            x = h_new
        state.slow_steps += 1
        return T.add_bias(T.matmul(x, self.w_cls), self.b_cls)

    def forward(self, tokens, seed: int = 0, training: bool = False, truncate=None,
                collector=None):
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.shape[0] == 0:
            raise ConfigError("forward expects a non-empty 1-D token sequence")
        state = self.new_episode([seed])
        rows = [
            self.step(state, tokens[s : s + 1], training=training, truncate=truncate)
            for s in range(tokens.shape[0])
        ]
        return T.concat(rows, axis=0), state

    def forward_batch(self, tokens, seeds, training: bool = False, truncate=None) -> T.Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ConfigError("forward_batch expects a non-empty (batch, steps) matrix")
        state = self.new_episode(seeds)
        rows = [
            T.reshape(
                self.step(state, tokens[:, s], training=training, truncate=truncate),
                (tokens.shape[0], 1, self.cfg.vocab_out),
            )
            for s in range(tokens.shape[1])
        ]
        return T.concat(rows, axis=1)
