"""Deterministic supervised training.

AdamW with decoupled weight decay, cosine learning-rate schedule, global-norm
gradient clipping, padded variable-length batching with loss masking, per-step
JSONL metrics, and per-epoch checkpointing. Every random choice derives from
the run seed, so (config, seed, dataset) determine every logged number except
wall-clock milliseconds.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_model
from .errors import ConfigError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# flat key=value train-config file: every accepted key with its parser and doc
CONFIG_KEYS = {
    "lr": (float, "base learning rate"),
    "batch_size": (int, "sequences per optimizer step"),
    "epochs": (int, "passes over the training set"),
    "weight_decay": (float, "decoupled AdamW weight decay"),
    "grad_clip": (float, "global-norm gradient ceiling"),
    "schedule": (str, "learning-rate schedule; only 'cosine'"),
    "seed": (int, "run seed; drives shuffling, init, episode noise"),
    "backprop": (str, "'full' or 'truncated:<w>' (last w fast iterations)"),
    "model": (str, "model kind: 'fsrm' or 'lstm'"),
    "train": (str, "training dataset path (jsonl)"),
    "val": (str, "validation dataset path (jsonl)"),
    "checkpoint": (str, "checkpoint output path"),
    "metrics": (str, "metrics JSONL output path"),
    "preset": (str, "model size preset: 'desk' or 'paper'"),
    "d": (int, "latent channels per token"),
    "k_tokens": (int, "latent tokens in the first fast process"),
    "t_fast": (int, "fast steps per observation"),
    "history": (int, "layer-1 readout queue length"),
    "heads": (int, "attention heads"),
    "osc_dim": (int, "oscillator block size"),
    "mlp_hidden": (int, "MLP hidden width"),
    "gamma_init": (float, "initial step size gamma"),
    "omega_init": (float, "initial rotation generator scale"),
    "embed": (int, "LSTM embedding size"),
    "hidden": (int, "LSTM hidden size"),
    "depth": (int, "LSTM layer count"),
}


def parse_train_config(text: str) -> dict:
    """Parse a flat key=value config file; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        parser, _ = CONFIG_KEYS[key]
        try:
            out[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return out


@dataclass
class TrainConfig:
    lr: float = 5e-3
    batch_size: int = 256
    epochs: int = 30
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    schedule: str = "cosine"
    seed: int = 0
    backprop: str = "full"          # or "truncated:<w>"
    model_kind: str = "fsrm"
    checkpoint_path: str | None = None
    metrics_path: str | None = None

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        self.truncate_window()  # validates format
        return self

    def truncate_window(self) -> int | None:
        if self.backprop == "full":
            return None
        if self.backprop.startswith("truncated:"):
            w = int(self.backprop.split(":", 1)[1])
            if w < 1:
                raise ConfigError(f"truncation window must be >= 1, got {w}")
            return w
        raise ConfigError(f"backprop must be 'full' or 'truncated:<w>', got {self.backprop!r}")


def cross_entropy_loss(logits: T.Tensor, labels, mask) -> T.Tensor:
    """Mean of -log softmax(logits)[label] over unmasked positions."""
    return T.softmax_cross_entropy(logits, labels, mask)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_global_norm(grads: list[np.ndarray], ceiling: float) -> float:
    """Scale all gradients by ceiling/norm when the joint L2 norm exceeds it."""
    if ceiling <= 0:
        raise ConfigError(f"clip ceiling must be positive, got {ceiling}")
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(total)
    if norm > ceiling:
        factor = ceiling / norm
        for g in grads:
            g *= factor
    return norm


class AdamW:
    """Bias-corrected moment estimation with decoupled weight decay."""

    def __init__(self, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = list(params)  # (name, Tensor)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]
        self.step_count = 0

    def named_moments(self, which):
        src = self.m if which == "m" else self.v
        return [(name, buf) for (name, _), buf in zip(self.params, src)]

    def load_moments(self, tensors: dict, step: int):
        for (name, _), m, v in zip(self.params, self.m, self.v):
            m[...] = tensors[f"adam.m.{name}"]
            v[...] = tensors[f"adam.v.{name}"]
        self.step_count = step

    def step(self, lr_t: float, weight_decay: float):
        grads = []
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}; step aborted")
            grads.append(g)
        self.step_count += 1
        t_ = self.step_count
        bc1 = 1.0 - self.beta1**t_
        bc2 = 1.0 - self.beta2**t_
        for (name, p), g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr_t * update).astype(p.data.dtype, copy=False)
            if weight_decay:
                p.data -= (lr_t * weight_decay) * p.data


def pad_batch(samples, indices):
    """Pad selected samples to the batch max length; mask marks real tokens."""
    chosen = [samples[i] for i in indices]
    width = max(len(s.tokens) for s in chosen)
    tokens = np.zeros((len(chosen), width), dtype=np.int64)
    labels = np.zeros((len(chosen), width), dtype=np.int64)
    mask = np.zeros((len(chosen), width), dtype=np.int64)
    for r, s in enumerate(chosen):
        L = len(s.tokens)
        tokens[r, :L] = s.tokens
        labels[r, :L] = s.labels
        mask[r, :L] = 1
    return tokens, labels, mask


def episode_seed(run_seed: int, epoch: int, step: int, row: int) -> int:
    return int(np.random.SeedSequence((run_seed, 17, epoch, step, row)).generate_state(1)[0])


def fit(cfg: TrainConfig, model, train_samples, val_samples=None, progress=None):
    """Train ``model`` on ``train_samples``; returns the metrics line list.

    Writes one metrics line per optimizer step plus one validation line per
    epoch; writes a checkpoint after every epoch and at the end (same path).
    """
    from .evaluate import evaluate  # local import: evaluate depends on dyck only

    cfg.validate()
    if not train_samples:
        raise ConfigError("training dataset is empty")
    truncate = cfg.truncate_window()
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    shuffle_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((cfg.seed, 11)))
    )
    optimizer = AdamW(model.parameters())
    metrics_lines = []
    metrics_fh = open(cfg.metrics_path, "w", encoding="utf-8") if cfg.metrics_path else None

    def emit(record):
        line = json.dumps(record, separators=(",", ":"))
        metrics_lines.append(line)
        if metrics_fh:
            metrics_fh.write(line)
            metrics_fh.write("\n")
            metrics_fh.flush()

    t_start = time.monotonic()
    global_step = 0
    try:
        for epoch in range(cfg.epochs):
            perm = shuffle_rng.permutation(n)
            epoch_losses = []
            lr_t = cfg.lr
            for b in range(steps_per_epoch):
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                # longest-first rows let the model drop finished sequences
                idx = sorted(idx, key=lambda i: -len(train_samples[i].tokens))
                tokens, labels, mask = pad_batch(train_samples, idx)
                seeds = [
                    episode_seed(cfg.seed, epoch, b, r) for r in range(len(idx))
                ]
                for _, p in optimizer.params:
                    p.zero_grad()
                tape = T.Tape()
                with T.recording(tape):
                    if hasattr(model, "unroll_loss"):
                        loss = model.unroll_loss(
                            tokens, labels, mask, seeds, truncate=truncate
                        )
                    else:
                        logits = model.forward_batch(
                            tokens, seeds, training=True, truncate=truncate
                        )
                        loss = cross_entropy_loss(logits, labels, mask)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss {loss_val} at epoch {epoch} step {b}; aborting"
                    )
                T.backward(tape, loss)
                grads = [
                    p.grad for _, p in optimizer.params if p.grad is not None
                ]
                clip_global_norm(grads, cfg.grad_clip)
                lr_t = cosine_lr(global_step, total_steps, cfg.lr)
                optimizer.step(lr_t, cfg.weight_decay)
                global_step += 1
                epoch_losses.append(loss_val)
                emit(
                    {
                        "epoch": epoch,
                        "step": global_step,
                        "loss": loss_val,
                        "lr": lr_t,
                        "val_acc": None,
                        "wall_ms": int((time.monotonic() - t_start) * 1000),
                    }
                )
                if progress:
                    progress(epoch, global_step, loss_val)
            val_acc = None
            if val_samples:
                report = evaluate(model, val_samples, model_t_eval(model))
                val_acc = report.overall_acc_all
            emit(
                {
                    "epoch": epoch,
                    "step": global_step,
                    "loss": float(np.mean(epoch_losses)),
                    "lr": lr_t,
                    "val_acc": val_acc,
                    "wall_ms": int((time.monotonic() - t_start) * 1000),
                }
            )
            if cfg.checkpoint_path:
                save_model(cfg.checkpoint_path, model, optimizer)
        if cfg.checkpoint_path:
            save_model(cfg.checkpoint_path, model, optimizer)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return metrics_lines


def model_t_eval(model) -> int:
    return getattr(model.cfg, "t_fast", 1)
