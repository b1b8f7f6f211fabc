"""Evaluation, diagnostics traces, and their file exports.

Accuracy is greedy argmax per position against the stack-oracle labels,
binned by position index into doubling length bins 40, 80, ..., with both
all-positions and brackets-only rates. Traces record per-fast-step energies
for both layers and per-slow-step readout snapshots annotated by the stack
oracle. Evaluation never mutates model parameters.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dyck import STAR_CLASS, is_opener, stack_depths, target_labels
from .errors import ConfigError, NumericError
from .model import TraceCollector


def worker_count() -> int:
    env = os.environ.get("FSRM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def length_bins(max_position: int) -> list[int]:
    edges = [40]
    while edges[-1] < max_position:
        edges.append(edges[-1] * 2)
    return edges


@dataclass
class BinAccuracy:
    max_len: int
    acc_all: float
    acc_brackets: float
    count: int


@dataclass
class AccuracyReport:
    bins: list[BinAccuracy]
    t_eval: int
    kind: str
    n: int | None
    overall_acc_all: float
    overall_acc_brackets: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "bins": [
                    {
                        "max_len": b.max_len,
                        "acc_all": b.acc_all,
                        "acc_brackets": b.acc_brackets,
                        "count": b.count,
                    }
                    for b in self.bins
                ],
                "T_eval": self.t_eval,
                "kind": self.kind,
                "n": self.n,
                "overall_acc_all": self.overall_acc_all,
                "overall_acc_brackets": self.overall_acc_brackets,
            },
            separators=(",", ":"),
        )

    def bin_accuracy(self, max_len: int) -> BinAccuracy:
        for b in self.bins:
            if b.max_len == max_len:
                return b
        raise KeyError(f"no bin ending at {max_len}")


class _EvalTscale:
    """Temporarily evaluate with a different fast-step count."""

    def __init__(self, model, t_eval):
        self.model = model
        self.t_eval = t_eval
        self.saved = getattr(model.cfg, "t_fast", None)

    def __enter__(self):
        if self.saved is not None:
            self.model.cfg.t_fast = self.t_eval

    def __exit__(self, *exc):
        if self.saved is not None:
            self.model.cfg.t_fast = self.saved


def predict_sequences(model, samples, t_eval: int, base_seed: int = 0,
                      chunk: int = 64) -> list[np.ndarray]:
    """Greedy per-position predictions for each sample, batched in chunks.

    Each sequence's episode noise comes from (base_seed, its index), so
    results do not depend on how sequences are grouped, and chunks can be
    dispatched to worker threads with a fixed-order merge.
    """
    if t_eval < 1:
        raise ConfigError(f"t_eval must be >= 1, got {t_eval}")

    jobs = []
    for lo in range(0, len(samples), chunk):
        jobs.append((lo, samples[lo : lo + chunk]))

    def run_chunk(job):
        lo, group = job
        width = max(len(s.tokens) for s in group)
        tokens = np.zeros((len(group), width), dtype=np.int64)
        for r, s in enumerate(group):
            tokens[r, : len(s.tokens)] = s.tokens
        seeds = [
            int(np.random.SeedSequence((base_seed, lo + r)).generate_state(1)[0])
            for r in range(len(group))
        ]
        preds = np.zeros((len(group), width), dtype=np.int64)
        with T.no_grad(), _EvalTscale(model, t_eval):
            state = model.new_episode(seeds)
            for s in range(width):
                logits = model.step(state, tokens[:, s])
                preds[:, s] = np.argmax(logits.data, axis=-1)
        return [preds[r, : len(s.tokens)].copy() for r, s in enumerate(group)]

    workers = min(worker_count(), len(jobs)) or 1
    if workers == 1:
        chunks = [run_chunk(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_chunk, jobs))
    out = []
    for c in chunks:
        out.extend(c)
    return out


def evaluate(model, samples, t_eval: int, base_seed: int = 0, chunk: int = 64) -> AccuracyReport:
    """Token accuracy report over position bins; see module docstring."""
    if not samples:
        raise ConfigError("evaluate requires at least one sample")
    preds = predict_sequences(model, samples, t_eval, base_seed=base_seed, chunk=chunk)
    max_pos = max(len(s.tokens) for s in samples)
    edges = length_bins(max_pos)
    hits = np.zeros(len(edges))
    seen = np.zeros(len(edges))
    hits_br = np.zeros(len(edges))
    seen_br = np.zeros(len(edges))
    for s, p in zip(samples, preds):
        labels = np.asarray(s.labels)
        correct = p == labels
        positions = np.arange(1, len(labels) + 1)
        bin_idx = np.searchsorted(edges, positions, side="left")
        brackets = labels != STAR_CLASS
        for b in range(len(edges)):
            in_bin = bin_idx == b
            seen[b] += in_bin.sum()
            hits[b] += correct[in_bin].sum()
            sel = in_bin & brackets
            seen_br[b] += sel.sum()
            hits_br[b] += correct[sel].sum()
    bins = [
        BinAccuracy(
            max_len=edges[b],
            acc_all=float(hits[b] / seen[b]) if seen[b] else 0.0,
            acc_brackets=float(hits_br[b] / seen_br[b]) if seen_br[b] else 0.0,
            count=int(seen[b]),
        )
        for b in range(len(edges))
        if seen[b] > 0
    ]
    meta = samples[0].meta
    return AccuracyReport(
        bins=bins,
        t_eval=t_eval,
        kind=meta.get("kind", "id"),
        n=meta.get("n"),
        overall_acc_all=float(hits.sum() / seen.sum()),
        overall_acc_brackets=float(hits_br.sum() / seen_br.sum()) if seen_br.sum() else 0.0,
    )


def position_range_accuracy(samples, preds, lo: int, hi: int) -> float:
    """Accuracy over 1-based positions in (lo, hi]; stationarity probe."""
    hit = tot = 0
    for s, p in zip(samples, preds):
        labels = np.asarray(s.labels)
        for pos in range(lo + 1, min(hi, len(labels)) + 1):
            tot += 1
            hit += int(p[pos - 1] == labels[pos - 1])
    return hit / tot if tot else 0.0


# ---------------------------------------------------------------------------
# diagnostics traces


@dataclass
class EnergyRecord:
    fast_step: int
    slow_step: int
    layer: int
    token_id: int
    energy: float


@dataclass
class LatentRecord:
    slow_step: int
    layer: int
    depth: int
    token_type: int
    open_close: str
    vector: np.ndarray


@dataclass
class DiagnosticsTrace:
    energy: list[EnergyRecord]
    latents: list[LatentRecord]
    logits: np.ndarray


def trace_episode(model, tokens, seed: int = 0) -> DiagnosticsTrace:
    """Run one episode collecting energies and annotated latent snapshots.

    Forward logits are identical to an untraced run; annotations (stack depth,
    bracket type, open/close) come from the stack oracle, not the model.
    """
    tokens = np.asarray(tokens)
    labels = target_labels(tokens)  # validates the sequence
    del labels
    depths = stack_depths(tokens)
    collector = TraceCollector()
    with T.no_grad():
        logits, _ = model.forward(tokens, seed=seed, collector=collector)

    energy = [
        EnergyRecord(fast_step=f, slow_step=s, layer=l, token_id=tok, energy=e)
        for (f, s, l, tok, e) in collector.energy_records
    ]
    for rec in energy:
        if not np.isfinite(rec.energy):
            raise NumericError(f"non-finite energy at fast step {rec.fast_step}")
    per_layer = {}
    for rec in energy:
        last = per_layer.get(rec.layer)
        if last is not None and rec.fast_step <= last:
            raise NumericError("fast_step must increase strictly within a layer")
        per_layer[rec.layer] = rec.fast_step

    latents = []
    for (slow, layer, vec) in collector.latent_records:
        tok = int(tokens[slow])
        latents.append(
            LatentRecord(
                slow_step=slow,
                layer=layer,
                depth=depths[slow],
                token_type=tok % 30,
                open_close="o" if is_opener(tok) else "c",
                vector=vec,
            )
        )
    return DiagnosticsTrace(energy=energy, latents=latents, logits=logits.data.copy())


def export_trace(trace: DiagnosticsTrace, energy_path, latent1_path, latent2_path):
    """Write the energy CSV and one latent CSV per layer (widths differ)."""
    with open(energy_path, "w", encoding="utf-8") as fh:
        fh.write("fast_step,slow_step,layer,token_id,energy\n")
        for r in trace.energy:
            fh.write(f"{r.fast_step},{r.slow_step},{r.layer},{r.token_id},{r.energy!r}\n")
    for layer, path in ((1, latent1_path), (2, latent2_path)):
        rows = [r for r in trace.latents if r.layer == layer]
        if not rows:
            continue
        width = rows[0].vector.shape[0]
        header = "slow_step,layer,depth,token_type,open_close," + ",".join(
            f"c{i}" for i in range(width)
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for r in rows:
                vec = ",".join(repr(float(v)) for v in r.vector)
                fh.write(f"{r.slow_step},{r.layer},{r.depth},{r.token_type},{r.open_close},{vec}\n")
