"""Dyck-(k, m) data: alphabet, stack labeling, generators, dataset files.

Token ids: opener type ``i`` is id ``i``; its closer is id ``k + i``. Output
classes: closer type ``i`` is class ``i``; class ``k`` is the empty-stack
marker ``*``, which never appears in inputs. The default alphabet pairs
``( [ { <`` with ``) ] } >`` and ``A``-``Z`` with ``a``-``z``.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DatasetParseError, MalformedSequenceError

OPENER_CHARS = "([{<" + string.ascii_uppercase
CLOSER_CHARS = ")]}>" + string.ascii_lowercase
STAR_CHAR = "*"
K_TYPES = 30
VOCAB_IN = 2 * K_TYPES
VOCAB_OUT = K_TYPES + 1
STAR_CLASS = K_TYPES


def opener_id(type_idx: int) -> int:
    return type_idx


def closer_id(type_idx: int) -> int:
    return K_TYPES + type_idx


def is_opener(token: int) -> bool:
    return 0 <= token < K_TYPES


def token_to_char(token: int) -> str:
    if is_opener(token):
        return OPENER_CHARS[token]
    return CLOSER_CHARS[token - K_TYPES]


def char_to_token(ch: str) -> int:
    if ch in OPENER_CHARS:
        return OPENER_CHARS.index(ch)
    if ch in CLOSER_CHARS:
        return K_TYPES + CLOSER_CHARS.index(ch)
    raise ConfigError(f"character {ch!r} is not in the bracket alphabet")


def tokens_from_string(s: str) -> list[int]:
    return [char_to_token(ch) for ch in s]


def label_to_char(label: int) -> str:
    if label == STAR_CLASS:
        return STAR_CHAR
    return CLOSER_CHARS[label]


@dataclass
class DyckConfig:
    k: int = 30
    m: int = 5
    min_len: int = 10
    max_len: int = 40
    open_prob: float = 0.5
    seed: int = 0

    def validate(self):
        if self.k < 1 or self.k > K_TYPES:
            raise ConfigError(f"k must be in [1, {K_TYPES}], got {self.k}")
        if self.m < 1:
            raise ConfigError(f"max depth m must be >= 1, got {self.m}")
        if not (1 <= self.min_len <= self.max_len):
            raise ConfigError(
                f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}"
            )
        if not (0.0 < self.open_prob < 1.0):
            raise ConfigError(f"open_prob must be in (0, 1), got {self.open_prob}")
        return self


@dataclass
class DyckSample:
    tokens: list[int]
    labels: list[int]
    meta: dict

    def __len__(self):
        return len(self.tokens)


def target_labels(tokens) -> list[int]:
    """Stack-simulated labels: the closer of the current stack top, or star.

    After consuming the token at each position, the label is the class of the
    bracket that closes the most recent unclosed opener; star when the stack
    is empty. Closers must match the stack top.
    """
    stack: list[int] = []
    labels: list[int] = []
    for pos, tok in enumerate(tokens, start=1):
        tok = int(tok)
        if not (0 <= tok < VOCAB_IN):
            raise MalformedSequenceError(f"token id {tok} outside alphabet", pos)
        if is_opener(tok):
            stack.append(tok)
        else:
            want = tok - K_TYPES
            if not stack:
                raise MalformedSequenceError(
                    f"closer {token_to_char(tok)!r} on empty stack", pos
                )
            if stack[-1] != want:
                raise MalformedSequenceError(
                    f"closer {token_to_char(tok)!r} does not match open "
                    f"{token_to_char(stack[-1])!r}",
                    pos,
                )
            stack.pop()
        labels.append(stack[-1] if stack else STAR_CLASS)
    return labels


def sample_seed(base_seed: int, index: int) -> int:
    """Stable per-sample seed; disjoint streams allow parallel generation."""
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1)[0])


def generate_id_string(cfg: DyckConfig, rng: np.random.Generator, seed: int | None = None) -> DyckSample:
    """One random in-distribution string respecting the depth bound.

    Forced open at depth 0, forced close at depth m, otherwise opens with
    probability ``open_prob``. The string is truncated at the sampled length
    and may end with unclosed brackets.
    """
    cfg.validate()
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    stack: list[int] = []
    tokens: list[int] = []
    for _ in range(length):
        depth = len(stack)
        if depth == 0:
            open_now = True
        elif depth == cfg.m:
            open_now = False
        else:
            open_now = bool(rng.random() < cfg.open_prob)
        if open_now:
            t = int(rng.integers(0, cfg.k))
            stack.append(t)
            tokens.append(opener_id(t))
        else:
            tokens.append(closer_id(stack.pop()))
    return DyckSample(
        tokens=tokens,
        labels=target_labels(tokens),
        meta={"kind": "id", "n": None, "seed": seed if seed is not None else cfg.seed},
    )


def generate_id_dataset(cfg: DyckConfig, count: int) -> list[DyckSample]:
    samples = []
    for i in range(count):
        s = sample_seed(cfg.seed, i)
        rng = np.random.Generator(np.random.PCG64(s))
        samples.append(generate_id_string(cfg, rng, seed=s))
    return samples


def generate_regular_run(
    n: int,
    total_len: int,
    m: int,
    rng: np.random.Generator,
    k: int = K_TYPES,
    seed: int | None = None,
) -> DyckSample:
    """An n-regular run: random opener prefix, then repeated depth-n cycles.

    The prefix length is uniform in [1, m - n] so cycle peaks stay within the
    depth bound; each cycle opens n random brackets and closes them in stack
    order. The stream is truncated at ``total_len``.
    """
    if not (1 <= n <= m - 1):
        raise ConfigError(f"regular run requires 1 <= n <= m-1, got n={n}, m={m}")
    if total_len < 2:
        raise ConfigError(f"total_len must be >= 2, got {total_len}")
    prefix_len = int(rng.integers(1, m - n + 1))
    tokens = [opener_id(int(rng.integers(0, k))) for _ in range(prefix_len)]
    while len(tokens) < total_len:
        cycle = [int(rng.integers(0, k)) for _ in range(n)]
        for t in cycle:
            tokens.append(opener_id(t))
        for t in reversed(cycle):
            tokens.append(closer_id(t))
    tokens = tokens[:total_len]
    return DyckSample(
        tokens=tokens,
        labels=target_labels(tokens),
        meta={"kind": "regular", "n": n, "seed": seed if seed is not None else 0},
    )


def generate_regular_dataset(
    base_seed: int, count: int, n: int, total_len: int, m: int = 5, k: int = K_TYPES
) -> list[DyckSample]:
    samples = []
    for i in range(count):
        s = sample_seed(base_seed, i)
        rng = np.random.Generator(np.random.PCG64(s))
        samples.append(generate_regular_run(n, total_len, m, rng, k=k, seed=s))
    return samples


def stack_depths(tokens) -> list[int]:
    """Depth after consuming each token; used for trace annotations."""
    depth = 0
    out = []
    for tok in tokens:
        depth += 1 if is_opener(int(tok)) else -1
        out.append(depth)
    return out


# ---------------------------------------------------------------------------
# dataset files: one JSON object per line


def write_dataset(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {"tokens": list(map(int, s.tokens)),
                     "labels": list(map(int, s.labels)),
                     "meta": s.meta},
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def read_dataset(path) -> list[DyckSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                tokens = [int(t) for t in obj["tokens"]]
                labels = [int(l) for l in obj["labels"]]
                meta = obj["meta"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(f"malformed dataset line: {exc}", lineno) from exc
            if len(tokens) != len(labels):
                raise DatasetParseError(
                    f"{len(tokens)} tokens but {len(labels)} labels", lineno
                )
            samples.append(DyckSample(tokens=tokens, labels=labels, meta=meta))
    return samples
