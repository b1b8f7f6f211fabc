"""Independent oracles used by the test suite.

These deliberately avoid the library's own code paths: the stack simulator
follows the prompt-style UPDATE STACK / SET OUTPUT CHARACTER recipe over
characters, the matmul oracle is a triple loop, the cross-entropy oracle is a
direct log-sum-exp, and the PCA oracle is power iteration with deflation.
"""

import math

import numpy as np

OPEN = "([{<" + "".join(chr(ord("A") + i) for i in range(26))
CLOSE = ")]}>" + "".join(chr(ord("a") + i) for i in range(26))
PAIR = dict(zip(OPEN, CLOSE))


def prompt_style_predict(chars: str) -> str:
    """Second stack simulator, written against the prompt recipe.

    For each character: push if opening, pop if closing (ignore pops on an
    empty stack); output the closer of the stack top, or '*' when empty.
    """
    stack = []
    out = []
    for c in chars:
        if c in OPEN:
            stack.append(c)
        elif c in CLOSE:
            if stack:
                stack.pop()
        if stack:
            out.append(PAIR[stack[-1]])
        else:
            out.append("*")
    return "".join(out)


def cross_entropy_oracle(logits, labels, mask):
    """Mean over unmasked positions of -(logit[label] - logsumexp(logits))."""
    logits = np.asarray(logits, dtype=np.float64)
    total, count = 0.0, 0
    flat = logits.reshape(-1, logits.shape[-1])
    lab = np.asarray(labels).reshape(-1)
    msk = np.asarray(mask).reshape(-1)
    for i in range(flat.shape[0]):
        if not msk[i]:
            continue
        row = flat[i]
        lse = math.log(sum(math.exp(v) for v in row - row.max())) + row.max()
        total += lse - row[lab[i]]
        count += 1
    return total / count


def power_iteration_eigs(cov, k, iters=5000, seed=0):
    """Top-k eigenvalues of a symmetric PSD matrix by deflation."""
    rng = np.random.default_rng(seed)
    a = np.asarray(cov, dtype=np.float64).copy()
    vals = []
    for _ in range(k):
        v = rng.standard_normal(a.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = a @ v
            nw = np.linalg.norm(w)
            if nw < 1e-300:
                break
            v = w / nw
        lam = float(v @ a @ v)
        vals.append(lam)
        a = a - lam * np.outer(v, v)
    return np.array(vals)
