"""Brute-force reference implementations used by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


def segmentations(s: str):
    """Every split of ``s`` into contiguous non-empty pieces (2**(n-1) of them)."""
    n = len(s)
    for cuts in itertools.product((0, 1), repeat=max(n - 1, 0)):
        out, start = [], 0
        for i, c in enumerate(cuts, 1):
            if c:
                out.append(s[start:i])
                start = i
        out.append(s[start:])
        yield out


def best_score(s: str, logp: dict[str, float]) -> float:
    best = -math.inf
    for seg in segmentations(s):
        if all(p in logp for p in seg):
            total = 0.0
            for p in seg:
                total = total + logp[p]
            best = max(best, total)
    return best


def expected_counts(units: dict[str, float], logp: dict[str, float]):
    """Posterior piece counts and log-likelihood by explicit enumeration."""
    counts = {p: 0.0 for p in logp}
    ll = 0.0
    for s, w in units.items():
        paths = [seg for seg in segmentations(s) if all(p in logp for p in seg)]
        scores = np.array([sum(logp[p] for p in seg) for seg in paths])
        m = scores.max()
        z = m + math.log(np.exp(scores - m).sum())
        ll += w * z
        for seg, sc in zip(paths, scores):
            post = math.exp(sc - z)
            for p in seg:
                counts[p] += w * post
    return ll, counts


def em(units: dict[str, float], logp: dict[str, float], iterations: int):
    for _ in range(iterations):
        _, counts = expected_counts(units, logp)
        total = sum(counts.values())
        logp = {p: math.log(c / total) for p, c in counts.items() if c > 0}
    return logp


def lstm_cell_scalar(x, h, c, W, U, b):
    """Gate-by-gate, unit-by-unit LSTM step with python floats."""
    d = len(h)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def pre(gate, k):
        r = gate * d + k
        acc = b[r]
        for j in range(len(x)):
            acc += W[r][j] * x[j]
        for j in range(d):
            acc += U[r][j] * h[j]
        return acc

    h_new, c_new = [], []
    for k in range(d):
        i = sig(pre(0, k))
        f = sig(pre(1, k))
        o = sig(pre(2, k))
        g = math.tanh(pre(3, k))
        ck = i * g + f * c[k]
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return h_new, c_new
