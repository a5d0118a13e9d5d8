"""Pure-Python lattice kernels (reference and fallback for ``_lattice_ext``).

A batch of lattices is stored flat: edge ``e`` spans characters
``starts[e]:ends[e]`` of its unit and carries ``pieces[e]``. Unit ``u`` owns
edges ``ptr[u]:ptr[u+1]``, sorted by ``(end, start)``; ``lengths[u]`` is the
unit's character count and ``weights[u]`` its corpus frequency.
"""
from __future__ import annotations

import math

import numpy as np

NEG_INF = -math.inf


def _logaddexp(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def expected_counts(starts, ends, pieces, ptr, lengths, weights, logp, counts) -> float:
    """Forward-backward over every unit; adds expected piece counts to ``counts``.

    Returns the weighted corpus log-likelihood (``-inf`` if some unit has no
    segmentation under ``logp``).
    """
    starts = starts.tolist()
    ends = ends.tolist()
    pieces = pieces.tolist()
    ptr = ptr.tolist()
    lengths = lengths.tolist()
    weights = weights.tolist()
    lp = logp.tolist()
    acc = [0.0] * len(lp)
    total = 0.0
    for u in range(len(lengths)):
        n = lengths[u]
        lo, hi = ptr[u], ptr[u + 1]
        alpha = [NEG_INF] * (n + 1)
        beta = [NEG_INF] * (n + 1)
        alpha[0] = 0.0
        beta[n] = 0.0
        for e in range(lo, hi):
            s = lp[pieces[e]]
            if s == NEG_INF or alpha[starts[e]] == NEG_INF:
                continue
            alpha[ends[e]] = _logaddexp(alpha[ends[e]], alpha[starts[e]] + s)
        z = alpha[n]
        if z == NEG_INF:
            return NEG_INF
        for e in range(hi - 1, lo - 1, -1):
            s = lp[pieces[e]]
            if s == NEG_INF or beta[ends[e]] == NEG_INF:
                continue
            beta[starts[e]] = _logaddexp(beta[starts[e]], s + beta[ends[e]])
        w = weights[u]
        for e in range(lo, hi):
            s = lp[pieces[e]]
            if s == NEG_INF:
                continue
            a = alpha[starts[e]]
            b = beta[ends[e]]
            if a == NEG_INF or b == NEG_INF:
                continue
            acc[pieces[e]] += w * math.exp(a + s + b - z)
        total += w * z
    counts += np.asarray(acc, dtype=np.float64)
    return total


def _best_path(lo, hi, n, starts, ends, pieces, lp, disabled):
    best = [NEG_INF] * (n + 1)
    back = [-1] * (n + 1)
    best[0] = 0.0
    for e in range(lo, hi):
        p = pieces[e]
        s = lp[p]
        if p == disabled or s == NEG_INF:
            continue
        a = best[starts[e]]
        if a == NEG_INF:
            continue
        cand = a + s
        if cand > best[ends[e]]:
            best[ends[e]] = cand
            back[ends[e]] = e
    return best[n], back


def viterbi_counts(starts, ends, pieces, ptr, lengths, weights, logp, counts) -> float:
    """Adds ``weight`` to every piece on each unit's best path; returns the weighted score."""
    starts = starts.tolist()
    ends = ends.tolist()
    pieces = pieces.tolist()
    ptr = ptr.tolist()
    lengths = lengths.tolist()
    weights = weights.tolist()
    lp = logp.tolist()
    acc = [0.0] * len(lp)
    total = 0.0
    for u in range(len(lengths)):
        n = lengths[u]
        score, back = _best_path(ptr[u], ptr[u + 1], n, starts, ends, pieces, lp, -1)
        if score == NEG_INF:
            return NEG_INF
        w = weights[u]
        total += w * score
        pos = n
        while pos > 0:
            e = back[pos]
            acc[pieces[e]] += w
            pos = starts[e]
    counts += np.asarray(acc, dtype=np.float64)
    return total


def viterbi_paths(starts, ends, pieces, ptr, lengths, logp, disabled):
    """Best path per unit, optionally forbidding one piece per unit.

    Returns ``(path_pieces, path_ptr, scores)``; a unit without any path gets
    score ``-inf`` and an empty path.
    """
    starts = starts.tolist()
    ends = ends.tolist()
    pieces = pieces.tolist()
    ptr = ptr.tolist()
    lengths = lengths.tolist()
    disabled = disabled.tolist()
    lp = logp.tolist()
    out: list[int] = []
    out_ptr = [0]
    scores = []
    for u in range(len(lengths)):
        n = lengths[u]
        score, back = _best_path(ptr[u], ptr[u + 1], n, starts, ends, pieces, lp, disabled[u])
        scores.append(score)
        if score != NEG_INF:
            path = []
            pos = n
            while pos > 0:
                e = back[pos]
                path.append(pieces[e])
                pos = starts[e]
            out.extend(reversed(path))
        out_ptr.append(len(out))
    return (
        np.asarray(out, dtype=np.int32),
        np.asarray(out_ptr, dtype=np.int64),
        np.asarray(scores, dtype=np.float64),
    )
