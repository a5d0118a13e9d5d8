"""Count-based language models: MLE n-grams (orders 1-3) and the
Jelinek-Mercer interpolated bigram with context-frequency bucketed weights.

Token streams are id sequences in which every document starts with a
``<s>`` id; n-gram windows never reach across a ``<s>``. ``<s>`` is never a
predicted token, so it is excluded from the unigram table.
"""
from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import perplexity
from .subword import BOS_ID

DEFAULT_BUCKETS = (1, 10, 100)
Q_MODES = ("context", "pair")


class UnseenContextError(KeyError):
    pass


def split_documents(ids: Sequence[int], bos_id: int | None = BOS_ID) -> list[list[int]]:
    """Cut a stream before every ``bos_id``."""
    ids = [int(t) for t in ids]
    if bos_id is None:
        return [ids] if ids else []
    docs: list[list[int]] = []
    cur: list[int] = []
    for t in ids:
        if t == bos_id and cur:
            docs.append(cur)
            cur = []
        cur.append(t)
    if cur:
        docs.append(cur)
    return docs


@dataclass
class NgramCounts:
    order: int
    tables: dict[int, Counter] = field(default_factory=dict)
    marginals: Counter = field(default_factory=Counter)
    bos_id: int | None = BOS_ID

    @property
    def total(self) -> int:
        return self.marginals[()]

    def count(self, ngram: tuple[int, ...]) -> int:
        return self.tables[len(ngram)].get(ngram, 0)

    def context_count(self, context: tuple[int, ...]) -> int:
        return self.marginals.get(context, 0)

    def vocabulary(self) -> set[int]:
        return {k[0] for k in self.tables[1]}

    def _rebuild_marginals(self) -> None:
        self.marginals = Counter()
        for k, table in self.tables.items():
            for gram, c in table.items():
                self.marginals[gram[:-1]] += c

    # -- TSV ---------------------------------------------------------------

    def to_tsv(self, header: dict[str, str] | None = None) -> str:
        lines = [f"#order\t{self.order}", f"#bos_id\t{'' if self.bos_id is None else self.bos_id}"]
        for key in sorted(header or {}):
            lines.append(f"#{key}\t{header[key]}")
        for k in sorted(self.tables):
            for gram in sorted(self.tables[k]):
                lines.append(f"{k}\t{' '.join(map(str, gram))}\t{self.tables[k][gram]}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path, header: dict[str, str] | None = None) -> None:
        Path(path).write_text(self.to_tsv(header), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NgramCounts":
        meta: dict[str, str] = {}
        tables: dict[int, Counter] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if line.startswith("#"):
                    key, _, value = line[1:].partition("\t")
                    meta[key] = value
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected k<TAB>tokens<TAB>count")
                k = int(parts[0])
                gram = tuple(int(t) for t in parts[1].split())
                if len(gram) != k:
                    raise ValueError(f"{path}:{lineno}: {k}-gram has {len(gram)} tokens")
                tables.setdefault(k, Counter())[gram] = int(parts[2])
        order = int(meta.get("order", max(tables, default=1)))
        for k in range(1, order + 1):
            tables.setdefault(k, Counter())
        bos = meta.get("bos_id", "")
        out = cls(order, tables, bos_id=int(bos) if bos else None)
        out._rebuild_marginals()
        return out


def count_ngrams(ids: Sequence[int], order: int, bos_id: int | None = BOS_ID) -> NgramCounts:
    """Sliding-window counts for every k <= order, never crossing documents."""
    if not 1 <= order <= 3:
        raise ValueError(f"order must be 1, 2 or 3, got {order}")
    tables = {k: Counter() for k in range(1, order + 1)}
    for doc in split_documents(ids, bos_id):
        tables[1].update((t,) for t in doc if t != bos_id)
        for k in range(2, order + 1):
            tables[k].update(zip(*(doc[i:] for i in range(k))))
    out = NgramCounts(order, tables, bos_id=bos_id)
    out._rebuild_marginals()
    return out


def mle_prob(counts: NgramCounts, context: tuple[int, ...], w: int) -> float:
    """``count(context + w) / count(context, *)``; raises if the context is unseen."""
    context = tuple(context)
    if len(context) + 1 > counts.order:
        raise ValueError(f"context of length {len(context)} needs order >= {len(context) + 1}")
    denom = counts.context_count(context)
    if denom == 0:
        raise UnseenContextError(context)
    return counts.count(context + (w,)) / denom


@dataclass
class InterpolationWeights:
    """Per-bucket simplex weights (uniform, unigram, bigram).

    Bucket ``b`` covers context frequencies ``bucket_lo[b] <= q < bucket_lo[b+1]``.
    """

    bucket_lo: tuple[float, ...]
    alphas: np.ndarray
    q_mode: str = "context"

    def __post_init__(self):
        self.bucket_lo = tuple(float(x) for x in self.bucket_lo)
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(len(self.bucket_lo), 3)
        if self.q_mode not in Q_MODES:
            raise ValueError(f"q_mode must be one of {Q_MODES}")
        if list(self.bucket_lo) != sorted(self.bucket_lo) or self.bucket_lo[0] != 0.0:
            raise ValueError("bucket_lo must be increasing and start at 0")
        if (self.alphas < 0).any() or np.abs(self.alphas.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("every bucket's weights must be non-negative and sum to 1")

    @classmethod
    def from_boundaries(cls, alphas, boundaries=DEFAULT_BUCKETS, q_mode="context"):
        return cls((0.0,) + tuple(boundaries), alphas, q_mode)

    @classmethod
    def single(cls, alpha, q_mode="context"):
        return cls((0.0,), np.asarray(alpha, dtype=np.float64)[None, :], q_mode)

    def bucket(self, q: float) -> int:
        return bisect.bisect_right(self.bucket_lo, q) - 1

    def to_tsv(self, header: dict[str, str] | None = None) -> str:
        lines = [f"#q_mode\t{self.q_mode}"]
        for key in sorted(header or {}):
            lines.append(f"#{key}\t{header[key]}")
        lines.append("bucket_lo\talpha0\talpha1\talpha2")
        for lo, a in zip(self.bucket_lo, self.alphas):
            lines.append("\t".join([repr(lo)] + [repr(float(x)) for x in a]))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path, header: dict[str, str] | None = None) -> None:
        Path(path).write_text(self.to_tsv(header), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InterpolationWeights":
        q_mode = "context"
        los, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    key, _, value = line[1:].partition("\t")
                    if key == "q_mode":
                        q_mode = value
                    continue
                if not line or line.startswith("bucket_lo"):
                    continue
                lo, *a = line.split("\t")
                los.append(float(lo))
                rows.append([float(x) for x in a])
        return cls(tuple(los), np.array(rows), q_mode)


def _effective_alpha(alpha: np.ndarray, context_seen: bool) -> np.ndarray:
    # an unseen context has no bigram distribution: its weight moves to the
    # other two components in proportion, or entirely to uniform if both are 0
    if context_seen:
        return alpha
    rest = alpha[0] + alpha[1]
    if rest <= 0.0:
        return np.array([1.0, 0.0, 0.0])
    return np.array([alpha[0] / rest, alpha[1] / rest, 0.0])


def _q(counts: NgramCounts, q_mode: str, w_prev: int, w_prev2: int | None) -> int:
    if q_mode == "pair":
        if w_prev2 is None:
            return 0
        return counts.count((w_prev2, w_prev))
    return counts.context_count((w_prev,))


def interpolated_prob(
    counts: NgramCounts,
    weights: InterpolationWeights,
    w_prev: int,
    w: int,
    vocab_size: int,
    w_prev2: int | None = None,
) -> float:
    """``a0 / |V| + a1 * p_unigram(w) + a2 * p_bigram(w | w_prev)``.

    The weights come from the bucket of the context frequency ``q``: the
    number of bigram events with history ``w_prev`` (``q_mode="context"``)
    or the count of the pair ``(w_prev2, w_prev)`` (``q_mode="pair"``).
    """
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    q = _q(counts, weights.q_mode, w_prev, w_prev2)
    ctx = counts.context_count((w_prev,))
    alpha = _effective_alpha(weights.alphas[weights.bucket(q)], ctx > 0)
    p1 = counts.count((w,)) / counts.total if counts.total else 0.0
    p2 = counts.count((w_prev, w)) / ctx if ctx else 0.0
    return alpha[0] / vocab_size + alpha[1] * p1 + alpha[2] * p2


def distribution(
    counts: NgramCounts, weights: InterpolationWeights, w_prev: int, vocab_size: int,
    w_prev2: int | None = None,
) -> np.ndarray:
    """``interpolated_prob`` for every ``w`` in ``range(vocab_size)``."""
    p1 = np.zeros(vocab_size)
    for (t,), c in counts.tables[1].items():
        if t < vocab_size:
            p1[t] = c
    if counts.total:
        p1 /= counts.total
    p2 = np.zeros(vocab_size)
    ctx = counts.context_count((w_prev,))
    if ctx:
        for (a, b), c in counts.tables[2].items():
            if a == w_prev and b < vocab_size:
                p2[b] = c / ctx
    q = _q(counts, weights.q_mode, w_prev, w_prev2)
    alpha = _effective_alpha(weights.alphas[weights.bucket(q)], ctx > 0)
    return alpha[0] / vocab_size + alpha[1] * p1 + alpha[2] * p2


@dataclass
class _Events:
    q: np.ndarray
    seen: np.ndarray
    comp: np.ndarray  # (n, 3) component probabilities


def _events(counts: NgramCounts, ids: Sequence[int], vocab_size: int, q_mode: str) -> _Events:
    qs, seen, comp = [], [], []
    total = counts.total
    uni = counts.tables[1]
    bi = counts.tables.get(2, {})
    for doc in split_documents(ids, counts.bos_id):
        for t in range(1, len(doc)):
            w_prev, w = doc[t - 1], doc[t]
            w_prev2 = doc[t - 2] if t >= 2 else None
            ctx = counts.context_count((w_prev,))
            qs.append(_q(counts, q_mode, w_prev, w_prev2))
            seen.append(ctx > 0)
            comp.append((
                1.0 / vocab_size,
                uni.get((w,), 0) / total if total else 0.0,
                bi.get((w_prev, w), 0) / ctx if ctx else 0.0,
            ))
    return _Events(
        np.asarray(qs, dtype=np.float64),
        np.asarray(seen, dtype=bool),
        np.asarray(comp, dtype=np.float64).reshape(-1, 3),
    )


def _mixture(alpha: np.ndarray, ev_comp: np.ndarray, ev_seen: np.ndarray) -> np.ndarray:
    """Per-event effective weights (n, 3) after unseen-context renormalization."""
    eff = np.broadcast_to(alpha, ev_comp.shape).copy()
    unseen = ~ev_seen
    if unseen.any():
        eff[unseen] = _effective_alpha(alpha, False)
    return eff


def _fit_bucket(comp, seen, max_iter, tol, trace):
    # Events with an unseen context use (a0, a1) / (a0 + a1), so the usual
    # mixture M-step is replaced by the exact maximizer of the EM lower
    # bound: a2 comes from seen-context responsibilities only and a0, a1
    # share the remainder in proportion to their total responsibilities.
    # Each iteration therefore still never lowers the likelihood.
    alpha = np.full(3, 1.0 / 3.0)
    if not seen.any():
        alpha = np.array([0.5, 0.5, 0.0])
    n_seen = int(seen.sum())
    prev = -math.inf
    for _ in range(max_iter):
        num = _mixture(alpha, comp, seen) * comp
        den = num.sum(axis=1)
        ll = float(np.log(den).sum())
        if trace is not None:
            trace.append(ll)
        resp = num / den[:, None]
        a2 = float(resp[seen, 2].sum()) / n_seen if n_seen else 0.0
        n01 = resp[:, :2].sum(axis=0)
        if n01.sum() > 0:
            a01 = (1.0 - a2) * n01 / n01.sum()
        else:
            a01 = np.zeros(2)
            a2 = 1.0
        alpha = np.array([a01[0], a01[1], a2])
        alpha /= alpha.sum()
        if ll - prev <= tol * abs(ll):
            break
        prev = ll
    return alpha


def fit_weights(
    counts: NgramCounts,
    heldout: Sequence[int],
    vocab_size: int,
    buckets: Sequence[float] = DEFAULT_BUCKETS,
    q_mode: str = "context",
    max_iter: int = 500,
    tol: float = 1e-12,
    history: dict[int, list[float]] | None = None,
) -> InterpolationWeights:
    """Deleted-interpolation EM on held-out events, one weight triple per bucket.

    Buckets without held-out events get the weights fitted on all events.
    ``history`` (bucket index → log-likelihood per iteration, ``-1`` for the
    global fit) is filled when given.
    """
    ev = _events(counts, heldout, vocab_size, q_mode)
    if ev.q.size == 0:
        raise ValueError("held-out stream has no predicted events")
    lo = (0.0,) + tuple(float(b) for b in buckets)
    w_template = InterpolationWeights(lo, np.tile([1.0, 0.0, 0.0], (len(lo), 1)), q_mode)
    assign = np.array([w_template.bucket(q) for q in ev.q.tolist()], dtype=np.int64)
    trace = None if history is None else history.setdefault(-1, [])
    global_alpha = _fit_bucket(ev.comp, ev.seen, max_iter, tol, trace)
    alphas = np.tile(global_alpha, (len(lo), 1))
    for b in range(len(lo)):
        mask = assign == b
        if not mask.any():
            continue
        trace = None if history is None else history.setdefault(b, [])
        alphas[b] = _fit_bucket(ev.comp[mask], ev.seen[mask], max_iter, tol, trace)
    return InterpolationWeights(lo, alphas, q_mode)


def log_probs(
    counts: NgramCounts, weights: InterpolationWeights, ids: Sequence[int], vocab_size: int
) -> np.ndarray:
    """Natural-log interpolated probability of every predicted position."""
    ev = _events(counts, ids, vocab_size, weights.q_mode)
    if ev.q.size == 0:
        return np.zeros(0)
    assign = np.array([weights.bucket(q) for q in ev.q.tolist()], dtype=np.int64)
    eff = np.empty_like(ev.comp)
    for b in np.unique(assign):
        mask = assign == b
        eff[mask] = _mixture(weights.alphas[b], ev.comp[mask], ev.seen[mask])
    p = (eff * ev.comp).sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.log(p)


def ngram_perplexity(
    counts: NgramCounts, weights: InterpolationWeights, test: Sequence[int], vocab_size: int
) -> float:
    """Interpolated-bigram perplexity; ``inf`` if any event has probability 0."""
    return perplexity(log_probs(counts, weights, test, vocab_size))
