from __future__ import annotations

import math

import numpy as np


def perplexity_from_nll(nll_sum: float, n_tokens: int) -> float:
    """``exp(nll_sum / n_tokens)``; infinite NLL gives infinite perplexity."""
    if n_tokens <= 0:
        raise ValueError("perplexity needs at least one predicted token")
    if not math.isfinite(nll_sum):
        return math.inf
    try:
        return math.exp(nll_sum / n_tokens)
    except OverflowError:
        return math.inf


def perplexity(log_probs) -> float:
    """Perplexity of a sequence of natural-log event probabilities."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("perplexity needs at least one predicted token")
    if np.isneginf(lp).any():
        return math.inf
    return perplexity_from_nll(-math.fsum(lp.tolist()), lp.size)
