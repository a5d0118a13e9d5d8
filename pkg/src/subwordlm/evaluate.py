"""Held-out perplexity, text generation and model comparison tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax

from . import neural, ngram
from .corpus import Corpus
from .metrics import perplexity_from_nll
from .neural import NeuralLM, NeuralLMConfig, Params
from .subword import BOS_ID, EOS_ID, SubwordVocab, encode_corpus

GRANULARITIES = ("subword", "word", "bigram-subword", "bigram-word")
REPORT_FIELDS = ("model", "granularity", "perplexity", "tokens", "seed", "config_hash")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    model: str
    granularity: str
    perplexity: float
    tokens: int
    seed: int | None = None
    config_hash: str = ""

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not self.perplexity >= 1.0:
            raise ValueError(f"perplexity {self.perplexity} < 1")

    @property
    def unit(self) -> str:
        return self.granularity.rsplit("-", 1)[-1]

    def row(self) -> list:
        return [self.model, self.granularity, repr(self.perplexity), self.tokens,
                "" if self.seed is None else self.seed, self.config_hash]


def write_reports_csv(reports: Sequence[EvalReport], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------
# perplexity


def _stream_ids(data, vocab: SubwordVocab) -> np.ndarray:
    if isinstance(data, Corpus):
        return encode_corpus(data, vocab)
    if isinstance(data, np.ndarray):
        return data.astype(np.int64)
    data = list(data)
    if data and isinstance(data[0], str):
        return encode_corpus(data, vocab)
    return np.asarray(data, dtype=np.int64)


def stream_nll(
    params: Params,
    config: NeuralLMConfig,
    ids: np.ndarray,
    batch_size: int = 10,
    bptt_len: int = 70,
    ignore_id: int | None = BOS_ID,
) -> tuple[float, int]:
    """Summed NLL of every next-token prediction in ``ids`` (eval mode).

    The stream is cut into ``batch_size`` lanes that overlap by one token so
    each target is scored exactly once; state is carried across windows.
    Targets equal to ``ignore_id`` are skipped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n_targets = ids.size - 1
    if n_targets < 1:
        raise EvalError("need at least two tokens to score")
    B = max(1, min(batch_size, n_targets))
    L = -(-n_targets // B)
    X = np.zeros((B, L), dtype=np.int64)
    Y = np.full((B, L), -1, dtype=np.int64)
    for j in range(B):
        a, b = j * L, min((j + 1) * L, n_targets)
        if a >= b:
            continue
        X[j, : b - a] = ids[a:b]
        Y[j, : b - a] = ids[a + 1:b + 1]
    state = neural.zero_state(config, B)
    parts: list[float] = []
    count = 0
    for s in range(0, L, bptt_len):
        x, y = X[:, s:s + bptt_len], Y[:, s:s + bptt_len]
        logits, state, _ = neural.forward(params, config, x, state)
        valid = y >= 0
        if ignore_id is not None:
            valid &= y != ignore_id
        if not valid.any():
            continue
        rows = logits[valid]
        logp = log_softmax(rows, axis=1)
        parts.extend((-logp[np.arange(rows.shape[0]), y[valid]]).tolist())
        count += int(valid.sum())
    if count == 0:
        raise EvalError("no scorable positions")
    return math.fsum(parts), count


def _check_vocab(model: NeuralLM, vocab: SubwordVocab) -> None:
    if model.config.vocab_size != len(vocab):
        raise EvalError(f"model vocab_size {model.config.vocab_size} != vocabulary size {len(vocab)}")
    fp = model.meta.get("vocab_fingerprint")
    if fp and fp != vocab.fingerprint():
        raise EvalError(f"vocabulary fingerprint {vocab.fingerprint()} does not match checkpoint ({fp})")


def neural_perplexity(
    model: NeuralLM,
    vocab: SubwordVocab,
    test,
    name: str = "neural",
    batch_size: int = 10,
) -> EvalReport:
    """Perplexity of ``test`` (a corpus, list of texts, or id stream)."""
    _check_vocab(model, vocab)
    ids = _stream_ids(test, vocab)
    nll, n = stream_nll(model.params, model.config, ids, batch_size, model.config.bptt_len)
    return EvalReport(
        name, vocab.mode, perplexity_from_nll(nll, n), n,
        model.meta.get("seed"), model.meta.get("config_hash", ""),
    )


def ngram_report(
    counts: ngram.NgramCounts,
    weights: ngram.InterpolationWeights,
    vocab: SubwordVocab,
    test,
    name: str = "interpolated-bigram",
    seed: int | None = None,
    config_hash: str = "",
) -> EvalReport:
    ids = _stream_ids(test, vocab)
    lp = ngram.log_probs(counts, weights, ids, len(vocab))
    if lp.size == 0:
        raise EvalError("no scorable positions")
    nll = -math.fsum(lp.tolist())
    return EvalReport(name, f"bigram-{vocab.mode}", perplexity_from_nll(nll, lp.size), int(lp.size), seed, config_hash)


# --------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenerationConfig:
    prompt: str = ""
    max_tokens: int = 100
    strategy: str = "sample"  # greedy | sample
    temperature: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.strategy not in ("greedy", "sample"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


def generate_ids(model: NeuralLM, vocab: SubwordVocab, gen: GenerationConfig) -> tuple[list[int], list[int]]:
    """Returns ``(prompt_ids, continuation_ids)``; a final ``</s>`` ends and is kept."""
    _check_vocab(model, vocab)
    prompt = [BOS_ID] + vocab.encode(gen.prompt)
    rng = np.random.default_rng(gen.seed)
    state = neural.zero_state(model.config, 1)
    logits, state, _ = neural.forward(model.params, model.config, np.asarray([prompt]), state)
    last = logits[0, -1]
    out: list[int] = []
    for _ in range(gen.max_tokens):
        z = last.copy()
        z[BOS_ID] = -np.inf
        if gen.strategy == "greedy":
            tok = int(np.argmax(z))
        else:
            p = np.exp(log_softmax(z / gen.temperature))
            tok = int(rng.choice(p.size, p=p / p.sum()))
        out.append(tok)
        if tok == EOS_ID:
            break
        logits, state, _ = neural.forward(model.params, model.config, np.asarray([[tok]]), state)
        last = logits[0, -1]
    return prompt, out


def generate(model: NeuralLM, vocab: SubwordVocab, gen: GenerationConfig) -> str:
    """Prompt plus continuation, decoded."""
    prompt, out = generate_ids(model, vocab, gen)
    return vocab.decode(prompt + out)


# --------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonTable:
    reports: list[EvalReport]
    footnote: str | None

    def to_csv(self) -> str:
        return write_reports_csv(self.reports)

    def to_text(self) -> str:
        header = ("Model", "Perplexity on Test Set")
        rows = [(f"{r.model} [{r.granularity}]", f"{r.perplexity:.2f}") for r in self.reports]
        w0 = max(len(header[0]), *(len(r[0]) for r in rows))
        w1 = max(len(header[1]), *(len(r[1]) for r in rows))
        lines = [f"{header[0]:<{w0}}  {header[1]:>{w1}}", f"{'-' * w0}  {'-' * w1}"]
        lines += [f"{a:<{w0}}  {b:>{w1}}" for a, b in rows]
        if self.footnote:
            lines += ["", self.footnote]
        return "\n".join(lines) + "\n"


def compare_models(reports: Iterable[EvalReport]) -> ComparisonTable:
    reports = sorted(reports, key=lambda r: (r.perplexity, r.model))
    if not reports:
        raise ValueError("need at least one report")
    units = sorted({r.unit for r in reports})
    footnote = None
    if len(units) > 1:
        footnote = (
            "* Token granularities differ (" + ", ".join(units) + "): perplexity is per token, "
            "so values over different units are not directly comparable."
        )
    return ComparisonTable(reports, footnote)
