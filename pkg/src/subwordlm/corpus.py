"""Corpus ingestion, Table-1 style statistics and held-out splits."""
from __future__ import annotations

import csv
import io
import json
import math
import random
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class CorpusError(ValueError):
    """Raised for malformed or empty corpus input."""


def normalize_text(text: str) -> str:
    """NFC-normalize and collapse every whitespace run to a single space."""
    return " ".join(unicodedata.normalize("NFC", text).split())


@dataclass(frozen=True)
class Document:
    id: int
    category: str
    text: str

    def __post_init__(self):
        if not self.category:
            raise CorpusError(f"document {self.id}: empty category")
        if not self.text:
            raise CorpusError(f"document {self.id}: empty text")


@dataclass(frozen=True)
class CategoryStats:
    category: str
    samples: int
    total_words: int
    unique_words: int


@dataclass
class Corpus:
    documents: list[Document]
    stats: list[CategoryStats] | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [d.id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise CorpusError("document ids are not unique")

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def texts(self) -> list[str]:
        return [d.text for d in self.documents]

    @classmethod
    def from_texts(cls, texts: Iterable[str], category: str = "default") -> "Corpus":
        docs = []
        for text in texts:
            text = normalize_text(text)
            if text:
                docs.append(Document(len(docs), category, text))
        return cls(docs)


def _read_jsonl(path: Path) -> list[Document]:
    docs: list[Document] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            category, text = obj.get("category"), obj.get("text")
            if not isinstance(category, str) or not isinstance(text, str):
                raise CorpusError(
                    f"{path}:{lineno}: 'category' and 'text' must both be strings"
                )
            text = normalize_text(text)
            category = category.strip()
            if text and category:
                docs.append(Document(len(docs), category, text))
    return docs


def _read_directory(path: Path) -> list[Document]:
    docs: list[Document] = []
    for sub in sorted(p for p in path.iterdir() if p.is_dir()):
        for file in sorted(p for p in sub.rglob("*") if p.is_file()):
            text = normalize_text(file.read_text(encoding="utf-8"))
            if text:
                docs.append(Document(len(docs), sub.name, text))
    return docs


def ingest_corpus(path: str | Path, format: str = "jsonl") -> Corpus:
    """Load a categorized corpus.

    ``format="jsonl"`` expects one ``{"category": ..., "text": ...}`` object
    per line; ``format="directory"`` treats each subdirectory name as the
    category and every file below it as one document. Documents whose text
    is empty after normalization are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus path does not exist: {path}")
    if format == "jsonl":
        docs = _read_jsonl(path)
    elif format in ("directory", "directory-of-text"):
        if not path.is_dir():
            raise CorpusError(f"{path}: not a directory")
        docs = _read_directory(path)
    else:
        raise CorpusError(f"unknown corpus format {format!r}")
    if not docs:
        raise CorpusError(f"{path}: zero usable documents")
    return Corpus(docs)


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in corpus:
            fh.write(json.dumps({"category": doc.category, "text": doc.text}, ensure_ascii=False))
            fh.write("\n")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def corpus_stats(corpus: Corpus) -> list[CategoryStats]:
    """Per-category counts followed by an ``average`` and a ``total`` row.

    Words are maximal non-whitespace runs. The total row's ``unique_words``
    counts distinct words corpus-wide; the average row is the rounded mean
    of the per-category rows.
    """
    if len(corpus) == 0:
        raise CorpusError("cannot compute statistics of an empty corpus")
    samples: Counter[str] = Counter()
    totals: Counter[str] = Counter()
    vocab: dict[str, set[str]] = {}
    everything: set[str] = set()
    for doc in corpus:
        words = doc.text.split()
        samples[doc.category] += 1
        totals[doc.category] += len(words)
        vocab.setdefault(doc.category, set()).update(words)
        everything.update(words)
    rows = [
        CategoryStats(cat, samples[cat], totals[cat], len(vocab[cat]))
        for cat in vocab  # first-appearance order
    ]
    n = len(rows)
    average = CategoryStats(
        "average",
        _round_half_up(sum(r.samples for r in rows) / n),
        _round_half_up(sum(r.total_words for r in rows) / n),
        _round_half_up(sum(r.unique_words for r in rows) / n),
    )
    total = CategoryStats(
        "total",
        sum(r.samples for r in rows),
        sum(r.total_words for r in rows),
        len(everything),
    )
    corpus.stats = rows + [average, total]
    return corpus.stats


def stats_to_csv(rows: list[CategoryStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "samples", "total_words", "unique_words"])
    for r in rows:
        writer.writerow([r.category, r.samples, r.total_words, r.unique_words])
    return buf.getvalue()


def _n_holdout(fraction: float, n: int) -> int:
    # round() guards against 0.2 * 100 style representation error before ceil
    return min(n, math.ceil(round(fraction * n, 9)))


def split_holdout(
    corpus: Corpus, fraction: float, seed: int, stratify: bool = False
) -> tuple[Corpus, Corpus]:
    """Deterministically hold out ``ceil(fraction * N)`` documents.

    Both halves keep the original document order. With ``stratify`` the
    ceiling is taken per category instead.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    rng = random.Random(seed)
    if stratify:
        test_ids: set[int] = set()
        by_cat: dict[str, list[int]] = {}
        for doc in corpus:
            by_cat.setdefault(doc.category, []).append(doc.id)
        for cat in sorted(by_cat):
            ids = by_cat[cat]
            rng.shuffle(ids)
            test_ids.update(ids[: _n_holdout(fraction, len(ids))])
    else:
        ids = [d.id for d in corpus]
        rng.shuffle(ids)
        test_ids = set(ids[: _n_holdout(fraction, len(ids))])
    train = [d for d in corpus if d.id not in test_ids]
    test = [d for d in corpus if d.id in test_ids]
    return Corpus(train), Corpus(test)
