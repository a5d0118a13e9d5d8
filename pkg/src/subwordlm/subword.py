"""Unigram-LM subword tokenizer: EM training over segmentation lattices,
Viterbi segmentation, and the whitespace word-level mode used by baselines.

Pieces never cross whitespace. Each word is prefixed with ``WORD_MARKER``
before segmentation, so the marker starts the first piece of every word and
``decode`` turns it back into a space.
"""
from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .corpus import Corpus

logger = logging.getLogger(__name__)

WORD_MARKER = "▁"
UNK_GLYPH = "⁇"
BOS, EOS, UNK = "<s>", "</s>", "<unk>"
SPECIALS = (BOS, EOS, UNK)
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2

IDS_MAGIC = b"SWLMIDS1"


class TokenizerError(ValueError):
    pass


@dataclass
class TokenizerConfig:
    target_vocab_size: int = 30000
    seed_vocab_size: int | None = None  # None -> 10 * target_vocab_size
    prune_fraction: float = 0.2
    max_piece_length: int = 16
    min_token_frequency: int = 3
    mode: str = "subword"
    em_max_iterations: int = 10
    em_tolerance: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("subword", "word"):
            raise TokenizerError(f"unknown tokenizer mode {self.mode!r}")
        if not 0.0 < self.prune_fraction < 1.0:
            raise TokenizerError("prune_fraction must be in (0, 1)")
        if self.max_piece_length < 1:
            raise TokenizerError("max_piece_length must be >= 1")
        if self.target_vocab_size < len(SPECIALS) + 1:
            raise TokenizerError("target_vocab_size too small")

    @property
    def resolved_seed_size(self) -> int:
        if self.seed_vocab_size is None:
            return 10 * self.target_vocab_size
        return self.seed_vocab_size


# --------------------------------------------------------------------------
# vocabulary


class SubwordVocab:
    """Piece table with natural-log probabilities; ids 0-2 are ``<s> </s> <unk>``.

    Non-special pieces are ordered by descending probability (ties broken by
    the piece string) so that the on-disk file is canonical.
    """

    def __init__(
        self,
        log_probs: dict[str, float],
        mode: str = "subword",
        word_marker: str = WORD_MARKER,
        meta: dict[str, str] | None = None,
    ):
        if mode not in ("subword", "word"):
            raise TokenizerError(f"unknown mode {mode!r}")
        for sp in SPECIALS:
            if sp in log_probs:
                raise TokenizerError(f"special token {sp} cannot be a regular piece")
        ordered = sorted(log_probs.items(), key=lambda kv: (-kv[1], kv[0]))
        self.mode = mode
        self.word_marker = word_marker
        self.meta = dict(meta or {})
        self.pieces: list[str] = list(SPECIALS) + [p for p, _ in ordered]
        self.log_probs = np.array(
            [-math.inf] * len(SPECIALS) + [lp for _, lp in ordered], dtype=np.float64
        )
        self.index = {p: i for i, p in enumerate(self.pieces)}
        self._lookup = {p: (i, float(self.log_probs[i])) for i, p in enumerate(self.pieces[3:], 3)}
        self.max_len = max((len(p) for p in self.pieces[3:]), default=1)
        self.chars = frozenset(p for p in self.pieces[3:] if len(p) == 1)
        finite = self.log_probs[3:]
        self.unk_score = float(finite.min()) - 10.0 if finite.size else -10.0
        self._cache: dict[str, tuple[int, ...]] = {}

    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self._lookup

    def __eq__(self, other) -> bool:
        return isinstance(other, SubwordVocab) and self.to_text() == other.to_text()

    def prob_mass(self) -> float:
        return float(np.exp(self.log_probs[3:]).sum())

    def id_to_piece(self, i: int) -> str:
        return self.pieces[i]

    def log_prob(self, piece: str) -> float:
        return self._lookup[piece][1]

    # -- segmentation -------------------------------------------------------

    def best_segmentation(self, s: str) -> tuple[list[int], float]:
        """Viterbi path over the lattice of ``s``; ``([], -inf)`` if no path exists."""
        n = len(s)
        best = [-math.inf] * (n + 1)
        back: list[tuple[int, int]] = [(0, -1)] * (n + 1)
        best[0] = 0.0
        lookup = self._lookup
        width = self.max_len
        for j in range(1, n + 1):
            for i in range(max(0, j - width), j):
                a = best[i]
                if a == -math.inf:
                    continue
                hit = lookup.get(s[i:j])
                if hit is None:
                    continue
                cand = a + hit[1]
                if cand > best[j]:
                    best[j] = cand
                    back[j] = (i, hit[0])
        if best[n] == -math.inf:
            return [], -math.inf
        ids = []
        pos = n
        while pos > 0:
            pos, pid = back[pos]
            ids.append(pid)
        ids.reverse()
        return ids, best[n]

    def _segment_word(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        out: list[int] = []
        chars = self.chars
        i, n = 0, len(word)
        while i < n:
            j = i
            covered = word[i] in chars
            while j < n and (word[j] in chars) == covered:
                j += 1
            if covered:
                ids, _ = self.best_segmentation(word[i:j])
                out.extend(ids)
            else:
                out.append(UNK_ID)
            i = j
        result = tuple(out)
        if len(self._cache) < 1_000_000:
            self._cache[word] = result
        return result

    def segment(self, text: str) -> list[int]:
        words = text.split()
        if self.mode == "word":
            idx = self.index
            return [idx.get(w, UNK_ID) if w not in SPECIALS else UNK_ID for w in words]
        out: list[int] = []
        for w in words:
            out.extend(self._segment_word(self.word_marker + w))
        return out

    def encode(self, text: str, add_markers: bool = False) -> list[int]:
        ids = self.segment(text)
        if add_markers:
            return [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        n = len(self.pieces)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise TokenizerError(f"unknown token id {i}")
            if i in (BOS_ID, EOS_ID):
                continue
            parts.append(UNK_GLYPH if i == UNK_ID else self.pieces[i])
        if self.mode == "word":
            return " ".join(parts)
        text = "".join(parts).replace(self.word_marker, " ")
        return text[1:] if text.startswith(" ") else text

    # -- file format --------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"#mode\t{self.mode}", f"#word_marker\t{self.word_marker}"]
        for key in sorted(self.meta):
            lines.append(f"#{key}\t{self.meta[key]}")
        for sp in SPECIALS:
            lines.append(f"{sp}\tNA")
        for i in range(3, len(self.pieces)):
            lines.append(f"{self.pieces[i]}\t{float(self.log_probs[i])!r}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_text().encode("utf-8"))

    @classmethod
    def from_text(cls, text: str) -> "SubwordVocab":
        header: dict[str, str] = {}
        pieces: dict[str, float] = {}
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        specials_seen = []
        for lineno, line in enumerate(lines, 1):
            if not specials_seen and not pieces and line.startswith("#"):
                key, _, value = line[1:].partition("\t")
                header[key] = value
                continue
            piece, sep, value = line.rpartition("\t")
            if not sep:
                raise TokenizerError(f"vocab line {lineno}: expected piece<TAB>log_prob")
            if value == "NA":
                specials_seen.append(piece)
                continue
            pieces[piece] = float(value)
        if tuple(specials_seen) != SPECIALS:
            raise TokenizerError(f"vocab file must list specials {SPECIALS} first")
        mode = header.pop("mode", "subword")
        marker = header.pop("word_marker", WORD_MARKER)
        return cls(pieces, mode=mode, word_marker=marker, meta=header)

    @classmethod
    def load(cls, path: str | Path) -> "SubwordVocab":
        return cls.from_text(Path(path).read_bytes().decode("utf-8"))


# module-level aliases matching the operation names


def viterbi_segment(text: str, vocab: SubwordVocab) -> list[int]:
    return vocab.segment(text)


def encode(text: str, vocab: SubwordVocab, add_markers: bool = False) -> list[int]:
    return vocab.encode(text, add_markers)


def decode(ids: Iterable[int], vocab: SubwordVocab) -> str:
    return vocab.decode(ids)


def encode_corpus(corpus: Corpus | Iterable[str], vocab: SubwordVocab) -> np.ndarray:
    """Concatenate ``<s> doc </s>`` for every document into one id stream."""
    texts = corpus.texts() if isinstance(corpus, Corpus) else list(corpus)
    out: list[int] = []
    for text in texts:
        out.extend(vocab.encode(text, add_markers=True))
    return np.asarray(out, dtype=np.int32)


def write_ids(path: str | Path, ids: Sequence[int] | np.ndarray) -> None:
    arr = np.asarray(ids, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(IDS_MAGIC)
        fh.write(arr.tobytes())


def read_ids(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != IDS_MAGIC:
        raise TokenizerError(f"{path}: not an encoded id stream (bad magic)")
    if (len(blob) - 8) % 4:
        raise TokenizerError(f"{path}: truncated id stream")
    return np.frombuffer(blob, dtype="<u4", offset=8).astype(np.int64)


# --------------------------------------------------------------------------
# word mode


def word_tokenize(corpus: Corpus, vocab_size: int = 60000, min_frequency: int = 3) -> SubwordVocab:
    """Whitespace word vocabulary of the ``vocab_size`` most frequent words.

    Words rarer than ``min_frequency`` are dropped; frequency ties are broken
    lexicographically. Everything else encodes to ``<unk>``.
    """
    if len(corpus) == 0:
        raise TokenizerError("cannot build a word vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for text in corpus.texts():
        counts.update(text.split())
    for sp in SPECIALS:
        counts.pop(sp, None)
    ranked = sorted(
        ((w, c) for w, c in counts.items() if c >= min_frequency), key=lambda wc: (-wc[1], wc[0])
    )[:vocab_size]
    total = sum(c for _, c in ranked)
    if not ranked:
        raise TokenizerError("no word reaches min_frequency")
    probs = {w: math.log(c / total) for w, c in ranked}
    meta = {"vocab_size": str(vocab_size), "min_token_frequency": str(min_frequency)}
    return SubwordVocab(probs, mode="word", meta=meta)


# --------------------------------------------------------------------------
# unigram EM training


@dataclass
class Lattice:
    """Flat edge arrays for a batch of strings; see ``_lattice_py`` for the layout."""

    starts: np.ndarray
    ends: np.ndarray
    pieces: np.ndarray
    ptr: np.ndarray
    lengths: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, units: Sequence[str], weights: Sequence[float], index: dict[str, int], max_len: int):
        starts: list[int] = []
        ends: list[int] = []
        pieces: list[int] = []
        ptr = [0]
        get = index.get
        for s in units:
            n = len(s)
            for j in range(1, n + 1):
                for i in range(max(0, j - max_len), j):
                    p = get(s[i:j])
                    if p is not None:
                        starts.append(i)
                        ends.append(j)
                        pieces.append(p)
            ptr.append(len(pieces))
        return cls(
            np.asarray(starts, dtype=np.int32),
            np.asarray(ends, dtype=np.int32),
            np.asarray(pieces, dtype=np.int32),
            np.asarray(ptr, dtype=np.int64),
            np.asarray([len(s) for s in units], dtype=np.int32),
            np.asarray(weights, dtype=np.float64),
        )

    def restrict(self, alive: np.ndarray) -> "Lattice":
        """Drop edges whose piece is not alive, keeping every unit."""
        keep = alive[self.pieces]
        cum = np.concatenate([[0], np.cumsum(keep, dtype=np.int64)])
        return Lattice(
            self.starts[keep],
            self.ends[keep],
            self.pieces[keep],
            cum[self.ptr],
            self.lengths,
            self.weights,
        )

    def expected_counts(self, logp: np.ndarray) -> tuple[float, np.ndarray]:
        counts = np.zeros(logp.shape[0], dtype=np.float64)
        ll = _kernels.expected_counts(
            self.starts, self.ends, self.pieces, self.ptr, self.lengths, self.weights, logp, counts
        )
        return ll, counts

    def viterbi_counts(self, logp: np.ndarray) -> tuple[float, np.ndarray]:
        counts = np.zeros(logp.shape[0], dtype=np.float64)
        score = _kernels.viterbi_counts(
            self.starts, self.ends, self.pieces, self.ptr, self.lengths, self.weights, logp, counts
        )
        return score, counts

    def viterbi_paths(self, logp: np.ndarray, disabled: np.ndarray):
        return _kernels.viterbi_paths(
            self.starts, self.ends, self.pieces, self.ptr, self.lengths, logp,
            np.asarray(disabled, dtype=np.int32),
        )


def training_units(corpus: Corpus, config: TokenizerConfig) -> tuple[Counter[str], set[str]]:
    """Marker-prefixed words split at characters rarer than ``min_token_frequency``.

    Returns the weighted unit strings and the retained alphabet.
    """
    words: Counter[str] = Counter()
    for text in corpus.texts():
        words.update(text.split())
    chars: Counter[str] = Counter()
    for w, c in words.items():
        for ch in WORD_MARKER + w:
            chars[ch] += c
    alphabet = {ch for ch, c in chars.items() if c >= config.min_token_frequency}
    units: Counter[str] = Counter()
    for w, c in words.items():
        s = WORD_MARKER + w
        i, n = 0, len(s)
        while i < n:
            if s[i] not in alphabet:
                i += 1
                continue
            j = i
            while j < n and s[j] in alphabet:
                j += 1
            units[s[i:j]] += c
            i = j
    return units, alphabet


def substring_counts(units: dict[str, int], max_len: int) -> Counter[str]:
    """Occurrence counts of substrings of length 2..max_len, every start position."""
    counts: Counter[str] = Counter()
    for s, c in units.items():
        n = len(s)
        for i in range(n):
            for j in range(i + 2, min(n, i + max_len) + 1):
                counts[s[i:j]] += c
    return counts


def seed_vocabulary(corpus: Corpus, config: TokenizerConfig) -> dict[str, float]:
    """Most frequent substrings plus every retained character, log-probs from counts."""
    if len(corpus) == 0:
        raise TokenizerError("cannot seed a vocabulary from an empty corpus")
    units, alphabet = training_units(corpus, config)
    return _seed_from_units(units, alphabet, config)


def _seed_from_units(units: Counter[str], alphabet: set[str], config: TokenizerConfig) -> dict[str, float]:
    seed_size = config.resolved_seed_size
    if seed_size < len(alphabet) + len(SPECIALS):
        raise TokenizerError(
            f"seed_vocab_size {seed_size} cannot cover {len(alphabet)} characters + specials"
        )
    char_counts: Counter[str] = Counter()
    for s, c in units.items():
        for ch in s:
            char_counts[ch] += c
    multi = substring_counts(units, config.max_piece_length)
    budget = seed_size - len(SPECIALS) - len(alphabet)
    ranked = sorted(multi.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
    cand = dict(sorted(char_counts.items()))
    cand.update(ranked)
    total = float(sum(cand.values()))
    return {p: math.log(c / total) for p, c in cand.items()}


@dataclass
class EMRecord:
    round: int
    iteration: int
    log_likelihood: float
    vocab_size: int


def _normalize(logp: np.ndarray, alive: np.ndarray) -> np.ndarray:
    out = np.full_like(logp, -math.inf)
    vals = logp[alive]
    m = vals.max()
    out[alive] = vals - (m + math.log(np.exp(vals - m).sum()))
    return out


def _em_round(
    lattice: Lattice, logp: np.ndarray, alive: np.ndarray, is_char: np.ndarray,
    config: TokenizerConfig, round_no: int, history: list[EMRecord] | None,
) -> np.ndarray:
    prev = None
    floor = np.finfo(np.float64).tiny
    for it in range(config.em_max_iterations):
        ll, counts = lattice.expected_counts(logp)
        if not math.isfinite(ll):
            raise TokenizerError(f"non-finite corpus log-likelihood in EM round {round_no}")
        if history is not None:
            history.append(EMRecord(round_no, it, ll, int(alive.sum())))
        # M-step; zero-count pieces leave the vocabulary, characters never do
        dead = alive & (counts <= 0.0) & ~is_char
        alive &= ~dead
        counts = np.where(alive & is_char, np.maximum(counts, floor), counts)
        total = counts[alive].sum()
        logp = np.full_like(logp, -math.inf)
        with np.errstate(divide="ignore"):
            logp[alive] = np.log(counts[alive]) - math.log(total)
        if prev is not None and ll - prev <= config.em_tolerance * abs(prev):
            break
        prev = ll
    return logp


def _prune_losses(
    lattice: Lattice, piece_lattice: Lattice, piece_ids: np.ndarray, logp: np.ndarray,
    alive: np.ndarray, is_char: np.ndarray,
) -> dict[int, float]:
    """Likelihood loss of removing each alive multi-character piece.

    Frequencies come from Viterbi segmentation of the training units; a
    removed piece's occurrences are re-segmented by its own best alternative
    path with the piece disabled.
    """
    _, freq = lattice.viterbi_counts(logp)
    total = freq.sum()
    paths, ptr, _ = piece_lattice.viterbi_paths(logp, piece_ids)
    losses: dict[int, float] = {}
    log_total = math.log(total)
    for k, pid in enumerate(piece_ids.tolist()):
        if not alive[pid] or is_char[pid]:
            continue
        f = freq[pid]
        if f <= 0.0:
            losses[pid] = 0.0
            continue
        alt = paths[ptr[k]:ptr[k + 1]]
        lp_self = math.log(f) - log_total
        log_total_alt = math.log(total + f * (len(alt) - 1))
        lp_alt = sum(math.log(freq[a] + f) - log_total_alt for a in alt.tolist())
        losses[pid] = f * (lp_self - lp_alt)
    return losses


def em_train(
    corpus: Corpus, config: TokenizerConfig, history: list[EMRecord] | None = None
) -> SubwordVocab:
    """Train a unigram-LM vocabulary of at most ``config.target_vocab_size`` ids.

    Each round runs EM (forward-backward expected counts, then renormalize)
    until the relative likelihood gain drops below ``em_tolerance``, then
    removes the ``prune_fraction`` of pieces whose removal costs the least
    likelihood. Single characters are never pruned. Finally, pieces used
    fewer than ``min_token_frequency`` times in the Viterbi segmentation of
    the training data are dropped and EM is rerun. Per-iteration likelihoods
    are appended to ``history`` when given.
    """
    if config.mode == "word":
        raise TokenizerError("em_train builds subword vocabularies; use word_tokenize")
    if len(corpus) == 0:
        raise TokenizerError("cannot train on an empty corpus")
    units, alphabet = training_units(corpus, config)
    if not alphabet:
        raise TokenizerError("no character reaches min_token_frequency")
    target_pieces = config.target_vocab_size - len(SPECIALS)
    if target_pieces < len(alphabet):
        raise TokenizerError(
            f"target_vocab_size {config.target_vocab_size} is smaller than the "
            f"{len(alphabet)} characters + {len(SPECIALS)} specials"
        )
    seed = _seed_from_units(units, alphabet, config)
    pieces = list(seed)
    index = {p: i for i, p in enumerate(pieces)}
    logp = np.array([seed[p] for p in pieces], dtype=np.float64)
    is_char = np.array([len(p) == 1 for p in pieces])
    alive = np.ones(len(pieces), dtype=bool)
    unit_strings = sorted(units)
    full = Lattice.build(unit_strings, [units[s] for s in unit_strings], index, config.max_piece_length)
    multi_ids = np.array([i for i, p in enumerate(pieces) if len(p) > 1], dtype=np.int64)
    piece_full = Lattice.build(
        [pieces[i] for i in multi_ids], [1.0] * len(multi_ids), index, config.max_piece_length
    )
    logger.info("seeded %d pieces (%d characters), %d units", len(pieces), len(alphabet), len(units))

    round_no = 0
    while True:
        lattice = full.restrict(alive)
        logp = _em_round(lattice, logp, alive, is_char, config, round_no, history)
        size = int(alive.sum())
        logger.info("round %d: %d pieces", round_no, size)
        if size <= target_pieces:
            break
        losses = _prune_losses(lattice, piece_full.restrict(alive), multi_ids, logp, alive, is_char)
        new_size = max(target_pieces, int((1.0 - config.prune_fraction) * size))
        ranked = sorted(losses, key=lambda pid: (losses[pid], pieces[pid]))
        for pid in ranked[: size - new_size]:
            alive[pid] = False
        logp = _normalize(logp, alive)
        round_no += 1

    for _ in range(3):
        lattice = full.restrict(alive)
        _, freq = lattice.viterbi_counts(logp)
        rare = alive & ~is_char & (freq < config.min_token_frequency)
        if not rare.any():
            break
        alive &= ~rare
        logp = _normalize(logp, alive)
        round_no += 1
        logp = _em_round(full.restrict(alive), logp, alive, is_char, config, round_no, history)

    final = {pieces[i]: float(logp[i]) for i in np.flatnonzero(alive)}
    cfg = asdict(config)
    cfg["seed_vocab_size"] = config.resolved_seed_size
    meta = {k: str(v) for k, v in cfg.items() if k != "mode"}
    return SubwordVocab(final, mode="subword", meta=meta)


def train_tokenizer(corpus: Corpus, config: TokenizerConfig, history: list[EMRecord] | None = None) -> SubwordVocab:
    """Dispatch on ``config.mode``."""
    if config.mode == "word":
        return word_tokenize(corpus, config.target_vocab_size - len(SPECIALS), config.min_token_frequency)
    return em_train(corpus, config, history)
