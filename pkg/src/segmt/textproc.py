"""Corpus ingestion: character vocabulary, word spans, subword lexicon and source-side BPE."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, EOS, EOT = "<pad>", "<unk>", "<eos>", "<eot>"
SPECIALS = (PAD, UNK, EOS, EOT)
PAD_ID, UNK_ID, EOS_ID, EOT_ID = 0, 1, 2, 3

# End-of-translation is carried inside target strings as ETX so that spans and
# lattices can treat it like any other separator character.
EOT_CHAR = "\x03"

BPE_EOW = "</w>"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Raised for malformed corpora or artifact files."""


def is_separator(ch: str) -> bool:
    if ch == EOT_CHAR or ch.isspace():
        return True
    cat = unicodedata.category(ch)
    return cat[0] in ("Z", "P")


def normalize(line: str) -> str:
    return unicodedata.normalize("NFC", line.rstrip("\r\n"))


def read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [normalize(line) for line in fh]


# --------------------------------------------------------------------------- #
# character vocabulary
# --------------------------------------------------------------------------- #


class CharVocab:
    """Dense character index. Specials occupy ids 0..3, characters follow in code point order."""

    def __init__(self, chars: Iterable[str]):
        chars = sorted(set(chars) - {EOT_CHAR})
        self.itos: list[str] = list(SPECIALS) + chars
        self.stoi: dict[str, int] = {c: i for i, c in enumerate(self.itos)}
        self.stoi[EOT_CHAR] = EOT_ID

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, ch: str) -> bool:
        return ch in self.stoi

    @property
    def chars(self) -> list[str]:
        return self.itos[len(SPECIALS):]

    def char_of(self, idx: int) -> str:
        """Surface character for an output id; EOT maps back to its control character."""
        if idx == EOT_ID:
            return EOT_CHAR
        if idx < len(SPECIALS):
            raise KeyError(f"special id {idx} has no surface character")
        return self.itos[idx]

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(c, UNK_ID) for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.char_of(i) for i in ids)

    def generable_ids(self) -> list[int]:
        """Ids a generator may emit as characters (everything but PAD, UNK, EOS)."""
        return [EOT_ID] + list(range(len(SPECIALS), len(self.itos)))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#charvocab v{FORMAT_VERSION} size={len(self)}\n")
            for ch in self.chars:
                fh.write(f"{ord(ch)}\n")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocab":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("#charvocab"):
                raise DataError(f"{path}: not a character vocabulary file")
            return cls(chr(int(line)) for line in fh if line.strip())


def build_char_vocab(corpus: Sequence[str]) -> CharVocab:
    if not corpus or not any(corpus):
        raise DataError("cannot build a character vocabulary from an empty corpus")
    return CharVocab({c for line in corpus for c in line})


# --------------------------------------------------------------------------- #
# word spans
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    kind: str  # "word" | "sep"

    @property
    def is_word(self) -> bool:
        return self.kind == "word"


def word_spans(y: str) -> list[Span]:
    """Split `y` into maximal word runs and one-character separator spans."""
    spans = []
    i, n = 0, len(y)
    while i < n:
        if is_separator(y[i]):
            spans.append(Span(i, i + 1, "sep"))
            i += 1
            continue
        j = i
        while j < n and not is_separator(y[j]):
            j += 1
        spans.append(Span(i, j, "word"))
        i = j
    return spans


def span_starts(y: str, spans: Sequence[Span] | None = None) -> list[int]:
    """Start index of the span containing each position."""
    spans = word_spans(y) if spans is None else spans
    out = [0] * len(y)
    for sp in spans:
        for k in range(sp.start, sp.end):
            out[k] = sp.start
    return out


def longest_segment_start(y: str, k: int, m: int, spans: Sequence[Span] | None = None) -> int:
    """Earliest legal start of a segment ending at position k (0-based, inclusive)."""
    if not 0 <= k < len(y):
        raise IndexError(f"position {k} outside sequence of length {len(y)}")
    if is_separator(y[k]):
        return k
    return max(k - m + 1, span_starts(y, spans)[k])


def words_of(line: str) -> list[str]:
    return [line[s.start:s.end] for s in word_spans(line) if s.is_word]


# --------------------------------------------------------------------------- #
# lexicon
# --------------------------------------------------------------------------- #


class _TrieNode:
    __slots__ = ("children", "ids", "entry_id")

    def __init__(self):
        self.children: dict[str, _TrieNode] = {}
        self.ids: list[int] = []
        self.entry_id: int | None = None


@dataclass
class Lexicon:
    entries: list[str]
    max_len: int
    freqs: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.index = {e: i for i, e in enumerate(self.entries)}
        if len(self.index) != len(self.entries):
            raise DataError("duplicate lexicon entries")
        for e in self.entries:
            if not 1 <= len(e) <= self.max_len:
                raise DataError(f"lexicon entry {e!r} violates length bound {self.max_len}")
        self._root = _TrieNode()
        for i, e in enumerate(self.entries):
            node = self._root
            for ch in e:
                node = node.children.setdefault(ch, _TrieNode())
                node.ids.append(i)
            node.entry_id = i
        self._cache: dict[tuple[str, bool], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, s: str) -> bool:
        return s in self.index

    @property
    def size(self) -> int:
        return len(self.entries)

    def id_of(self, s: str) -> int:
        """Entry id, or -1 for out-of-lexicon strings."""
        return self.index.get(s, -1)

    def prefix_ids(self, prefix: str, exclude_exact: bool = False) -> set[int]:
        return set(self.prefix_array(prefix, exclude_exact).tolist())

    def prefix_array(self, prefix: str, exclude_exact: bool = False) -> np.ndarray:
        """Sorted id array of entries starting with `prefix` (cached)."""
        key = (prefix, exclude_exact)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        node = self._root
        for ch in prefix:
            node = node.children.get(ch)
            if node is None:
                break
        if node is None or not prefix:
            ids = [] if prefix else list(range(len(self.entries)))
        else:
            ids = [i for i in node.ids if not (exclude_exact and i == node.entry_id)]
        arr = np.asarray(sorted(ids), dtype=np.int64)
        self._cache[key] = arr
        return arr

    def save(self, path: str | Path) -> None:
        freqs = self.freqs or [0] * len(self.entries)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#lexicon v{FORMAT_VERSION} V={len(self.entries)} m={self.max_len}\n")
            for e, f in zip(self.entries, freqs):
                fh.write(f"{e}\t{f}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if not header or header[0] != "#lexicon":
                raise DataError(f"{path}: not a lexicon file")
            fields = dict(kv.split("=") for kv in header[2:])
            entries, freqs = [], []
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                e, f = line.split("\t")
                entries.append(e)
                freqs.append(int(f))
        if len(entries) != int(fields["V"]):
            raise DataError(f"{path}: header says V={fields['V']} but found {len(entries)} entries")
        return cls(entries, int(fields["m"]), freqs)


def ngram_counts(corpus: Iterable[str], m: int) -> Counter:
    counts: Counter = Counter()
    for line in corpus:
        for w in words_of(line):
            for n in range(1, m + 1):
                for i in range(len(w) - n + 1):
                    counts[w[i:i + n]] += 1
    return counts


def build_lexicon(corpus: Sequence[str], V: int, m: int) -> Lexicon:
    if m < 1:
        raise DataError("maximum segment length must be >= 1")
    counts = ngram_counts(corpus, m)
    singles = sorted(s for s in counts if len(s) == 1)
    if V < len(singles):
        raise DataError(
            f"lexicon size {V} is smaller than the {len(singles)} distinct word characters"
        )
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    top = ranked[:V]
    missing = [s for s in singles if s not in set(top)]
    if missing:
        # evict the lowest-ranked multi-character entries to make room
        keep = set(top)
        for s in reversed(top):
            if not missing:
                break
            if len(s) > 1:
                keep.discard(s)
                keep.add(missing.pop())
        top = sorted(keep, key=lambda s: (-counts[s], s))
    return Lexicon(top, m, [counts[s] for s in top])


# --------------------------------------------------------------------------- #
# BPE (source side)
# --------------------------------------------------------------------------- #


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    alphabet: list[str]

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def vocab(self) -> list[str]:
        out = list(self.alphabet)
        seen = set(out)
        for a, b in self.merges:
            if a + b not in seen:
                seen.add(a + b)
                out.append(a + b)
        return out

    def segment_word(self, word: str) -> tuple[str, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        known = set(self.alphabet)
        symbols = [c if c in known else UNK for c in word[:-1]]
        last = word[-1] + BPE_EOW
        symbols.append(last if last in known else UNK + BPE_EOW)
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _merge_pair(symbols, best)
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def apply(self, sentence: str) -> list[str]:
        return [tok for w in sentence.split() for tok in self.segment_word(w)]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#bpe v{FORMAT_VERSION} merges={len(self.merges)} alphabet={len(self.alphabet)}\n")
            for s in self.alphabet:
                fh.write(f"{s}\n")
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if not header or header[0] != "#bpe":
                raise DataError(f"{path}: not a BPE model file")
            fields = dict(kv.split("=") for kv in header[2:])
            lines = [line.rstrip("\n") for line in fh]
        n_alpha = int(fields["alphabet"])
        alphabet = lines[:n_alpha]
        merges = [tuple(line.split(" ")) for line in lines[n_alpha:n_alpha + int(fields["merges"])]]
        return cls(merges, alphabet)


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out, i = [], 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_train(corpus: Sequence[str], n_merges: int) -> BpeModel:
    """Learn merges over whitespace-delimited words.

    The most frequent adjacent pair is merged at each step; ties go to the pair
    seen in the earliest word (first-occurrence order), then lexicographically.
    """
    if n_merges < 0:
        raise DataError("number of merges must be non-negative")
    word_freq: Counter = Counter(w for line in corpus for w in line.split())
    if not word_freq:
        raise DataError("cannot train BPE on an empty corpus")
    words = [list(w[:-1]) + [w[-1] + BPE_EOW] for w in word_freq]
    freqs = list(word_freq.values())
    alphabet = sorted({s for w in words for s in w} | {c for w in word_freq for c in w})

    pair_count: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_count[pair] += freqs[wi]
            where.setdefault(pair, set()).add(wi)

    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        live = [p for p, c in pair_count.items() if c > 0]
        if not live:
            break
        best = min(live, key=lambda p: (-pair_count[p], min(where[p]), p))
        merges.append(best)
        for wi in sorted(where.pop(best, ())):
            syms = words[wi]
            for pair in zip(syms, syms[1:]):
                pair_count[pair] -= freqs[wi]
                if pair != best:
                    where[pair].discard(wi)
            new = _merge_pair(syms, best)
            words[wi] = new
            for pair in zip(new, new[1:]):
                pair_count[pair] += freqs[wi]
                where.setdefault(pair, set()).add(wi)
        pair_count.pop(best, None)
        for p in [p for p, c in pair_count.items() if c <= 0]:
            del pair_count[p]
            where.pop(p, None)
    return BpeModel(merges, alphabet)


def bpe_detokenize(tokens: Sequence[str]) -> str:
    return "".join(tokens).replace(BPE_EOW, " ").rstrip(" ")


class SourceVocab:
    """Token index for BPE output; PAD and UNK first, then the model vocabulary."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]
