"""Evaluation: chrF, morpheme boundary / morpheme identification scores, paired bootstrap."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .textproc import word_spans


@dataclass(frozen=True)
class SegmentedWord:
    word: str
    boundaries: frozenset[int]  # internal split indices, 0 < i < len(word)

    def __post_init__(self):
        for b in self.boundaries:
            if not 0 < b < len(self.word):
                raise ValueError(f"boundary {b} outside the interior of {self.word!r}")

    @classmethod
    def parse(cls, text: str, delimiter: str = "-") -> "SegmentedWord":
        pieces = text.split(delimiter)
        cuts, pos = set(), 0
        for p in pieces[:-1]:
            pos += len(p)
            cuts.add(pos)
        return cls("".join(pieces), frozenset(c for c in cuts if 0 < c < len("".join(pieces))))

    @property
    def morphs(self) -> list[str]:
        return [self.word[a:b] for a, b in self.spans]

    @property
    def spans(self) -> list[tuple[int, int]]:
        cuts = [0, *sorted(self.boundaries), len(self.word)]
        return list(zip(cuts, cuts[1:]))

    def render(self, delimiter: str = "-") -> str:
        return delimiter.join(self.morphs)


@dataclass
class ScoreReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, n_pred: int, n_gold: int) -> "ScoreReport":
        p = 100.0 * tp / n_pred if n_pred else 0.0
        r = 100.0 * tp / n_gold if n_gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f, tp, n_pred - tp, n_gold - tp)

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


def _check_aligned(pred: Sequence[SegmentedWord], gold: Sequence[SegmentedWord]) -> None:
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted words vs {len(gold)} gold words")
    for i, (p, g) in enumerate(zip(pred, gold)):
        if p.word != g.word:
            raise ValueError(f"word {i}: predicted {p.word!r} does not match gold {g.word!r}")


def boundary_prf(pred: Sequence[SegmentedWord], gold: Sequence[SegmentedWord]) -> ScoreReport:
    """Micro-averaged precision/recall/F1 over internal boundary positions."""
    _check_aligned(pred, gold)
    tp = sum(len(p.boundaries & g.boundaries) for p, g in zip(pred, gold))
    return ScoreReport.from_counts(tp, sum(len(p.boundaries) for p in pred), sum(len(g.boundaries) for g in gold))


def morpheme_prf(pred: Sequence[SegmentedWord], gold: Sequence[SegmentedWord]) -> ScoreReport:
    """Micro-averaged scores where a predicted subword is correct iff its exact span is a gold morpheme."""
    _check_aligned(pred, gold)
    tp = sum(len(set(p.spans) & set(g.spans)) for p, g in zip(pred, gold))
    return ScoreReport.from_counts(tp, sum(len(p.spans) for p in pred), sum(len(g.spans) for g in gold))


def segmented_words(line: str, delimiter: str = "-") -> list[SegmentedWord]:
    """Words of a delimiter-marked sentence, e.g. a line of segmenter output."""
    surface, cuts = [], set()
    for ch in line:
        if ch == delimiter and surface:
            cuts.add(len(surface))
        else:
            surface.append(ch)
    text = "".join(surface)
    return [SegmentedWord(text[sp.start:sp.end], frozenset(c - sp.start for c in cuts if sp.start < c < sp.end))
            for sp in word_spans(text) if sp.is_word]


def read_gold(path: str | Path, delimiter: str = "-") -> list[SegmentedWord]:
    """One word per line: `surface<TAB>seg-men-ted` (a bare segmented form is also accepted).

    Lines without a tab that contain several words are split into words, so
    sentence-level segmenter output can be read with the same function.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" in line:
                surface, seg = line.split("\t")[:2]
            else:
                out.extend(segmented_words(line, delimiter))
                continue
            w = SegmentedWord.parse(seg, delimiter)
            if w.word != surface:
                raise ValueError(f"{path}:{n}: segmentation {seg!r} does not spell {surface!r}")
            out.append(w)
    return out


# --------------------------------------------------------------------------- #
# chrF
# --------------------------------------------------------------------------- #


def _char_ngrams(text: str, n: int) -> Counter:
    s = "".join(text.split())
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def chrf_stats(hyp: str, ref: str, n_max: int = 6) -> list[tuple[int, int, int]]:
    """Per order: (hyp n-grams, ref n-grams, matches).

    Hypothesis n-grams of an order the reference is too short to have are not
    counted, so they do not dilute corpus-level precision.
    """
    out = []
    for n in range(1, n_max + 1):
        h, r = _char_ngrams(hyp, n), _char_ngrams(ref, n)
        n_ref = sum(r.values())
        out.append((sum(h.values()) if n_ref else 0, n_ref, sum((h & r).values())))
    return out


def chrf_from_stats(stats: Sequence[tuple[int, int, int]], beta: float = 2.0) -> float:
    """Average precision and recall over orders present in both sides, then F-beta, in percent."""
    prec = rec = 0.0
    eff = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            eff += 1
    if eff == 0:
        return 0.0
    prec /= eff
    rec /= eff
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf(hyp: str, ref: str, n_max: int = 6, beta: float = 2.0) -> float:
    return chrf_from_stats(chrf_stats(hyp, ref, n_max), beta)


def corpus_chrf(hyps: Sequence[str], refs: Sequence[str], n_max: int = 6, beta: float = 2.0) -> float:
    """Corpus-level chrF: n-gram statistics are summed over sentences before scoring."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    total = [[0, 0, 0] for _ in range(n_max)]
    for h, r in zip(hyps, refs):
        for acc, st in zip(total, chrf_stats(h, r, n_max)):
            for i in range(3):
                acc[i] += st[i]
    return chrf_from_stats([tuple(t) for t in total], beta)


def exact_match(hyps: Sequence[str], refs: Sequence[str]) -> float:
    if not refs:
        return 0.0
    return sum(h == r for h, r in zip(hyps, refs)) / len(refs)


# --------------------------------------------------------------------------- #
# significance
# --------------------------------------------------------------------------- #


def paired_bootstrap(hyps_a: Sequence[str], hyps_b: Sequence[str], refs: Sequence[str],
                     metric: Callable[[Sequence[str], Sequence[str]], float] = corpus_chrf,
                     n_resamples: int = 1000, seed: int = 0) -> float:
    """p-value: share of resamples in which the system that is worse on the full set scores >= the better one."""
    n = len(refs)
    if not (len(hyps_a) == len(hyps_b) == n):
        raise ValueError("hypothesis and reference lists must have equal length")
    if n < 2:
        raise ValueError("paired bootstrap needs at least 2 sentences")
    a_full, b_full = metric(hyps_a, refs), metric(hyps_b, refs)
    better, worse = (hyps_a, hyps_b) if a_full >= b_full else (hyps_b, hyps_a)
    rng = random.Random(seed)
    hits = 0
    for _ in range(n_resamples):
        idx = [rng.randrange(n) for _ in range(n)]
        r = [refs[i] for i in idx]
        if metric([worse[i] for i in idx], r) >= metric([better[i] for i in idx], r):
            hits += 1
    return hits / n_resamples
