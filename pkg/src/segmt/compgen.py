"""Atom/compound divergence and greedy extraction of compositional test subsets.

Atoms are morphemes and compounds are words. A subset of a test set is grown one
sentence at a time so that its word distribution diverges from the training set
by a requested amount while its morpheme distribution stays close.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .textproc import is_separator

ATOM_ALPHA = 0.5
COMPOUND_ALPHA = 0.1


def parse_segmented(sentence: str, delimiter: str = "-") -> list[list[str]]:
    """Morphemes of each word in a delimiter-marked sentence; punctuation is dropped."""
    words = []
    for token in sentence.split():
        morphs = ["".join(c for c in piece if not is_separator(c)) for piece in token.split(delimiter)]
        morphs = [m for m in morphs if m]
        if morphs:
            words.append(morphs)
    return words


@dataclass
class SentenceUnits:
    atoms: Counter
    compounds: Counter


def sentence_units(sentence: str, delimiter: str = "-") -> SentenceUnits:
    words = parse_segmented(sentence, delimiter)
    return SentenceUnits(Counter(m for w in words for m in w), Counter("".join(w) for w in words))


class FreqDistribution:
    """Relative frequencies built from raw counts."""

    def __init__(self, counts: Counter | dict):
        self.counts = Counter({k: v for k, v in counts.items() if v > 0})
        self.total = sum(self.counts.values())
        if self.total == 0:
            raise ValueError("frequency distribution needs at least one unit")

    def __getitem__(self, unit) -> float:
        return self.counts.get(unit, 0) / self.total

    def __contains__(self, unit) -> bool:
        return unit in self.counts

    def __len__(self) -> int:
        return len(self.counts)

    def items(self):
        for k in sorted(self.counts):
            yield k, self.counts[k] / self.total

    def as_dict(self) -> dict:
        return dict(self.items())


def distributions(corpus: Sequence[str], delimiter: str = "-") -> tuple[FreqDistribution, FreqDistribution]:
    """(atom distribution, compound distribution) of segmented sentences."""
    if not corpus:
        raise ValueError("empty corpus")
    atoms, comps = Counter(), Counter()
    for s in corpus:
        u = sentence_units(s, delimiter)
        atoms.update(u.atoms)
        comps.update(u.compounds)
    return FreqDistribution(atoms), FreqDistribution(comps)


def chernoff(p: FreqDistribution, q: FreqDistribution, alpha: float) -> float:
    """sum_k p_k^alpha q_k^(1-alpha); units missing from either side contribute 0."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie strictly between 0 and 1")
    total = 0.0
    for k, qk in q.items():
        pk = p[k]
        if pk > 0:
            total += pk ** alpha * qk ** (1 - alpha)
    return total


def compound_divergence(train: FreqDistribution, test: FreqDistribution) -> float:
    return 1.0 - chernoff(train, test, COMPOUND_ALPHA)


def atom_divergence(train: FreqDistribution, test: FreqDistribution) -> float:
    return 1.0 - chernoff(train, test, ATOM_ALPHA)


# --------------------------------------------------------------------------- #
# greedy subset extraction
# --------------------------------------------------------------------------- #


@dataclass
class SplitSpec:
    target_dc: float
    size: int
    k: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.size < 1:
            raise ValueError("subset size must be >= 1")


@dataclass
class DivergenceReport:
    indices: list[int]
    compound_divergence: float
    atom_divergence: float
    spec: SplitSpec
    train_sentences: int
    test_sentences: int
    last_pool: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DivergenceReport":
        d = json.loads(text)
        d["spec"] = SplitSpec(**d["spec"])
        return cls(**d)


class _RunningChernoff:
    """Chernoff coefficient against a fixed reference while the other side grows by counts."""

    def __init__(self, ref: FreqDistribution, alpha: float):
        self.ref = ref
        self.alpha = alpha
        self.counts: Counter = Counter()
        self.total = 0
        self.weighted = 0.0  # sum_k p_k^alpha c_k^(1-alpha)

    def _term(self, unit, count) -> float:
        p = self.ref[unit]
        return p ** self.alpha * count ** (1 - self.alpha) if p > 0 and count > 0 else 0.0

    def value_with(self, extra: Counter) -> float:
        total = self.total + sum(extra.values())
        if total == 0:
            return 0.0
        w = self.weighted
        for unit in sorted(extra):
            c = self.counts.get(unit, 0)
            w += self._term(unit, c + extra[unit]) - self._term(unit, c)
        return w / total ** (1 - self.alpha)

    def add(self, extra: Counter) -> None:
        for unit in sorted(extra):
            c = self.counts.get(unit, 0)
            self.weighted += self._term(unit, c + extra[unit]) - self._term(unit, c)
            self.counts[unit] = c + extra[unit]
        self.total += sum(extra.values())


def objective(dc: float, da: float, target: float) -> float:
    return abs(dc - target) + da


def extract_subset(train: Sequence[str], test: Sequence[str], spec: SplitSpec,
                   delimiter: str = "-") -> DivergenceReport:
    """Greedy subset growth: at each step sample `k` unused test sentences and keep the one
    minimizing |D_C - target| + D_A of the subset including that sentence."""
    if spec.size > len(test):
        raise ValueError(f"requested {spec.size} sentences but the test set has {len(test)}")
    f_atoms, f_comps = distributions(train, delimiter)
    units = [sentence_units(s, delimiter) for s in test]
    atoms = _RunningChernoff(f_atoms, ATOM_ALPHA)
    comps = _RunningChernoff(f_comps, COMPOUND_ALPHA)
    rng = random.Random(spec.seed)
    remaining = list(range(len(test)))
    chosen: list[int] = []
    pool: list[int] = []
    while len(chosen) < spec.size:
        if not remaining:
            raise ValueError("test set exhausted before reaching the requested size")
        pool = sorted(rng.sample(remaining, min(spec.k, len(remaining))))
        best, best_val = None, math.inf
        for i in pool:
            dc = 1.0 - comps.value_with(units[i].compounds)
            da = 1.0 - atoms.value_with(units[i].atoms)
            val = objective(dc, da, spec.target_dc)
            if val < best_val:
                best, best_val = i, val
        chosen.append(best)
        remaining.remove(best)
        atoms.add(units[best].atoms)
        comps.add(units[best].compounds)
    dc, da = subset_divergences(train, test, chosen, delimiter)
    return DivergenceReport(chosen, dc, da, spec, len(train), len(test), pool)


def subset_divergences(train: Sequence[str], test: Sequence[str], indices: Iterable[int],
                       delimiter: str = "-") -> tuple[float, float]:
    """(D_C, D_A) recomputed from scratch for the given test indices."""
    ta, tc = distributions(train, delimiter)
    sa, sc = distributions([test[i] for i in indices], delimiter)
    return compound_divergence(tc, sc), atom_divergence(ta, sa)


def genbench_report(report: DivergenceReport) -> dict:
    return {
        "compound_divergence": report.compound_divergence,
        "atom_divergence": report.atom_divergence,
        "target_compound_divergence": report.spec.target_dc,
        "subset_size": len(report.indices),
        "sample_size_k": report.spec.k,
        "seed": report.spec.seed,
        "train_sentences": report.train_sentences,
        "test_sentences": report.test_sentences,
        "atoms": "morphemes",
        "compounds": "words",
        "alpha_compound": COMPOUND_ALPHA,
        "alpha_atom": ATOM_ALPHA,
    }
