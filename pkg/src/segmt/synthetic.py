"""Synthetic agglutinative translation data with known morpheme segmentations.

Words are built from three slots (subject prefix, root, optional tense suffix);
each morpheme has a fixed source-side gloss, so the source sentence determines
the target sentence exactly.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

CONSONANTS = "bdfgklmnprstvwyz"
VOWELS = "aeiou"

GLOSSES = {
    "prefix": ["i", "you", "we", "they", "she"],
    "root": ["see", "eat", "run", "sing", "read", "walk", "cook", "write", "sleep", "dance"],
    "suffix": ["past", "future", "often", "again", "not"],
}


@dataclass
class Morpheme:
    gloss: str
    form: str
    slot: str


@dataclass
class SyntheticLanguage:
    prefixes: list[Morpheme]
    roots: list[Morpheme]
    suffixes: list[Morpheme]

    @property
    def morphemes(self) -> list[Morpheme]:
        return self.prefixes + self.roots + self.suffixes


def _syllable(rng: random.Random) -> str:
    return rng.choice(CONSONANTS) + rng.choice(VOWELS)


def make_language(seed: int = 0) -> SyntheticLanguage:
    """20 morphemes: 5 CV prefixes, 10 CVC(V) roots, 5 VC suffixes, all distinct."""
    rng = random.Random(seed)
    used: set[str] = set()

    def fresh(make):
        while True:
            f = make()
            if f not in used and not any(f.startswith(u) or u.startswith(f) for u in used):
                used.add(f)
                return f

    prefixes = [Morpheme(g, fresh(lambda: _syllable(rng)), "prefix") for g in GLOSSES["prefix"]]
    roots = [Morpheme(g, fresh(lambda: _syllable(rng) + rng.choice(CONSONANTS) + rng.choice(["", rng.choice(VOWELS)])), "root")
             for g in GLOSSES["root"]]
    suffixes = [Morpheme(g, fresh(lambda: rng.choice(VOWELS) + rng.choice(CONSONANTS)), "suffix")
                for g in GLOSSES["suffix"]]
    return SyntheticLanguage(prefixes, roots, suffixes)


@dataclass
class SyntheticPair:
    source: str
    target: str
    segmented: str  # target with "-" between morphemes


def sample_word(lang: SyntheticLanguage, rng: random.Random) -> list[Morpheme]:
    word = [rng.choice(lang.prefixes), rng.choice(lang.roots)]
    if rng.random() < 0.5:
        word.append(rng.choice(lang.suffixes))
    return word


def sample_pair(lang: SyntheticLanguage, rng: random.Random, min_words=2, max_words=3) -> SyntheticPair:
    words = [sample_word(lang, rng) for _ in range(rng.randint(min_words, max_words))]
    source = " ".join(m.gloss for w in words for m in w) + " ."
    target = " ".join("".join(m.form for m in w) for w in words) + "."
    seg = " ".join("-".join(m.form for m in w) for w in words) + "."
    return SyntheticPair(source, target, seg)


def make_corpus(lang: SyntheticLanguage, n: int, seed: int, exclude: set[str] | None = None,
                min_words=2, max_words=3) -> list[SyntheticPair]:
    """`n` distinct pairs whose targets are not in `exclude`."""
    rng = random.Random(seed)
    seen = set(exclude or ())
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n:
            raise RuntimeError("synthetic language too small for the requested corpus size")
        p = sample_pair(lang, rng, min_words, max_words)
        if p.target in seen:
            continue
        seen.add(p.target)
        out.append(p)
    return out


def held_out_split(lang: SyntheticLanguage, n_train: int, n_test: int, n_held: int = 15,
                   seed: int = 0) -> tuple[list[SyntheticPair], list[SyntheticPair]]:
    """Train pairs avoid `n_held` prefix+root combinations; test pairs are drawn freely.

    Every morpheme still occurs in training, so test words can be new while their
    morphemes are not.
    """
    rng = random.Random(seed)
    combos = [(p.form, r.form) for p in lang.prefixes for r in lang.roots]
    held = set(rng.sample(combos, n_held))

    def allowed(pair: SyntheticPair) -> bool:
        for w in pair.segmented.rstrip(".").split():
            morphs = w.split("-")
            if (morphs[0], morphs[1]) in held:
                return False
        return True

    pool = make_corpus(lang, 3 * (n_train + n_test), seed + 1)
    train = [p for p in pool[: 2 * n_train + n_test] if allowed(p)][:n_train]
    test = pool[2 * n_train + n_test:][:n_test]
    if len(train) < n_train or len(test) < n_test:
        raise RuntimeError("not enough sentences for the requested split")
    return train, test
