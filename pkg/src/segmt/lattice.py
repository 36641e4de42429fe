"""Segmentation lattice: forward marginal, Viterbi, and brute-force enumeration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import SegmentalModel, SourceEncoding
from .textproc import EOT_CHAR, CharVocab, Lexicon, is_separator, span_starts, word_spans

# finite stand-in for log(0) inside the recurrence so that rows with no
# legal cell (padding) keep finite gradients
LOG_ZERO = -1e30


class LatticeError(ValueError):
    pass


def valid_cells(y: str, m: int) -> np.ndarray:
    """[n, m] mask: cell (j, l) is the segment y[j:j+l+1]."""
    n = len(y)
    starts = span_starts(y)
    ok = np.zeros((n, m), dtype=bool)
    for j in range(n):
        if is_separator(y[j]):
            ok[j, 0] = True
            continue
        for l in range(m):
            k = j + l
            if k >= n or is_separator(y[k]) or starts[k] != starts[j]:
                break
            ok[j, l] = True
    return ok


def lexicon_ids(y: str, m: int, lex: Lexicon) -> np.ndarray:
    n = len(y)
    out = np.full((n, m), -1, dtype=np.int64)
    for j in range(n):
        for l in range(min(m, n - j)):
            out[j, l] = lex.id_of(y[j:j + l + 1])
    return out


def segments_from_ends(ends: Sequence[int]) -> list[tuple[int, int]]:
    out, start = [], 0
    for e in ends:
        out.append((start, e))
        start = e
    return out


@dataclass
class SegmentLattice:
    """Cell log-scores for one target string; `scores[j, l]` scores y[j:j+l+1]."""

    y: str
    m: int
    scores: np.ndarray
    valid: np.ndarray = field(default=None)
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = valid_cells(self.y, self.m)
        self.scores = np.where(self.valid, self.scores, -np.inf)

    @property
    def n(self) -> int:
        return len(self.y)

    def cell(self, start: int, end: int) -> float:
        return float(self.scores[start, end - start - 1])


def forward_logprob(grid: torch.Tensor, lengths: torch.Tensor | Sequence[int]) -> torch.Tensor:
    """Batched semi-Markov forward recurrence in log space.

    grid [B,T,m]: log-score of the segment starting at j with length l+1 (-inf if illegal).
    Returns log alpha_n for each sentence, [B].
    """
    B, T, m = grid.shape
    lengths = torch.as_tensor(lengths, dtype=torch.long)
    g = torch.where(torch.isfinite(grid), grid, grid.new_full((), LOG_ZERO))
    alphas = [grid.new_zeros(B)]
    for k in range(1, T + 1):
        cands = []
        for l in range(1, min(m, k) + 1):
            cands.append(alphas[k - l] + g[:, k - l, l - 1])
        alphas.append(torch.logsumexp(torch.stack(cands, dim=1), dim=1))
    table = torch.stack(alphas, dim=1)  # [B,T+1]
    return table.gather(1, lengths.view(-1, 1)).squeeze(1)


def forward_marginal(lat: SegmentLattice) -> float:
    grid = torch.as_tensor(lat.scores, dtype=torch.float64).unsqueeze(0)
    out = float(forward_logprob(grid, [lat.n])[0])
    if out <= LOG_ZERO / 2:
        raise LatticeError("no legal segmentation reaches the end of the sequence")
    return out


def viterbi(lat: SegmentLattice) -> tuple[list[int], float]:
    """Best segmentation as a list of segment end positions, and its log-probability.

    Ties go to the longer final segment.
    """
    n, m = lat.n, lat.m
    best = np.full(n + 1, -np.inf)
    back = np.zeros(n + 1, dtype=np.int64)
    best[0] = 0.0
    for k in range(1, n + 1):
        for l in range(min(m, k), 0, -1):
            s = lat.scores[k - l, l - 1]
            if not np.isfinite(s):
                continue
            cand = best[k - l] + s
            if cand > best[k]:
                best[k] = cand
                back[k] = l
    if not np.isfinite(best[n]):
        raise LatticeError("no legal segmentation reaches the end of the sequence")
    ends, k = [], n
    while k > 0:
        ends.append(k)
        k -= back[k]
    return ends[::-1], float(best[n])


def format_segmentation(y: str, ends: Sequence[int], delimiter: str = "-") -> str:
    """Insert `delimiter` at segment boundaries that fall strictly inside a word."""
    cut = set(ends)
    out = []
    for i, ch in enumerate(y):
        if i in cut and i > 0 and not is_separator(ch) and not is_separator(y[i - 1]):
            out.append(delimiter)
        out.append(ch)
    return "".join(out)


def parse_segmentation(text: str, delimiter: str = "-") -> tuple[str, list[int]]:
    """Inverse of format_segmentation: (surface string, segment end positions)."""
    surface, ends = [], []
    for ch in text:
        if ch == delimiter and surface:
            ends.append(len(surface))
            continue
        surface.append(ch)
    y = "".join(surface)
    cuts = set(ends)
    for sp in word_spans(y):
        cuts.add(sp.end)
        if sp.start:
            cuts.add(sp.start)
    return y, sorted(c for c in cuts if c > 0)


# --------------------------------------------------------------------------- #
# model-backed lattices
# --------------------------------------------------------------------------- #


def target_string(y: str, append_eot: bool = True) -> str:
    return y + EOT_CHAR if append_eot else y


@torch.no_grad()
def score_grid(model: SegmentalModel, enc: SourceEncoding, y: str, vocab: CharVocab, lex: Lexicon) -> SegmentLattice:
    """Score every legal cell of `y` with one shared decoder pass."""
    m = model.m
    valid = valid_cells(y, m)
    tgt = torch.as_tensor(vocab.encode(y), dtype=torch.long).unsqueeze(0)
    lid = torch.as_tensor(lexicon_ids(y, m, lex)).unsqueeze(0)
    grid = model.grid_scores(enc, tgt, lid, torch.as_tensor(valid).unsqueeze(0))[0]
    return SegmentLattice(y, m, grid.double().numpy(), valid)


def enumerate_segmentations(y: str, m: int, limit: int = 100_000) -> list[list[int]]:
    """All legal segmentations of y as end-position lists."""
    valid = valid_cells(y, m)
    n = len(y)
    out: list[list[int]] = []

    def rec(j: int, ends: list[int]):
        if len(out) > limit:
            raise LatticeError(f"more than {limit} segmentations")
        if j == n:
            out.append(list(ends))
            return
        for l in range(m):
            if valid[j, l]:
                ends.append(j + l + 1)
                rec(j + l + 1, ends)
                ends.pop()

    rec(0, [])
    return out


@torch.no_grad()
def enumerate_all(model: SegmentalModel, enc: SourceEncoding, y: str, vocab: CharVocab, lex: Lexicon,
                  limit: int = 100_000) -> list[tuple[list[int], float]]:
    """Score every legal segmentation by the chain rule, recomputing each history from scratch."""
    segs = enumerate_segmentations(y, model.m, limit)
    ids = vocab.encode(y)
    states: dict[int, object] = {}
    cache: dict[tuple[int, int], float] = {}
    out = []
    for ends in segs:
        total = 0.0
        for a, b in segments_from_ends(ends):
            key = (a, b)
            if key not in cache:
                if a not in states:
                    states[a] = model.decode_history(ids[:a], enc)
                st = states[a]
                cache[key] = model.segment_logprob(st, a, ids[a:b], y[a:b], lex).logprob
            total += cache[key]
        out.append((ends, total))
    return out
