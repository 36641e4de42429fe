"""Generation with a subword-segmental model.

Dynamic decoding emits one character per step while keeping two beams: hypotheses
whose last character ends a subword ("end") and hypotheses whose last character
continues an open subword ("con"). The boundary after the previous character is
decided one step late by comparing whole-sequence probabilities across both
beams. `mixture_beam_search` is the plain subword-level baseline.

Both decoders only talk to a `DecodingModel`: something that advances a history
state by one character and exposes, for a history, the distribution over the
next subword (`SubwordContext`). `NeuralDecodingModel` adapts the trained
network; `TableModel` wraps hand-written probability tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .model import SegmentalModel, SourceEncoding
from .textproc import EOS_ID, EOT_ID, CharVocab, Lexicon, is_separator

NEG_INF = -math.inf


def _logsumexp(a: np.ndarray) -> float:
    if a.size == 0:
        return NEG_INF
    mx = a.max()
    if not np.isfinite(mx):
        return NEG_INF
    return float(mx + np.log(np.exp(a - mx).sum()))


def _log1mexp(x: np.ndarray) -> np.ndarray:
    """log(1 - exp(x)) for x <= 0, accurate near 0."""
    x = np.minimum(x, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(x > -0.693, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


class SubwordContext(Protocol):
    def end_logprobs(self, prefix: tuple[int, ...]) -> np.ndarray:
        """log P(subword = prefix + y) for each y in the model alphabet."""

    def con_logprobs(self, prefix: tuple[int, ...]) -> np.ndarray:
        """log of the mass of subwords strictly extending prefix + y, for each y."""

    def segment_logprob(self, seg: tuple[int, ...]) -> float: ...

    def continue_logmass(self, prefix: tuple[int, ...]) -> float: ...

    def candidates(self, beam: int) -> list[tuple[int, ...]]: ...


class DecodingModel(Protocol):
    alphabet: np.ndarray  # character ids the generator may emit
    m: int

    def is_separator(self, cid: int) -> bool: ...

    def root(self): ...

    def extend(self, states: list, chars: list[int]) -> list: ...

    def context(self, state) -> SubwordContext: ...


# --------------------------------------------------------------------------- #
# hypotheses
# --------------------------------------------------------------------------- #


@dataclass
class Hypothesis:
    chars: tuple[int, ...]
    ends: tuple[int, ...]  # positions where a subword ends (exclusive end index)
    state: object  # history state covering `chars`
    completed: float  # log-prob of the completed subwords
    cum_logprob: float  # completed (+ open-subword prefix mass for con)
    flavor: str  # "end" | "con"
    cur_start: int  # start of the open subword; len(chars) for end
    ctx: object | None = None  # SubwordContext at cur_start (con only)
    finished: bool = False

    @property
    def open_prefix(self) -> tuple[int, ...]:
        return self.chars[self.cur_start:]


@dataclass
class DecodeResult:
    chars: tuple[int, ...]
    ends: tuple[int, ...]
    logprob: float
    truncated: bool = False
    steps: list = field(default_factory=list, repr=False)


@dataclass
class BeamConfig:
    beam: int = 5
    max_chars: int = 400
    delimiter: str = "-"
    verbatim_char_terms: bool = False
    length_normalize: bool = False

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam size must be >= 1")


# --------------------------------------------------------------------------- #
# four next-character cases
# --------------------------------------------------------------------------- #


def _masks(model: DecodingModel, open_len: int) -> tuple[np.ndarray, np.ndarray]:
    """(end allowed, con allowed) over the alphabet given the open subword length."""
    sep = np.array([model.is_separator(int(c)) for c in model.alphabet])
    end_ok = ~sep if open_len > 0 else np.ones_like(sep)
    con_ok = ~sep if open_len + 1 < model.m else np.zeros_like(sep)
    return end_ok, con_ok


def p_end_end(model: DecodingModel, hyp: Hypothesis) -> np.ndarray:
    """Next character ends a one-character subword (previous character ended one)."""
    assert hyp.flavor == "end"
    return _case(model, model.context(hyp.state), (), end=True)


def p_end_con(model: DecodingModel, hyp: Hypothesis) -> np.ndarray:
    """Next character starts a longer subword: mass of subwords extending it."""
    assert hyp.flavor == "end"
    return _case(model, model.context(hyp.state), (), end=False)


def p_con_end(model: DecodingModel, hyp: Hypothesis) -> np.ndarray:
    """Next character completes the open subword (joint probability of the whole subword)."""
    assert hyp.flavor == "con"
    return _case(model, hyp.ctx, hyp.open_prefix, end=True)


def p_con_con(model: DecodingModel, hyp: Hypothesis) -> np.ndarray:
    """Next character extends the open subword, which stays open."""
    assert hyp.flavor == "con"
    return _case(model, hyp.ctx, hyp.open_prefix, end=False)


def _case(model: DecodingModel, ctx: SubwordContext, prefix: tuple[int, ...], end: bool) -> np.ndarray:
    end_ok, con_ok = _masks(model, len(prefix))
    if end:
        return np.where(end_ok, np.exp(ctx.end_logprobs(prefix)), 0.0)
    if not con_ok.any():
        return np.zeros(len(model.alphabet))
    return np.where(con_ok, np.exp(ctx.con_logprobs(prefix)), 0.0)


def _case_log(model, ctx, prefix, end) -> np.ndarray:
    end_ok, con_ok = _masks(model, len(prefix))
    if end:
        return np.where(end_ok, ctx.end_logprobs(prefix), NEG_INF)
    if not con_ok.any():
        return np.full(len(model.alphabet), NEG_INF)
    return np.where(con_ok, ctx.con_logprobs(prefix), NEG_INF)


# --------------------------------------------------------------------------- #
# dynamic decoding
# --------------------------------------------------------------------------- #


def dynamic_decode(model: DecodingModel, cfg: BeamConfig = BeamConfig(), trace: bool = False) -> DecodeResult:
    """Character-level beam search over (sequence, last-boundary) states.

    With beam 1 this is exactly the greedy two-hypothesis procedure: the best
    continuing and best ending hypothesis are re-chosen every step from the four
    extensions of the previous pair. Ties favor extensions of the end-flavored
    parent. Finished hypotheses stay in the end beam; decoding stops when the
    best end hypothesis has emitted end-of-translation and no continuing
    hypothesis scores higher.
    """
    B = cfg.beam
    root = Hypothesis((), (), model.root(), 0.0, 0.0, "end", 0)
    ends: list[Hypothesis] = [root]
    cons: list[Hypothesis] = []
    steps = []
    alphabet = [int(c) for c in model.alphabet]
    eot = EOT_ID

    for _ in range(cfg.max_chars):
        end_cands, con_cands = [], []
        # parent order: end parents first so that stable sorting breaks ties toward them
        for rank, hyp in enumerate(ends):
            if hyp.finished:
                end_cands.append((hyp.cum_logprob, 0, rank, -1, hyp, None))
                continue
            ctx = model.context(hyp.state)
            ee = _case_log(model, ctx, (), end=True)
            ec = _case_log(model, ctx, (), end=False)
            for yi, y in enumerate(alphabet):
                if ee[yi] > NEG_INF:
                    end_cands.append((hyp.completed + ee[yi], 0, rank, yi, hyp, "end"))
                if ec[yi] > NEG_INF:
                    con_cands.append((hyp.completed + ec[yi], 0, rank, yi, hyp, "con"))
        for rank, hyp in enumerate(cons):
            pre = hyp.open_prefix
            ce = _case_log(model, hyp.ctx, pre, end=True)
            cc = _case_log(model, hyp.ctx, pre, end=False)
            for yi, y in enumerate(alphabet):
                if ce[yi] > NEG_INF:
                    end_cands.append((hyp.completed + ce[yi], 1, rank, yi, hyp, "end"))
                if cc[yi] > NEG_INF:
                    con_cands.append((hyp.completed + cc[yi], 1, rank, yi, hyp, "con"))

        def key(c):
            score = c[0]
            if cfg.length_normalize:
                score = score / (len(c[4].chars) + 1)
            return (-score, c[1], c[2], c[3])

        end_sel = sorted(end_cands, key=key)[:B]
        con_sel = sorted(con_cands, key=key)[:B]

        # one batched decoder step for every distinct (parent, char) that survives
        pending: dict[tuple[int, int], tuple] = {}
        for c in end_sel + con_sel:
            if c[5] is None:
                continue
            pending.setdefault((id(c[4]), c[3]), (c[4], alphabet[c[3]]))
        keys = list(pending)
        new_states = model.extend([pending[k][0].state for k in keys], [pending[k][1] for k in keys]) if keys else []
        state_of = dict(zip(keys, new_states))

        new_ends, new_cons = [], []
        for score, pflav, _, yi, parent, kind in end_sel:
            if kind is None:
                new_ends.append(parent)
                continue
            y = alphabet[yi]
            chars = parent.chars + (y,)
            new_ends.append(Hypothesis(chars, parent.ends + (len(chars),), state_of[(id(parent), yi)],
                                       score, score, "end", len(chars), finished=(y == eot)))
        for score, pflav, _, yi, parent, kind in con_sel:
            y = alphabet[yi]
            chars = parent.chars + (y,)
            if parent.flavor == "end":
                ctx, start, done = model.context(parent.state), len(parent.chars), parent.completed
            else:
                ctx, start, done = parent.ctx, parent.cur_start, parent.completed
            new_cons.append(Hypothesis(chars, parent.ends, state_of[(id(parent), yi)],
                                       done, score, "con", start, ctx))
        ends, cons = new_ends, new_cons
        if trace:
            steps.append(([(h.chars, h.ends, h.cum_logprob) for h in ends],
                          [(h.chars, h.ends, h.cum_logprob) for h in cons]))
        if not ends:
            break
        # a finished hypothesis is returned only once no open hypothesis outscores
        # it; extensions never increase a score
        if ends[0].finished and (not cons or ends[0].cum_logprob >= cons[0].cum_logprob):
            best = ends[0]
            return DecodeResult(best.chars, best.ends, best.cum_logprob, False, steps)

    best = ends[0] if ends else root
    return DecodeResult(best.chars, best.ends, best.cum_logprob, True, steps)


# --------------------------------------------------------------------------- #
# subword-level beam search baseline
# --------------------------------------------------------------------------- #


@dataclass
class _SubHyp:
    chars: tuple[int, ...]
    ends: tuple[int, ...]
    state: object
    score: float
    finished: bool = False


def _legal_subword(model: DecodingModel, seg: tuple[int, ...]) -> bool:
    if not 1 <= len(seg) <= model.m:
        return False
    if len(seg) == 1:
        return True
    return not any(model.is_separator(c) for c in seg)


def mixture_beam_search(model: DecodingModel, cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Beam search in which each expansion appends one complete subword.

    Candidate subwords come from the top of the lexicon distribution and from a
    character-level beam over the char decoder; each is scored by the full
    mixture probability.
    """
    B = cfg.beam
    beam = [_SubHyp((), (), model.root(), 0.0)]
    while True:
        cands = []
        for rank, hyp in enumerate(beam):
            if hyp.finished:
                cands.append((hyp.score, rank, (), hyp))
                continue
            ctx = model.context(hyp.state)
            for seg in ctx.candidates(B):
                if _legal_subword(model, seg):
                    cands.append((hyp.score + ctx.segment_logprob(seg), rank, seg, hyp))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        chosen = cands[:B]
        new_beam = []
        for score, _, seg, parent in chosen:
            if not seg:
                new_beam.append(parent)
                continue
            state = parent.state
            for c in seg:
                state = model.extend([state], [c])[0]
            chars = parent.chars + seg
            new_beam.append(_SubHyp(chars, parent.ends + (len(chars),), state, score, seg[-1] == EOT_ID))
        beam = new_beam
        if beam[0].finished:
            best = beam[0]
            return DecodeResult(best.chars, best.ends, best.score, False)
        if all(len(h.chars) >= cfg.max_chars for h in beam if not h.finished):
            break
    best = beam[0]
    return DecodeResult(best.chars, best.ends, best.score, True)


# --------------------------------------------------------------------------- #
# offline rescoring
# --------------------------------------------------------------------------- #


def rescore(model: DecodingModel, chars: Sequence[int], ends: Sequence[int], open_start: int | None = None) -> float:
    """Chain-rule log-probability of a (partial) segmentation.

    With `open_start`, the characters after it form an open subword scored by its
    continuation mass.
    """
    state = model.root()
    pos, total = 0, 0.0
    states = {0: state}
    for e in ends:
        ctx = model.context(states[pos])
        total += ctx.segment_logprob(tuple(chars[pos:e]))
        for c in chars[pos:e]:
            state = model.extend([state], [c])[0]
        pos = e
        states[pos] = state
    if open_start is not None and open_start < len(chars):
        ctx = model.context(states[open_start])
        total += ctx.continue_logmass(tuple(chars[open_start:]))
    return total


# --------------------------------------------------------------------------- #
# model adapters
# --------------------------------------------------------------------------- #


class TableModel:
    """Decoding model backed by explicit next-subword tables.

    `tables` maps a history string to {subword: probability}; the empty string is
    the start. Missing histories fall back to `default` if given.
    """

    def __init__(self, chars: str, tables: dict[str, dict[str, float]], m: int,
                 default: dict[str, float] | None = None, eot: str = "\x03"):
        self.symbols = [eot] + [c for c in chars if c != eot]
        self.char_id = {c: (EOT_ID if c == eot else 4 + i) for i, c in enumerate(self.symbols[1:])}
        self.char_id[eot] = EOT_ID
        self.id_char = {v: k for k, v in self.char_id.items()}
        self.alphabet = np.array([self.char_id[c] for c in self.symbols])
        self.tables = tables
        self.default = default
        self.m = m
        self.eot = eot

    def is_separator(self, cid: int) -> bool:
        return is_separator(self.id_char[cid])

    def text(self, ids: Sequence[int]) -> str:
        return "".join(self.id_char[i] for i in ids)

    def ids(self, text: str) -> tuple[int, ...]:
        return tuple(self.char_id[c] for c in text)

    def root(self):
        return ""

    def extend(self, states, chars):
        return [s + self.id_char[c] for s, c in zip(states, chars)]

    def context(self, state):
        table = self.tables.get(state, self.default)
        if table is None:
            raise KeyError(f"no table for history {state!r}")
        return _TableContext(self, table)


class _TableContext:
    def __init__(self, model: TableModel, table: dict[str, float]):
        self.model = model
        self.table = table

    def _logp(self, s: str) -> float:
        p = self.table.get(s, 0.0)
        return math.log(p) if p > 0 else NEG_INF

    def end_logprobs(self, prefix):
        u = self.model.text(prefix)
        return np.array([self._logp(u + c) for c in self.model.symbols])

    def con_logprobs(self, prefix):
        u = self.model.text(prefix)
        out = []
        for c in self.model.symbols:
            mass = sum(p for s, p in self.table.items() if len(s) > len(u) + 1 and s.startswith(u + c))
            out.append(math.log(mass) if mass > 0 else NEG_INF)
        return np.array(out)

    def segment_logprob(self, seg):
        return self._logp(self.model.text(seg))

    def continue_logmass(self, prefix):
        u = self.model.text(prefix)
        mass = sum(p for s, p in self.table.items() if len(s) > len(u) and s.startswith(u))
        return math.log(mass) if mass > 0 else NEG_INF

    def candidates(self, beam):
        ranked = sorted(self.table.items(), key=lambda kv: (-kv[1], kv[0]))
        return [self.model.ids(s) for s, _ in ranked]


class NeuralDecodingModel:
    """Adapter exposing a trained SegmentalModel to the decoders for one source sentence."""

    def __init__(self, model: SegmentalModel, enc: SourceEncoding, vocab: CharVocab, lex: Lexicon,
                 verbatim_char_terms: bool = False):
        self.net = model
        self.enc = enc
        self.vocab = vocab
        self.lex = lex
        self.m = model.m
        self.verbatim = verbatim_char_terms
        self.alphabet = np.array(vocab.generable_ids())
        self._sep = {int(c): is_separator(vocab.char_of(int(c))) for c in self.alphabet}
        # lexicon id of every alphabet character's string, for extension lookups
        self._chars = [vocab.char_of(int(c)) for c in self.alphabet]

    def is_separator(self, cid: int) -> bool:
        return self._sep[cid]

    @torch.no_grad()
    def root(self):
        return self.net.start_state(self.enc)

    @torch.no_grad()
    def extend(self, states, chars):
        return self.net.advance(list(states), list(chars), self.enc)

    @torch.no_grad()
    def context(self, state):
        ctx = getattr(state, "_ctx", None)
        if ctx is None:
            ctx = _NeuralContext(self, state.hidden[-1])
            state._ctx = ctx
        return ctx


class _NeuralContext:
    def __init__(self, dm: NeuralDecodingModel, h: torch.Tensor):
        net = dm.net
        self.dm = dm
        self.net = net
        logit = net.gate_logits(h)
        self.log_g = float(torch.nn.functional.logsigmoid(logit))
        self.log_1mg = float(torch.nn.functional.logsigmoid(-logit))
        self.lexlp = net.lex_logprobs(h).double().numpy()
        h0, c0 = net.lstm_init(h.unsqueeze(0))
        self._init = (h0, c0)
        self._char_cache: dict[tuple, tuple] = {}
        self._exp_cache: dict[tuple, tuple] = {}
        self._alpha_t = torch.as_tensor(dm.alphabet, dtype=torch.long)

    def _text(self, prefix):
        return self.dm.vocab.decode(prefix)

    @torch.no_grad()
    def _char(self, prefix: tuple[int, ...]):
        """(log p_char of the prefix chars, lstm state after them, next-char log-probs)."""
        hit = self._char_cache.get(prefix)
        if hit is not None:
            return hit
        if not prefix:
            q, st = self.net.char_step(self._init, torch.tensor([EOS_ID]), 0)
            out = (0.0, st, q[0].double().numpy())
        else:
            lp, st, q = self._char(prefix[:-1])
            c = prefix[-1]
            q2, st2 = self.net.char_step(st, torch.tensor([c]), len(prefix))
            out = (lp + float(q[c]), st2, q2[0].double().numpy())
        self._char_cache[prefix] = out
        return out

    @torch.no_grad()
    def _expand(self, prefix):
        """Char-path (end, con) log terms for every alphabet character after `prefix`."""
        hit = self._exp_cache.get(prefix)
        if hit is not None:
            return hit
        m = self.dm.m
        L = len(prefix)
        lp, st, q = self._char(prefix)
        base = lp + q[self.dm.alphabet]
        if L + 1 >= m:
            char_end = base
            char_con = np.full_like(base, NEG_INF)
        else:
            A = len(self.dm.alphabet)
            st_rep = (st[0].expand(A, -1), st[1].expand(A, -1))
            q2, _ = self.net.char_step(st_rep, self._alpha_t, L + 1)
            eos = q2[:, EOS_ID].double().numpy()
            char_end = base + eos
            char_con = base if self.dm.verbatim else base + _log1mexp(eos)
        out = (char_end, char_con)
        self._exp_cache[prefix] = out
        return out

    def _lex_terms(self, prefix):
        lex = self.dm.lex
        u = self._text(prefix)
        end, con = [], []
        for ch in self.dm._chars:
            s = u + ch
            i = lex.id_of(s)
            end.append(self.lexlp[i] if i >= 0 else NEG_INF)
            ids = lex.prefix_array(s, exclude_exact=True)
            con.append(_logsumexp(self.lexlp[ids]))
        return np.array(end), np.array(con)

    def end_logprobs(self, prefix):
        char_end, _ = self._expand(prefix)
        lex_end, _ = self._lex_terms(prefix)
        return np.logaddexp(self.log_g + char_end, self.log_1mg + lex_end)

    def con_logprobs(self, prefix):
        _, char_con = self._expand(prefix)
        _, lex_con = self._lex_terms(prefix)
        return np.logaddexp(self.log_g + char_con, self.log_1mg + lex_con)

    def segment_logprob(self, seg):
        lp, _, q = self._char(tuple(seg))
        char = lp + (float(q[EOS_ID]) if len(seg) < self.dm.m else 0.0)
        i = self.dm.lex.id_of(self._text(seg))
        lex = self.lexlp[i] if i >= 0 else NEG_INF
        return float(np.logaddexp(self.log_g + char, self.log_1mg + lex))

    def continue_logmass(self, prefix):
        lp, _, q = self._char(tuple(prefix))
        if len(prefix) >= self.dm.m:
            return NEG_INF
        char = lp if self.dm.verbatim else lp + float(_log1mexp(np.array(q[EOS_ID])))
        ids = self.dm.lex.prefix_array(self._text(prefix), exclude_exact=True)
        lex = _logsumexp(self.lexlp[ids])
        return float(np.logaddexp(self.log_g + char, self.log_1mg + lex))

    def candidates(self, beam):
        """Top lexicon entries by lexicon probability plus the char decoder's top subwords."""
        lex = self.dm.lex
        order = np.argsort(-self.lexlp, kind="stable")[:beam]
        out = [tuple(self.dm.vocab.encode(lex.entries[i])) for i in order]
        for seg in self._char_beam(beam):
            if seg not in out:
                out.append(seg)
        return out

    def _char_beam(self, beam):
        m = self.dm.m
        live = [((), 0.0)]
        done = []
        for L in range(m):
            nxt = []
            for prefix, _ in live:
                lp, _, q = self._char(prefix)
                for c in self.dm.alphabet:
                    c = int(c)
                    seg = prefix + (c,)
                    s = lp + float(q[c])
                    if L + 1 == m:
                        done.append((s, seg))
                    else:
                        nxt.append((s, seg))
            nxt.sort(key=lambda t: -t[0])
            live = []
            for s, seg in nxt[:beam]:
                _, _, q2 = self._char(seg)
                done.append((s + float(q2[EOS_ID]), seg))
                live.append((seg, s))
        done.sort(key=lambda t: -t[0])
        return [seg for _, seg in done[:beam]]


def decode_text(vocab: CharVocab, result: DecodeResult) -> str:
    return vocab.decode([c for c in result.chars if c != EOT_ID])
