import itertools
import math
import random

import numpy as np
import pytest
import torch

from segmt.decoder import (BeamConfig, Hypothesis, NeuralDecodingModel, TableModel, dynamic_decode,
                           mixture_beam_search, p_con_con, p_con_end, p_end_con, p_end_end, rescore)
from segmt.model import SegmentalModel
from segmt.textproc import EOS_ID, EOT_CHAR, PAD_ID, CharVocab, Lexicon, is_separator

from conftest import tiny_config

E = EOT_CHAR


def decoded(tm: TableModel, res):
    return tm.text(res.chars), list(res.ends)


# --------------------------------------------------------------------------- #
# hand traces on explicit tables
# --------------------------------------------------------------------------- #


def test_hand_trace_boundary_is_revised():
    # step 1: end "a|" (.5) vs con "a.." (.3, the mass of "ab")
    # step 2: end cands a|a| .05, a|b| .25, a|<eot> .20, ab| .30 -> ab| wins; con set empties (m=2)
    # step 3: ab|<eot> .27 beats ab|a| .03 and finishes
    tables = {"": {"a": 0.5, "ab": 0.3, "b": 0.1, E: 0.1},
              "a": {"a": 0.1, "b": 0.5, E: 0.4},
              "ab": {"a": 0.1, E: 0.9}}
    tm = TableModel("ab", tables, m=2)
    res = dynamic_decode(tm, BeamConfig(beam=1), trace=True)
    assert decoded(tm, res) == ("ab" + E, [2, 3])
    assert res.logprob == pytest.approx(math.log(0.27), abs=1e-12)
    ends1, cons1 = res.steps[0]
    assert tm.text(ends1[0][0]) == "a" and ends1[0][2] == pytest.approx(math.log(0.5))
    assert tm.text(cons1[0][0]) == "a" and cons1[0][2] == pytest.approx(math.log(0.3))
    ends2, cons2 = res.steps[1]
    assert (tm.text(ends2[0][0]), ends2[0][1]) == ("ab", (2,))
    assert cons2 == []
    assert not res.truncated


def test_eot_waits_for_better_open_hypothesis():
    # after step 1 the best end hypothesis is <eot> (.3) but "a.." carries .7
    tables = {"": {E: 0.3, "ab": 0.7}, "ab": {E: 1.0}}
    tm = TableModel("ab", tables, m=2)
    res = dynamic_decode(tm, BeamConfig(beam=1))
    assert decoded(tm, res) == ("ab" + E, [2, 3])
    assert res.logprob == pytest.approx(math.log(0.7))


def test_tie_goes_to_end_parent():
    tables = {"": {"a": 0.5, "ab": 0.5}, "a": {"b": 1.0}, "ab": {E: 1.0}}
    tm = TableModel("ab", tables, m=2)
    res = dynamic_decode(tm, BeamConfig(beam=1))
    assert decoded(tm, res) == ("ab" + E, [1, 2, 3])


def test_truncation_flag():
    tables = {}
    tm = TableModel("a", tables, m=2, default={"a": 1.0})
    res = dynamic_decode(tm, BeamConfig(beam=1, max_chars=6))
    assert res.truncated and tm.text(res.chars) == "a" * 6


def test_copy_model():
    target = "ab ba." + E
    tables = {target[:i]: {target[i]: 1.0} for i in range(len(target))}
    tm = TableModel("ab .", tables, m=3)
    for beam in (1, 5):
        assert tm.text(dynamic_decode(tm, BeamConfig(beam=beam)).chars) == target
        assert tm.text(mixture_beam_search(tm, BeamConfig(beam=beam)).chars) == target


# --------------------------------------------------------------------------- #
# reference implementation of the two-hypothesis loop, straight from the tables
# --------------------------------------------------------------------------- #


def reference_decode(tables, default, m, symbols, max_steps=20):
    P = lambda hist, s: tables.get(hist, default).get(s, 0.0)

    def mass_beyond(hist, u):
        return sum(p for s, p in tables.get(hist, default).items() if len(s) > len(u) and s.startswith(u))

    end = dict(text="", ends=(), p=1.0, done=False)
    con = None
    for _ in range(max_steps):
        ends, cons = [], []
        if end["done"]:
            ends.append(end)
        else:
            for y in symbols:
                p = end["p"] * P(end["text"], y)
                if p > 0:
                    t = end["text"] + y
                    ends.append(dict(text=t, ends=end["ends"] + (len(t),), p=p, done=y == E))
            for y in symbols:
                if is_separator(y) or m < 2:
                    continue
                p = end["p"] * mass_beyond(end["text"], y)
                if p > 0:
                    cons.append(dict(text=end["text"] + y, ends=end["ends"], start=len(end["text"]),
                                     done_p=end["p"], p=p))
        if con is not None:
            hist, u = con["text"][:con["start"]], con["text"][con["start"]:]
            for y in symbols:
                if is_separator(y):
                    continue
                p = con["done_p"] * P(hist, u + y)
                if p > 0:
                    t = con["text"] + y
                    ends.append(dict(text=t, ends=con["ends"] + (len(t),), p=p, done=False))
            if len(u) + 1 < m:
                for y in symbols:
                    if is_separator(y):
                        continue
                    p = con["done_p"] * mass_beyond(hist, u + y)
                    if p > 0:
                        cons.append(dict(text=con["text"] + y, ends=con["ends"], start=con["start"],
                                         done_p=con["done_p"], p=p))
        best = lambda cands: max(cands, key=lambda c: c["p"]) if cands else None  # first maximum wins
        end, con = best(ends), best(cons)
        if end is None:
            return None
        if end["done"] and (con is None or end["p"] >= con["p"]):
            return end["text"], list(end["ends"]), math.log(end["p"])
    return None


def random_tables(rng: random.Random, letters="ab", seps=" ", m=3, depth=3):
    symbols = list(letters + seps) + [E]
    words = [s for n in range(2, m + 1) for s in map("".join, itertools.product(letters, repeat=n))]

    def table(force_end):
        if force_end:
            return {E: 1.0}
        keys = rng.sample(symbols, rng.randint(1, len(symbols))) + rng.sample(words, rng.randint(0, min(4, len(words))))
        w = [rng.random() + 0.05 for _ in keys]
        z = sum(w)
        return {k: v / z for k, v in zip(keys, w)}

    tables = {}
    for n in range(depth + 1):
        for hist in map("".join, itertools.product(letters + seps, repeat=n)):
            tables[hist] = table(n == depth)
    return tables, symbols


@pytest.mark.parametrize("seed", range(60))
def test_matches_reference_on_random_tables(seed):
    rng = random.Random(seed)
    m = rng.choice([1, 2, 3])
    tables, symbols = random_tables(rng, m=m, depth=rng.choice([2, 3]))
    tm = TableModel("ab ", tables, m=m, default={E: 1.0})
    want = reference_decode(tables, {E: 1.0}, m, symbols)
    res = dynamic_decode(tm, BeamConfig(beam=1))
    got = (tm.text(res.chars), list(res.ends))
    assert want is not None and got == want[:2]
    assert res.logprob == pytest.approx(want[2], abs=1e-9)


@pytest.mark.parametrize("seed", range(30))
@pytest.mark.parametrize("beam", [1, 3])
def test_scores_match_offline_rescoring(seed, beam):
    rng = random.Random(1000 + seed)
    m = rng.choice([2, 3])
    tables, _ = random_tables(rng, m=m)
    tm = TableModel("ab ", tables, m=m, default={E: 1.0})
    res = dynamic_decode(tm, BeamConfig(beam=beam), trace=True)
    assert rescore(tm, res.chars, res.ends) == pytest.approx(res.logprob, abs=1e-6)
    for ends, cons in res.steps:
        for chars, bounds, score in ends:
            assert bounds[-1] == len(chars)
            assert rescore(tm, chars, bounds) == pytest.approx(score, abs=1e-6)
        for chars, bounds, score in cons:
            start = bounds[-1] if bounds else 0
            assert start < len(chars)
            assert rescore(tm, chars, bounds, open_start=start) == pytest.approx(score, abs=1e-6)
    mix = mixture_beam_search(tm, BeamConfig(beam=beam))
    assert rescore(tm, mix.chars, mix.ends) == pytest.approx(mix.logprob, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_segments_are_legal(seed):
    rng = random.Random(2000 + seed)
    m = rng.choice([2, 3])
    tables, _ = random_tables(rng, m=m)
    tm = TableModel("ab ", tables, m=m, default={E: 1.0})
    for res in (dynamic_decode(tm, BeamConfig(beam=3)), mixture_beam_search(tm, BeamConfig(beam=3))):
        start = 0
        for e in res.ends:
            seg = tm.text(res.chars[start:e])
            assert 1 <= len(seg) <= m
            assert len(seg) == 1 or not any(is_separator(c) for c in seg)
            start = e


def test_deterministic():
    rng = random.Random(7)
    tables, _ = random_tables(rng)
    tm = TableModel("ab ", tables, m=3, default={E: 1.0})
    a = dynamic_decode(tm, BeamConfig(beam=4))
    b = dynamic_decode(tm, BeamConfig(beam=4))
    assert (a.chars, a.ends, a.logprob) == (b.chars, b.ends, b.logprob)


# --------------------------------------------------------------------------- #
# four-case probabilities on the neural model
# --------------------------------------------------------------------------- #


@pytest.fixture
def neural():
    vocab = CharVocab("ab ")
    lex = Lexicon(["a", "b", "ab", "ba", "aab", "bb"], 3)
    model = SegmentalModel(tiny_config(vocab, lex, 3, seed=11))
    with torch.no_grad():
        enc = model.encode(torch.tensor([2, 3]))
    return NeuralDecodingModel(model, enc, vocab, lex), vocab, lex, model, enc


def scoring_ids(model):
    return [i for i in range(model.cfg.char_vocab_size) if i not in (PAD_ID, EOS_ID)]


def brute_segment_prob(model, h, vocab, lex, seg):
    with torch.no_grad():
        text = vocab.decode(seg) if all(c >= 3 for c in seg) else ""
        lid = lex.id_of(text) if text else -1
        return math.exp(float(model.segment_score_tensor(h, seg, lid)))


def test_case_probabilities_against_enumeration(neural):
    dm, vocab, lex, model, enc = neural
    state = dm.extend([dm.root()], vocab.encode("b"))[0]
    ctx = dm.context(state)
    h = model.decode_history(vocab.encode("b"), enc).hidden[1]
    ids = scoring_ids(model)
    for prefix in [(), tuple(vocab.encode("a")), tuple(vocab.encode("ab"))]:
        end = np.exp(ctx.end_logprobs(prefix))
        con = np.exp(ctx.con_logprobs(prefix))
        for yi, y in enumerate(dm.alphabet):
            seg = prefix + (int(y),)
            assert end[yi] == pytest.approx(brute_segment_prob(model, h, vocab, lex, seg), abs=1e-9)
            beyond = sum(brute_segment_prob(model, h, vocab, lex, seg + tail)
                         for n in range(1, 3 - len(seg) + 1) for tail in itertools.product(ids, repeat=n))
            assert con[yi] == pytest.approx(beyond, abs=1e-9)


def test_cases_partition_the_open_subword(neural):
    dm, vocab, lex, model, enc = neural
    ctx = dm.context(dm.root())
    h = model.decode_history([], enc).hidden[0]
    ids = scoring_ids(model)
    gen = set(int(c) for c in dm.alphabet)
    for prefix in [(), tuple(vocab.encode("a"))]:
        total = float(np.exp(ctx.end_logprobs(prefix)).sum() + np.exp(ctx.con_logprobs(prefix)).sum())
        # every segment strictly extending the prefix whose next char is generable
        want = sum(brute_segment_prob(model, h, vocab, lex, prefix + tail)
                   for n in range(1, 3 - len(prefix) + 1) for tail in itertools.product(ids, repeat=n)
                   if tail[0] in gen)
        assert total == pytest.approx(want, abs=1e-9)
        if not prefix:
            assert total <= 1 + 1e-12


def test_con_end_matches_segment_logprob(neural):
    dm, vocab, lex, model, enc = neural
    root = dm.root()
    ctx = dm.context(root)
    st = model.decode_history([], enc)
    u = tuple(vocab.encode("ab"))
    for yi, y in enumerate(dm.alphabet):
        if is_separator(vocab.char_of(int(y))):
            continue
        seg = u + (int(y),)
        want = model.segment_logprob(st, 0, seg, vocab.decode(seg), lex).logprob
        assert ctx.end_logprobs(u)[yi] == pytest.approx(want, abs=1e-9)


def test_case_masks(neural):
    dm, vocab, lex, model, enc = neural
    root = dm.root()
    hyp_end = Hypothesis((), (), root, 0.0, 0.0, "end", 0)
    sep = np.array([dm.is_separator(int(c)) for c in dm.alphabet])
    assert np.all(p_end_con(dm, hyp_end)[sep] == 0)
    assert np.all(p_end_end(dm, hyp_end)[sep] > 0)
    a = vocab.encode("a")[0]
    one = dm.extend([root], [a])[0]
    hyp_con = Hypothesis((a,), (), one, 0.0, 0.0, "con", 0, dm.context(root))
    assert np.all(p_con_con(dm, hyp_con)[sep] == 0)
    assert np.all(p_con_end(dm, hyp_con)[sep] == 0)
    two = dm.extend([one], [a])[0]
    full = Hypothesis((a, a), (), two, 0.0, 0.0, "con", 0, dm.context(root))
    # open length m-1: the next char must end the subword
    assert np.all(p_con_con(dm, full) == 0)
    assert p_con_end(dm, full).sum() > 0


def test_gate_one_limit(neural):
    dm, vocab, lex, model, enc = neural
    with torch.no_grad():
        model.gate_head.weight.zero_()
        model.gate_head.bias.fill_(60.0)
    dm = NeuralDecodingModel(model, enc, vocab, lex)
    ctx = dm.context(dm.root())
    st = model.decode_history([], enc)
    for yi, y in enumerate(dm.alphabet):
        char = model.char_segment_logprob(st, 0, [int(y)])
        assert ctx.end_logprobs(())[yi] == pytest.approx(char, abs=1e-9)


def test_verbatim_flag_drops_eos_factor(neural):
    dm, vocab, lex, model, enc = neural
    plain = dm.context(dm.root())
    verb_dm = NeuralDecodingModel(model, enc, vocab, lex, verbatim_char_terms=True)
    verb = verb_dm.context(verb_dm.root())
    assert np.all(verb.con_logprobs(()) >= plain.con_logprobs(()) - 1e-12)
    assert np.allclose(verb.end_logprobs(()), plain.end_logprobs(()))


def test_neural_decode_scores_match_rescoring(neural):
    dm, vocab, lex, model, enc = neural
    for beam in (1, 3):
        res = dynamic_decode(dm, BeamConfig(beam=beam, max_chars=12), trace=True)
        assert rescore(dm, res.chars, res.ends) == pytest.approx(res.logprob, abs=1e-6)
        # the same segmentation scored through the model's per-segment API from scratch
        total, start = 0.0, 0
        for e in res.ends:
            st = model.decode_history(list(res.chars[:start]), enc)
            seg = list(res.chars[start:e])
            total += model.segment_logprob(st, start, seg, vocab.decode(seg), lex).logprob
            start = e
        assert total == pytest.approx(res.logprob, abs=1e-6)
        mix = mixture_beam_search(dm, BeamConfig(beam=beam, max_chars=12))
        assert rescore(dm, mix.chars, mix.ends) == pytest.approx(mix.logprob, abs=1e-6)
