import random

import pytest
import torch

from segmt.model import ModelConfig, SegmentalModel
from segmt.textproc import CharVocab, build_lexicon


def tiny_config(vocab: CharVocab, lex, m: int, seed: int = 0, **kw) -> ModelConfig:
    base = dict(src_vocab_size=6, char_vocab_size=len(vocab), lexicon_size=len(lex), max_seg_len=m,
                d_model=8, enc_layers=1, dec_layers=1, n_heads=2, d_ff=8, lstm_dim=6,
                max_positions=64, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def random_instance(rng: random.Random, max_len: int = 10, max_m: int = 4):
    """A tiny random model, source encoding, target string, vocab and lexicon."""
    letters = "abc"
    seps = " ."
    n = rng.randint(1, max_len)
    y = "".join(rng.choice(letters + seps) if rng.random() < 0.3 else rng.choice(letters) for _ in range(n))
    m = rng.randint(1, max_m)
    corpus = [y.replace(".", " ") + " abc", "ab ba ca"]
    vocab = CharVocab(sorted(set(letters + seps)))
    lex = build_lexicon(corpus, rng.randint(3, 12), m)
    model = SegmentalModel(tiny_config(vocab, lex, m, seed=rng.randrange(10_000)))
    src = torch.as_tensor([rng.randrange(2, 6) for _ in range(rng.randint(1, 4))])
    with torch.no_grad():
        enc = model.encode(src)
    return model, enc, y, vocab, lex


@pytest.fixture
def rng():
    return random.Random(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


TINY_RUN = """[paths]
train_src = train.src
train_tgt = train.tgt
valid_src = train.src
valid_tgt = train.tgt
artifacts_dir = art
checkpoint_dir = ck

[preprocess]
merges = 30
lexicon_size = 30
max_seg_len = 4

[model]
d_model = 16
enc_layers = 1
dec_layers = 1
n_heads = 2
d_ff = 16
lstm_dim = 16

[training]
max_epochs = 2
valid_sample = 5
valid_beam = 2
batch_chars = 800

[decoding]
beam = 2
max_chars = 60
"""


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A working directory with a preprocessed corpus and a briefly trained checkpoint."""
    import os

    from segmt.cli import main
    from segmt.synthetic import make_corpus, make_language

    root = tmp_path_factory.mktemp("run")
    pairs = make_corpus(make_language(0), 60, seed=1)
    (root / "train.src").write_text("".join(p.source + "\n" for p in pairs), encoding="utf-8")
    (root / "train.tgt").write_text("".join(p.target + "\n" for p in pairs), encoding="utf-8")
    (root / "train.seg").write_text("".join(p.segmented + "\n" for p in pairs), encoding="utf-8")
    (root / "run.ini").write_text(TINY_RUN, encoding="utf-8")
    cwd = os.getcwd()
    os.chdir(root)
    try:
        assert main(["preprocess", "--config", "run.ini"]) == 0
        assert main(["train", "--config", "run.ini"]) == 0
    finally:
        os.chdir(cwd)
    return root
