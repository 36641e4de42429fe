import math
import random

import pytest
import torch

from segmt import numerics as nx
from segmt.pipeline import build_artifacts
from segmt.training import (TrainConfig, batch_logprob, char_batches, collate, load_model, new_train_state,
                            nll_and_grad, restore_optimizer, save_model, train_step)


@pytest.fixture(scope="module")
def copy_task():
    rng = random.Random(0)
    words = ["ka", "lo", "mi", "tu"]
    lines = [" ".join(rng.choice(words) + rng.choice(words) for _ in range(2)) for _ in range(20)]
    art = build_artifacts(lines, lines, n_merges=10, lexicon_size=20, max_seg_len=3)
    examples = [art.example(s, s) for s in lines]
    return art, examples


def small_model(art, seed=0):
    from segmt.model import SegmentalModel
    return SegmentalModel(art.model_config(d_model=16, enc_layers=1, dec_layers=1, n_heads=2, d_ff=16,
                                           lstm_dim=16, seed=seed))


def test_loss_positive_and_finite(copy_task):
    art, examples = copy_task
    model = small_model(art)
    loss, grads = nll_and_grad(model, examples[:4])
    assert math.isfinite(loss) and loss > 0
    assert all(torch.isfinite(g).all() for g in grads.values())


def test_batch_invariance(copy_task):
    art, examples = copy_task
    model = small_model(art)
    with torch.no_grad():
        together = batch_logprob(model, collate(examples[:5], art.m))
        for i in range(5):
            alone = batch_logprob(model, collate([examples[i]], art.m))
            assert float(together[i]) == pytest.approx(float(alone[0]), abs=1e-7)


def test_loss_decreases(copy_task):
    art, examples = copy_task
    model = small_model(art)
    opt = nx.Adam(model.named_param_map(), lr=3e-3)
    first = last = None
    for step in range(50):
        loss = train_step(model, opt, examples, grad_clip=5.0)
        assert math.isfinite(loss)
        first = loss if first is None else first
        last = loss
    assert last < 0.7 * first


def test_char_batches_cover_everything(copy_task):
    _, examples = copy_task
    batches = char_batches(examples, 40, random.Random(0))
    assert sorted(i for b in batches for i in b) == list(range(len(examples)))
    for b in batches:
        assert len(b) == 1 or sum(examples[i].n_chars for i in b) <= 40


def test_nan_loss_aborts(copy_task):
    art, examples = copy_task
    model = small_model(art)
    with torch.no_grad():
        model.lex_head.weight.fill_(float("nan"))
    opt = nx.Adam(model.named_param_map())
    with pytest.raises(nx.NumericalError):
        train_step(model, opt, examples[:2], grad_clip=None)


def test_resume_reproduces_next_step(copy_task, tmp_path):
    art, examples = copy_task
    model = small_model(art)
    state = new_train_state(model, TrainConfig(lr=2e-3))
    for _ in range(3):
        train_step(model, state.opt, examples[:10], 5.0)
    save_model(tmp_path / "last.ckpt", model, {"step": 3}, opt=state.opt, dtype="f8")
    train_step(model, state.opt, examples[:10], 5.0)
    expected = train_step(model, state.opt, examples[10:], 5.0)

    back, header, arrays = load_model(tmp_path / "last.ckpt")
    opt = restore_optimizer(back, header, arrays)
    assert opt.t == 3
    train_step(back, opt, examples[:10], 5.0)
    got = train_step(back, opt, examples[10:], 5.0)
    assert got == pytest.approx(expected, abs=1e-6)


def test_f4_checkpoint_round_trip(copy_task, tmp_path):
    art, _ = copy_task
    model = small_model(art).float()
    save_model(tmp_path / "m.ckpt", model)
    back, header, _ = load_model(tmp_path / "m.ckpt", dtype=torch.float32)
    assert header["model_config"] == model.cfg.to_dict()
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert a.numpy().tobytes() == b.numpy().tobytes(), k
