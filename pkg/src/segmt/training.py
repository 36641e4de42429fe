"""Marginal-likelihood training: example preparation, batching, loss, trainer loop."""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .lattice import forward_logprob, lexicon_ids, target_string, valid_cells
from .model import ModelConfig, SegmentalModel
from .textproc import PAD_ID, BpeModel, CharVocab, Lexicon, SourceVocab

log = logging.getLogger(__name__)


@dataclass
class Example:
    src: list[int]
    y: str  # target with end-of-translation appended
    tgt: list[int]
    valid: np.ndarray
    lex_ids: np.ndarray

    @property
    def n_chars(self) -> int:
        return len(self.tgt)


def make_example(src_ids: Sequence[int], target: str, vocab: CharVocab, lex: Lexicon, m: int) -> Example:
    y = target_string(target)
    if not src_ids:
        raise ValueError("empty source sentence")
    return Example(list(src_ids), y, vocab.encode(y), valid_cells(y, m), lexicon_ids(y, m, lex))


@dataclass
class Batch:
    src: torch.Tensor
    src_mask: torch.Tensor
    tgt: torch.Tensor
    lex_ids: torch.Tensor
    valid: torch.Tensor
    lengths: torch.Tensor


def collate(examples: Sequence[Example], m: int) -> Batch:
    B = len(examples)
    S = max(len(e.src) for e in examples)
    T = max(e.n_chars for e in examples)
    src = torch.full((B, S), PAD_ID, dtype=torch.long)
    tgt = torch.full((B, T), PAD_ID, dtype=torch.long)
    lid = torch.full((B, T, m), -1, dtype=torch.long)
    valid = torch.zeros((B, T, m), dtype=torch.bool)
    for i, e in enumerate(examples):
        src[i, : len(e.src)] = torch.as_tensor(e.src)
        tgt[i, : e.n_chars] = torch.as_tensor(e.tgt)
        lid[i, : e.n_chars] = torch.from_numpy(e.lex_ids)
        valid[i, : e.n_chars] = torch.from_numpy(e.valid)
    lengths = torch.as_tensor([e.n_chars for e in examples])
    return Batch(src, src.eq(PAD_ID), tgt, lid, valid, lengths)


def batch_logprob(model: SegmentalModel, batch: Batch) -> torch.Tensor:
    """log p(y | x) for each sentence in the batch, marginalized over segmentations."""
    enc = model.encode(batch.src, batch.src_mask)
    grid = model.grid_scores(enc, batch.tgt, batch.lex_ids, batch.valid)
    return forward_logprob(grid, batch.lengths)


def nll_and_grad(model: SegmentalModel, examples: Sequence[Example]) -> tuple[float, dict[str, torch.Tensor]]:
    """Summed negative log marginal likelihood and its gradient w.r.t. every parameter."""
    batch = collate(examples, model.m)
    return nx.reverse_gradient(lambda: -batch_logprob(model, batch).sum(), model.named_param_map())


def char_batches(examples: Sequence[Example], max_chars: int, rng: random.Random | None = None) -> list[list[int]]:
    """Group example indices so each batch holds at most `max_chars` target characters.

    Examples are bucketed by length before grouping so that padding stays small;
    batch order is shuffled when `rng` is given.
    """
    order = sorted(range(len(examples)), key=lambda i: (examples[i].n_chars, i))
    if rng is not None:
        # shuffle within coarse length buckets, then batch
        buckets: dict[int, list[int]] = {}
        for i in order:
            buckets.setdefault(examples[i].n_chars // 8, []).append(i)
        order = []
        for k in sorted(buckets):
            b = buckets[k]
            rng.shuffle(b)
            order.extend(b)
    batches, cur, longest = [], [], 0
    for i in order:
        n = examples[i].n_chars
        if cur and max(longest, n) * (len(cur) + 1) > max_chars:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    if rng is not None:
        rng.shuffle(batches)
    return batches


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_chars: int = 2000
    max_epochs: int = 50
    min_epochs: int = 1
    patience: int = 5
    seed: int = 0
    valid_sample: int = 200
    valid_beam: int = 5
    valid_every: int = 1
    time_budget: float | None = None  # seconds
    target_exact: float | None = None  # stop once validation exact match reaches this
    grad_clip: float | None = 5.0


@dataclass
class EpochLog:
    epoch: int
    train_loss: float  # per character
    valid_chrf: float | None
    valid_exact: float | None
    seconds: float


@dataclass
class TrainState:
    model: SegmentalModel
    opt: nx.Adam
    epoch: int = 0
    best_chrf: float = -1.0
    best_epoch: int = 0
    bad_epochs: int = 0
    history: list[EpochLog] = field(default_factory=list)
    rng_state: object = None


def new_train_state(model: SegmentalModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model, nx.Adam(model.named_param_map(), lr=cfg.lr))


def train_step(model: SegmentalModel, opt: nx.Adam, examples: Sequence[Example], grad_clip: float | None) -> float:
    loss, grads = nll_and_grad(model, examples)
    if not math.isfinite(loss):
        raise nx.NumericalError(f"non-finite loss {loss} on batch of {len(examples)} sentences")
    if grad_clip:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    opt.step(grads)
    return loss


def train(state: TrainState, train_set: Sequence[Example], cfg: TrainConfig,
          validate: Callable[[SegmentalModel], tuple[float, float]] | None = None,
          on_best: Callable[[TrainState], None] | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Epoch loop with early stopping on validation chrF.

    `validate(model) -> (chrF, exact-match fraction)`; `on_best` is called whenever
    validation improves (e.g. to write the best checkpoint).
    """
    rng = random.Random(cfg.seed)
    if state.rng_state is not None:
        rng.setstate(state.rng_state)
    t_start = time.perf_counter()
    model = state.model
    n_chars = sum(e.n_chars for e in train_set)
    while state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        state.rng_state = rng.getstate()
        total = 0.0
        model.train()
        for idx in char_batches(train_set, cfg.batch_chars, rng):
            total += train_step(model, state.opt, [train_set[i] for i in idx], cfg.grad_clip)
        state.epoch += 1
        chrf = exact = None
        if validate is not None and state.epoch % cfg.valid_every == 0:
            model.eval()
            chrf, exact = validate(model)
            if chrf > state.best_chrf:
                state.best_chrf, state.best_epoch, state.bad_epochs = chrf, state.epoch, 0
                if on_best:
                    on_best(state)
            else:
                state.bad_epochs += 1
        entry = EpochLog(state.epoch, total / n_chars, chrf, exact, time.perf_counter() - t0)
        state.history.append(entry)
        log.info("epoch %d loss/char %.4f chrF %s exact %s (%.1fs)", entry.epoch, entry.train_loss,
                 "-" if chrf is None else f"{chrf:.2f}", "-" if exact is None else f"{exact:.3f}", entry.seconds)
        state.rng_state = rng.getstate()
        if on_epoch:
            on_epoch(state)
        if cfg.target_exact is not None and exact is not None and exact >= cfg.target_exact:
            break
        if state.epoch >= cfg.min_epochs and state.bad_epochs >= cfg.patience:
            break
        if cfg.time_budget is not None and time.perf_counter() - t_start > cfg.time_budget:
            log.info("time budget reached after epoch %d", state.epoch)
            break
    return state


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #


def save_model(path: str | Path, model: SegmentalModel, extra: dict | None = None,
               opt: nx.Adam | None = None, dtype: str = "f4") -> None:
    arrays = model.state_arrays()
    header = {"model_config": model.cfg.to_dict(), **(extra or {})}
    if opt is not None:
        arrays.update(opt.state_arrays())
        header["adam_step"] = opt.t
        header["adam"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    nx.save_checkpoint(path, header, arrays, dtype=dtype)


def load_model(path: str | Path, dtype=torch.float64) -> tuple[SegmentalModel, dict, dict]:
    header, arrays = nx.load_checkpoint(path)
    model = SegmentalModel(ModelConfig(**header["model_config"]), dtype=dtype)
    model.load_arrays(arrays)
    return model, header, arrays


def restore_optimizer(model: SegmentalModel, header: dict, arrays: dict) -> nx.Adam:
    hp = header.get("adam", {})
    opt = nx.Adam(model.named_param_map(), **hp)
    if "adam_step" in header:
        opt.load_state_arrays(arrays, header["adam_step"])
    return opt


def encode_source(line: str, bpe: BpeModel, src_vocab: SourceVocab) -> list[int]:
    return src_vocab.encode(bpe.apply(line))
