"""Subword-segmental encoder-decoder.

A transformer encodes the BPE source; a causal character-level transformer
decoder reads the unsegmented target history; the next subword is scored by a
gate-weighted mixture of a character LSTM (seeded from the decoder state) and a
softmax over the lexicon.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import numerics as nx
from .textproc import EOS_ID, PAD_ID, UNK_ID, Lexicon

NEG_INF = float("-inf")


@dataclass
class ModelConfig:
    src_vocab_size: int
    char_vocab_size: int
    lexicon_size: int
    max_seg_len: int = 5
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    lstm_dim: int = 64
    max_positions: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.max_seg_len < 1:
            raise ValueError("max_seg_len must be >= 1")
        for name in ("src_vocab_size", "char_vocab_size", "lexicon_size", "d_model",
                     "n_heads", "d_ff", "lstm_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SourceEncoding:
    memory: torch.Tensor  # [B,S,d]
    pad_mask: torch.Tensor  # [B,S] True on padding
    cross_kv: list  # per decoder layer (k, v)

    def __len__(self):
        return int((~self.pad_mask[0]).sum())

    def select(self, rows: torch.Tensor | list[int]) -> "SourceEncoding":
        rows = torch.as_tensor(rows, dtype=torch.long)
        return SourceEncoding(self.memory[rows], self.pad_mask[rows],
                              [(k[rows], v[rows]) for k, v in self.cross_kv])


@dataclass
class DecoderState:
    """Hidden states h_0..h_n over a target prefix of n characters (h_0 precedes any character)."""

    hidden: torch.Tensor  # [n+1, d]
    cache: list | None = None  # per layer (k, v) with batch dim 1

    @property
    def length(self) -> int:
        return self.hidden.shape[0] - 1


@dataclass
class SegmentScore:
    logprob: float
    gate: float
    char_term: float
    lex_term: float


class SegmentalModel(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype=nx.DTYPE):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.src_emb = nn.Embedding(cfg.src_vocab_size, d)
        self.char_emb = nn.Embedding(cfg.char_vocab_size, d)
        self.encoder = nn.ModuleList(nx.EncoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.enc_layers))
        self.enc_ln = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(nx.DecoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.dec_layers))
        self.dec_ln = nn.LayerNorm(d)
        self.gate_head = nn.Linear(d, 1)
        self.lex_head = nn.Linear(d, cfg.lexicon_size)
        self.lstm_h0 = nn.Linear(d, cfg.lstm_dim)
        self.lstm_c0 = nn.Linear(d, cfg.lstm_dim)
        self.char_lstm = nn.LSTMCell(d, cfg.lstm_dim)
        self.char_out = nn.Linear(cfg.lstm_dim, cfg.char_vocab_size)

        gen = torch.Generator().manual_seed(cfg.seed)
        nx.fan_in_uniform_(self, gen)
        self.to(dtype)
        self.register_buffer("positions", nx.sinusoidal_positions(cfg.max_positions, d, dtype), persistent=False)
        self.scale = math.sqrt(d)
        blocked = torch.zeros(cfg.char_vocab_size, dtype=torch.bool)
        blocked[PAD_ID] = True
        self.register_buffer("_blocked", blocked, persistent=False)
        first = blocked.clone()
        first[EOS_ID] = True
        self.register_buffer("_blocked_first", first, persistent=False)

    @property
    def dtype(self):
        return self.lex_head.weight.dtype

    @property
    def m(self) -> int:
        return self.cfg.max_seg_len

    def named_param_map(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ------------------------------------------------------------------ encoder

    def encode(self, src: torch.Tensor, src_mask: torch.Tensor | None = None) -> SourceEncoding:
        """src [B,S] token ids; src_mask [B,S] True on padding."""
        if src.dim() == 1:
            src = src.unsqueeze(0)
        if src.shape[1] == 0:
            raise ValueError("cannot encode an empty source sentence")
        if src_mask is None:
            src_mask = src.eq(PAD_ID) & False
        x = self.src_emb(src) * self.scale + self.positions[: src.shape[1]]
        for layer in self.encoder:
            x = layer(x, src_mask)
        mem = self.enc_ln(x)
        cross = [layer.cross_attn.project_kv(mem) for layer in self.decoder]
        return SourceEncoding(mem, src_mask, cross)

    # ------------------------------------------------------------------ decoder

    def _dec_input(self, tgt: torch.Tensor) -> torch.Tensor:
        bos = torch.full((tgt.shape[0], 1), EOS_ID, dtype=torch.long)
        ids = torch.cat([bos, tgt], dim=1)
        return self.char_emb(ids) * self.scale + self.positions[: ids.shape[1]]

    def decode_states(self, enc: SourceEncoding, tgt: torch.Tensor) -> torch.Tensor:
        """Full-sequence pass: tgt [B,T] -> hidden [B,T+1,d]; index j is the state before character j."""
        x = self._dec_input(tgt)
        for layer, kv in zip(self.decoder, enc.cross_kv):
            x = layer(x, kv, enc.pad_mask, causal=True)
        return self.dec_ln(x)

    def decode_history(self, prefix: Sequence[int], enc: SourceEncoding) -> DecoderState:
        tgt = torch.as_tensor(list(prefix), dtype=torch.long).reshape(1, -1)
        return DecoderState(self.decode_states(enc, tgt)[0])

    def start_state(self, enc: SourceEncoding) -> DecoderState:
        """Incremental start: only the beginning-of-sequence position."""
        return self.advance([None], [EOS_ID], enc)[0]

    def advance(self, states: list, chars: list[int], enc: SourceEncoding) -> list[DecoderState]:
        """Append one character to each state (batched incremental step).

        `states[i] is None` starts a fresh sequence whose first input is `chars[i]`
        (used with the BOS id). `enc` must hold one row per state or a single row.
        """
        n = len(states)
        pos = [0 if s is None else s.length + 1 for s in states]
        ids = torch.as_tensor(chars, dtype=torch.long).reshape(n, 1)
        x = self.char_emb(ids) * self.scale + self.positions[torch.as_tensor(pos)].unsqueeze(1)
        if enc.memory.shape[0] == 1 and n > 1:
            enc = enc.select([0] * n)
        groups: dict[int, list[int]] = {}
        for i, p in enumerate(pos):
            groups.setdefault(p, []).append(i)
        out: list = [None] * n
        for p, rows in groups.items():
            xs = x[rows]
            sub = enc.select(rows) if len(rows) != n else enc
            caches = []
            for li, (layer, kv) in enumerate(zip(self.decoder, sub.cross_kv)):
                cache = None
                if p > 0:
                    cache = (torch.cat([states[r].cache[li][0] for r in rows]),
                             torch.cat([states[r].cache[li][1] for r in rows]))
                xs, new = layer.step(xs, cache, kv, sub.pad_mask)
                caches.append(new)
            h = self.dec_ln(xs)[:, 0]
            for bi, r in enumerate(rows):
                prev = states[r].hidden if states[r] is not None else h.new_zeros(0, h.shape[-1])
                out[r] = DecoderState(
                    torch.cat([prev, h[bi:bi + 1]]),
                    [(k[bi:bi + 1], v[bi:bi + 1]) for k, v in caches],
                )
        return out

    # ------------------------------------------------------------------ subword heads

    def gate_logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.gate_head(h).squeeze(-1)

    def lex_logprobs(self, h: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.lex_head(h), dim=-1)

    def lstm_init(self, h: torch.Tensor):
        return self.lstm_h0(h), self.lstm_c0(h)

    def char_step(self, state, inp: torch.Tensor, step: int):
        """One char-LSTM step. Returns (log-probs over the char vocab incl. EOS, new state).

        `step` is the number of characters already emitted in this subword; EOS is
        blocked at step 0 so subwords are non-empty.
        """
        h, c = self.char_lstm(self.char_emb(inp), state)
        blocked = self._blocked_first if step == 0 else self._blocked
        return nx.masked_log_softmax(self.char_out(h), blocked), (h, c)

    # ------------------------------------------------------------------ per-segment API

    @torch.no_grad()
    def gate(self, state: DecoderState, j: int) -> float:
        return float(torch.sigmoid(self.gate_logits(state.hidden[j])))

    @torch.no_grad()
    def char_segment_logprob(self, state: DecoderState, j: int, seg: Sequence[int]) -> float:
        return float(self._char_path(state.hidden[j], seg))

    @torch.no_grad()
    def lex_segment_logprob(self, state: DecoderState, j: int, seg: str, lex: Lexicon) -> float:
        idx = lex.id_of(seg)
        if idx < 0:
            return NEG_INF
        return float(self.lex_logprobs(state.hidden[j])[idx])

    def _char_path(self, h: torch.Tensor, seg: Sequence[int]) -> torch.Tensor:
        m = self.m
        if not 1 <= len(seg) <= m:
            raise ValueError(f"segment length {len(seg)} outside [1, {m}]")
        st = tuple(t.unsqueeze(0) for t in self.lstm_init(h))
        inp = torch.tensor([EOS_ID])
        total = h.new_zeros(())
        for i, c in enumerate(seg):
            lp, st = self.char_step(st, inp, i)
            total = total + lp[0, c]
            inp = torch.tensor([c])
        if len(seg) < m:
            lp, _ = self.char_step(st, inp, len(seg))
            total = total + lp[0, EOS_ID]
        return total

    def segment_score_tensor(self, h: torch.Tensor, seg_ids: Sequence[int], lex_id: int) -> torch.Tensor:
        """log p(seg | history) as a differentiable scalar, computed segment by segment."""
        logit = self.gate_logits(h)
        char = F.logsigmoid(logit) + self._char_path(h, seg_ids)
        if lex_id < 0:
            return char
        lexterm = F.logsigmoid(-logit) + self.lex_logprobs(h)[lex_id]
        return torch.logaddexp(char, lexterm)

    @torch.no_grad()
    def segment_logprob(self, state: DecoderState, j: int, seg_ids: Sequence[int], seg: str, lex: Lexicon) -> SegmentScore:
        h = state.hidden[j]
        g = self.gate(state, j)
        char = self.char_segment_logprob(state, j, seg_ids)
        lexterm = self.lex_segment_logprob(state, j, seg, lex)
        total = float(self.segment_score_tensor(h, seg_ids, lex.id_of(seg)))
        return SegmentScore(total, g, char, lexterm)

    # ------------------------------------------------------------------ vectorized grid

    def grid_scores(self, enc: SourceEncoding, tgt: torch.Tensor, lex_ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Segment log-probabilities for every (start j, length l+1) cell.

        tgt [B,T] char ids (padded); lex_ids [B,T,m] lexicon id of tgt[j:j+l+1] or -1;
        valid [B,T,m] legal cells. Returns [B,T,m] with -inf on illegal cells.
        One decoder pass is shared by all cells.
        """
        B, T = tgt.shape
        m = self.m
        H = self.decode_states(enc, tgt)[:, :T]  # state before each start position
        logit = self.gate_logits(H)
        log_g, log_1mg = F.logsigmoid(logit), F.logsigmoid(-logit)

        lexlp = self.lex_logprobs(H)  # [B,T,V]
        lex_term = torch.gather(lexlp, 2, lex_ids.clamp(min=0))
        lex_term = lex_term.masked_fill(lex_ids < 0, NEG_INF)

        # char path: one LSTM run of m steps per start position
        # positions past the end read UNK so every gathered log-prob stays finite
        shifted = torch.full((B, T + m), UNK_ID, dtype=torch.long)
        shifted[:, :T] = tgt.masked_fill(tgt.eq(PAD_ID), UNK_ID)
        tgt_win = torch.stack([shifted[:, i:i + T] for i in range(m)], dim=2)  # y[j+i]
        N = B * T
        st = self.lstm_init(H.reshape(N, -1))
        inp = torch.full((N,), EOS_ID, dtype=torch.long)
        flat = tgt_win.reshape(N, m)
        char_lp, eos_lp = [], []
        for i in range(m):
            lp, st = self.char_step(st, inp, i)
            if i > 0:
                eos_lp.append(lp[:, EOS_ID])
            char_lp.append(lp.gather(1, flat[:, i:i + 1]).squeeze(1))
            inp = flat[:, i]
        char_cum = torch.cumsum(torch.stack(char_lp, 1), dim=1)  # [N,m] prefix sums
        eos = torch.stack(eos_lp + [char_cum.new_zeros(N)], 1)  # EOS after l+1 chars; forced at m
        char_term = (char_cum + eos).reshape(B, T, m)

        mixed = torch.logaddexp(log_g.unsqueeze(-1) + char_term, log_1mg.unsqueeze(-1) + lex_term)
        return mixed.masked_fill(~valid, NEG_INF)

    # ------------------------------------------------------------------ persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        sd = {k: torch.from_numpy(np.asarray(arrays[k])).to(self.dtype) for k in self.state_dict()}
        self.load_state_dict(sd)
