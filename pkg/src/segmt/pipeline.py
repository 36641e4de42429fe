"""Glue between text artifacts, the model, the trainer and the decoders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .decoder import BeamConfig, NeuralDecodingModel, decode_text, dynamic_decode, mixture_beam_search
from .lattice import format_segmentation, score_grid, target_string, viterbi
from .metrics import corpus_chrf, exact_match
from .model import ModelConfig, SegmentalModel
from .textproc import (BpeModel, CharVocab, Lexicon, SourceVocab, bpe_train, build_char_vocab,
                       build_lexicon)
from .training import Example, make_example


@dataclass
class Artifacts:
    bpe: BpeModel
    src_vocab: SourceVocab
    vocab: CharVocab
    lex: Lexicon

    @property
    def m(self) -> int:
        return self.lex.max_len

    def save(self, outdir: str | Path) -> dict[str, str]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {"bpe": outdir / "bpe.txt", "vocab": outdir / "chars.txt", "lexicon": outdir / "lexicon.txt"}
        self.bpe.save(paths["bpe"])
        self.vocab.save(paths["vocab"])
        self.lex.save(paths["lexicon"])
        return {k: str(v) for k, v in paths.items()}

    @classmethod
    def load(cls, outdir: str | Path) -> "Artifacts":
        outdir = Path(outdir)
        bpe = BpeModel.load(outdir / "bpe.txt")
        return cls(bpe, SourceVocab(bpe.vocab), CharVocab.load(outdir / "chars.txt"),
                   Lexicon.load(outdir / "lexicon.txt"))

    def encode_source(self, line: str) -> list[int]:
        return self.src_vocab.encode(self.bpe.apply(line))

    def example(self, src: str, tgt: str) -> Example:
        return make_example(self.encode_source(src), tgt, self.vocab, self.lex, self.m)

    def model_config(self, **kw) -> ModelConfig:
        return ModelConfig(src_vocab_size=len(self.src_vocab), char_vocab_size=len(self.vocab),
                           lexicon_size=len(self.lex), max_seg_len=self.m, **kw)


def build_artifacts(src_lines: Sequence[str], tgt_lines: Sequence[str], n_merges: int = 5000,
                    lexicon_size: int = 5000, max_seg_len: int = 5) -> Artifacts:
    bpe = bpe_train(src_lines, n_merges)
    vocab = build_char_vocab(tgt_lines)
    lex = build_lexicon(tgt_lines, lexicon_size, max_seg_len)
    return Artifacts(bpe, SourceVocab(bpe.vocab), vocab, lex)


class Translator:
    """Inference facade over a trained model."""

    def __init__(self, model: SegmentalModel, art: Artifacts):
        self.model = model.eval()
        self.art = art

    def _dm(self, src: str, verbatim: bool = False) -> NeuralDecodingModel:
        ids = self.art.encode_source(src)
        if not ids:
            raise ValueError("empty source sentence")
        with torch.no_grad():
            enc = self.model.encode(torch.as_tensor(ids).unsqueeze(0))
        return NeuralDecodingModel(self.model, enc, self.art.vocab, self.art.lex, verbatim)

    def translate(self, src: str, cfg: BeamConfig = BeamConfig(), mixture: bool = False):
        dm = self._dm(src, cfg.verbatim_char_terms)
        res = mixture_beam_search(dm, cfg) if mixture else dynamic_decode(dm, cfg)
        text = decode_text(self.art.vocab, res)
        ends = [e for e in res.ends if e <= len(text)]
        return text, format_segmentation(text, ends, cfg.delimiter), res

    @torch.no_grad()
    def segment(self, src: str, tgt: str, delimiter: str = "-", append_eot: bool = True) -> tuple[str, list[int], float]:
        """Viterbi segmentation of `tgt` given `src`."""
        ids = self.art.encode_source(src)
        enc = self.model.encode(torch.as_tensor(ids).unsqueeze(0))
        y = target_string(tgt, append_eot)
        lat = score_grid(self.model, enc, y, self.art.vocab, self.art.lex)
        ends, lp = viterbi(lat)
        ends = [e for e in ends if e <= len(tgt)]
        return format_segmentation(tgt, ends, delimiter), ends, lp


def evaluate_translation(tr: Translator, pairs: Sequence[tuple[str, str]], cfg: BeamConfig,
                         mixture: bool = False) -> tuple[float, float, list[str]]:
    hyps = [tr.translate(s, cfg, mixture)[0] for s, _ in pairs]
    refs = [t for _, t in pairs]
    return corpus_chrf(hyps, refs), exact_match(hyps, refs), hyps
