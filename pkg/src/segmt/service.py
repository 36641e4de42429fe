"""HTTP inference service around a loaded Translator."""

from __future__ import annotations

import dataclasses

from fastapi import FastAPI, HTTPException

from .decoder import BeamConfig
from .metrics import corpus_chrf, exact_match
from .pipeline import Translator
from .schemas import (ChrfRequest, ChrfResponse, Health, SegmentRequest, SegmentResponse, Segmentation,
                      TranslateRequest, TranslateResponse, Translation)


def create_app(translator: Translator, decoding: BeamConfig | None = None) -> FastAPI:
    decoding = decoding or BeamConfig()
    app = FastAPI(title="segmt")

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", lexicon_size=len(translator.art.lex), max_seg_len=translator.art.m)

    @app.post("/translate", response_model=TranslateResponse)
    def translate(req: TranslateRequest):
        cfg = dataclasses.replace(decoding, beam=req.beam or decoding.beam)
        out = []
        for s in req.sentences:
            if not s.strip():
                out.append(Translation(text="", segmentation="", logprob=0.0, truncated=False))
                continue
            try:
                text, seg, res = translator.translate(s, cfg, mixture=req.mixture_beam)
            except ValueError as e:
                raise HTTPException(status_code=422, detail=str(e))
            out.append(Translation(text=text, segmentation=seg, logprob=res.logprob, truncated=res.truncated))
        return TranslateResponse(translations=out, decoder="mixture_beam" if req.mixture_beam else "dynamic")

    @app.post("/segment", response_model=SegmentResponse)
    def segment(req: SegmentRequest):
        out = []
        for pair in req.pairs:
            if not pair.source.strip():
                raise HTTPException(status_code=422, detail="source sentence required: the model is conditional")
            try:
                seg, _, lp = translator.segment(pair.source, pair.target, decoding.delimiter)
            except ValueError as e:
                raise HTTPException(status_code=422, detail=str(e))
            out.append(Segmentation(segmentation=seg, logprob=lp))
        return SegmentResponse(segmentations=out)

    @app.post("/eval/chrf", response_model=ChrfResponse)
    def chrf(req: ChrfRequest):
        if len(req.hypotheses) != len(req.references):
            raise HTTPException(status_code=422, detail="hypotheses and references differ in length")
        return ChrfResponse(chrf=corpus_chrf(req.hypotheses, req.references),
                            exact_match=exact_match(req.hypotheses, req.references),
                            sentences=len(req.references))

    return app
