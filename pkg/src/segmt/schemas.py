from pydantic import BaseModel, Field


class TranslateRequest(BaseModel):
    sentences: list[str]
    beam: int | None = Field(default=None, ge=1, le=64)
    mixture_beam: bool = False


class Translation(BaseModel):
    text: str
    segmentation: str
    logprob: float
    truncated: bool


class TranslateResponse(BaseModel):
    translations: list[Translation]
    decoder: str


class SegmentPair(BaseModel):
    source: str
    target: str = Field(min_length=1)


class SegmentRequest(BaseModel):
    pairs: list[SegmentPair]


class Segmentation(BaseModel):
    segmentation: str
    logprob: float


class SegmentResponse(BaseModel):
    segmentations: list[Segmentation]


class ChrfRequest(BaseModel):
    hypotheses: list[str]
    references: list[str]


class ChrfResponse(BaseModel):
    chrf: float
    exact_match: float
    sentences: int


class Health(BaseModel):
    status: str
    lexicon_size: int
    max_seg_len: int
