"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class DescriptorConfigModel(BaseModel):
    num_rings: int = Field(20, ge=1)
    num_sectors: int = Field(60, ge=2)
    max_range: float = Field(80.0, gt=0)
    min_cell_points: int = Field(5, ge=4)
    encoding: Literal["P", "E", "H", "P_plus_E"] = "P_plus_E"
    pca_enabled: bool = True
    downsample_leaf: Optional[float] = Field(0.25, ge=0)


class RetrievalConfigModel(BaseModel):
    K: int = Field(25, ge=1)
    threshold: float = Field(0.65, ge=-1.0, le=1.0)
    alignment_strategy: Literal["row_vector", "full_shift", "binary_xnor"] = "row_vector"
    retrieval_strategy: Literal["key_kdtree", "full_linear_scan"] = "key_kdtree"
    matcher: Literal["correlation", "sc_cosine"] = "correlation"


class ScanModel(BaseModel):
    points: List[List[float]] = Field(..., description="rows of x, y, z in meters")
    intensity: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if any(len(p) != 3 for p in self.points):
            raise ValueError("each point must have exactly 3 coordinates")
        if self.intensity is not None and len(self.intensity) != len(self.points):
            raise ValueError("intensity length must match the number of points")
        return self


class DescriptorModel(BaseModel):
    num_rings: int
    num_sectors: int
    encoding: Literal["P", "E", "H", "P_plus_E"]
    matrix: List[List[float]]


class DescribeResponse(DescriptorModel):
    search_key: List[float]
    align_key: List[float]


class FrameRequest(BaseModel):
    frame_id: int = Field(..., ge=0)
    scan: Optional[ScanModel] = None
    descriptor: Optional[DescriptorModel] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.scan is None) == (self.descriptor is None):
            raise ValueError("provide exactly one of 'scan' or 'descriptor'")
        return self


class DetectRequest(FrameRequest):
    insert: bool = False
    retrieval: Optional[RetrievalConfigModel] = None


class MatchModel(BaseModel):
    query_id: int
    matched_frame: int
    similarity: float
    shift: int
    accepted: bool


class DetectResponse(BaseModel):
    match: Optional[MatchModel]
    inserted: bool = False


class FrameResponse(BaseModel):
    frame_id: int
    size: int


class DatabaseInfo(BaseModel):
    size: int
    frame_ids: List[int]
    exclusion_window: int
    descriptor_config: DescriptorConfigModel
    retrieval_config: RetrievalConfigModel


class RecordModel(BaseModel):
    query_id: int
    best_match_id: Optional[int] = None
    similarity: Optional[float] = Field(None, description="null for queries without candidates")
    has_true_loop: bool
    match_is_true: bool = False


class EvaluateRequest(BaseModel):
    records: List[RecordModel]


class PRPointModel(BaseModel):
    threshold: Optional[float] = Field(..., description="null encodes +infinity")
    precision: float
    recall: float


class EvaluateResponse(BaseModel):
    f1: float
    ep: float
    curve: List[PRPointModel]


class HealthResponse(BaseModel):
    status: str
    frames: int
    version: str
