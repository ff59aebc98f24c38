"""FastAPI application wrapping a single in-memory descriptor database."""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..descriptor import Descriptor, DescriptorConfig, align_key, build_descriptor, search_key
from ..evaluation import NoGroundTruthError, QueryRecord, f1_ep, pr_curve
from ..pointcloud import PointCloud
from ..retrieval import DescriptorDatabase, RetrievalConfig, detect_loop
from .schemas import (
    DatabaseInfo,
    DescribeResponse,
    DescriptorConfigModel,
    DetectRequest,
    DetectResponse,
    EvaluateRequest,
    EvaluateResponse,
    FrameRequest,
    FrameResponse,
    HealthResponse,
    MatchModel,
    PRPointModel,
    RetrievalConfigModel,
    ScanModel,
)


def _enum_dict(obj) -> dict:
    return {k: getattr(v, "value", v) for k, v in asdict(obj).items()}


def _cloud(scan: ScanModel, frame_id: int = 0) -> PointCloud:
    try:
        return PointCloud(np.asarray(scan.points, dtype=np.float64).reshape(-1, 3), scan.intensity, frame_id)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def create_app(
    dcfg: DescriptorConfig | None = None,
    rcfg: RetrievalConfig | None = None,
    exclusion_window: int = 50,
) -> FastAPI:
    dcfg = dcfg or DescriptorConfig()
    rcfg = rcfg or RetrievalConfig()
    db = DescriptorDatabase(exclusion_window=exclusion_window)

    app = FastAPI(title="ndd", version=__version__)
    app.state.db = db

    def descriptor_of(req: FrameRequest) -> Descriptor:
        if req.scan is not None:
            return build_descriptor(_cloud(req.scan, req.frame_id), dcfg)
        d = req.descriptor
        try:
            desc = Descriptor(np.asarray(d.matrix, dtype=np.float64), d.num_rings, d.num_sectors, d.encoding)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        if (desc.num_rings, desc.num_sectors, desc.encoding) != (dcfg.num_rings, dcfg.num_sectors, dcfg.encoding):
            raise HTTPException(status_code=422, detail="descriptor layout differs from the service configuration")
        return desc

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", frames=len(db), version=__version__)

    @app.get("/database", response_model=DatabaseInfo)
    def database_info():
        return DatabaseInfo(
            size=len(db),
            frame_ids=list(db.ids),
            exclusion_window=db.exclusion_window,
            descriptor_config=DescriptorConfigModel(**_enum_dict(dcfg)),
            retrieval_config=RetrievalConfigModel(**_enum_dict(rcfg)),
        )

    @app.post("/describe", response_model=DescribeResponse)
    def describe(scan: ScanModel):
        desc = build_descriptor(_cloud(scan), dcfg)
        return DescribeResponse(
            num_rings=desc.num_rings,
            num_sectors=desc.num_sectors,
            encoding=desc.encoding.value,
            matrix=desc.matrix.tolist(),
            search_key=search_key(desc).tolist(),
            align_key=align_key(desc).tolist(),
        )

    @app.post("/frames", response_model=FrameResponse)
    def insert_frame(req: FrameRequest):
        desc = descriptor_of(req)
        try:
            db.insert(req.frame_id, desc)
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return FrameResponse(frame_id=req.frame_id, size=len(db))

    @app.post("/detect", response_model=DetectResponse)
    def detect(req: DetectRequest):
        desc = descriptor_of(req)
        cfg = RetrievalConfig(**req.retrieval.model_dump()) if req.retrieval else rcfg
        match = detect_loop(db, req.frame_id, desc, cfg)
        inserted = False
        if req.insert:
            try:
                db.insert(req.frame_id, desc)
            except ValueError as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            inserted = True
        return DetectResponse(match=MatchModel(**asdict(match)) if match else None, inserted=inserted)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest):
        records = [
            QueryRecord(
                r.query_id,
                r.best_match_id,
                -math.inf if r.similarity is None else r.similarity,
                r.has_true_loop,
                r.match_is_true,
            )
            for r in req.records
        ]
        try:
            curve = pr_curve(records)
        except NoGroundTruthError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        m = f1_ep(curve)
        pts = [PRPointModel(threshold=None if math.isinf(p.threshold) else p.threshold, precision=p.precision, recall=p.recall) for p in curve]
        return EvaluateResponse(f1=m.f1, ep=m.ep, curve=pts)

    return app
