import math

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ndd.descriptor import DescriptorConfig, build_descriptor
from ndd.service import create_app


@pytest.fixture
def client():
    return TestClient(create_app(exclusion_window=2))


def _scan_payload(cloud):
    return {"points": cloud.xyz.tolist()}


def test_health(client):
    assert client.get("/health").json() == {"status": "ok", "frames": 0, "version": "0.1.0"}


def test_describe_matches_library(client, benchmark_sequence):
    scan = benchmark_sequence.scans[0]
    body = client.post("/describe", json=_scan_payload(scan)).json()
    want = build_descriptor(scan)
    assert np.array_equal(np.array(body["matrix"]), want.matrix)
    assert len(body["search_key"]) == 40 and len(body["align_key"]) == 60


def test_describe_rejects_bad_points(client):
    assert client.post("/describe", json={"points": [[1, 2]]}).status_code == 422


def test_insert_and_detect(client, benchmark_sequence):
    seq = benchmark_sequence
    for i in range(0, 30, 3):
        r = client.post("/frames", json={"frame_id": i, "scan": _scan_payload(seq.scans[i])})
        assert r.status_code == 200
    assert client.get("/database").json()["size"] == 10
    r = client.post("/detect", json={"frame_id": 185, "scan": _scan_payload(seq.scans[185]), "insert": True})
    body = r.json()
    assert body["inserted"] and body["match"]["accepted"]
    assert seq.truth.is_true_match(185, body["match"]["matched_frame"])
    assert abs(body["match"]["shift"] - 30) <= 1


def test_descriptor_input_and_ordering(client):
    m = np.random.default_rng(0).random((40, 60)).tolist()
    desc = {"num_rings": 20, "num_sectors": 60, "encoding": "P_plus_E", "matrix": m}
    assert client.post("/frames", json={"frame_id": 3, "descriptor": desc}).status_code == 200
    assert client.post("/frames", json={"frame_id": 3, "descriptor": desc}).status_code == 409
    r = client.post("/detect", json={"frame_id": 10, "descriptor": desc}).json()
    assert r["match"]["matched_frame"] == 3 and r["match"]["similarity"] == pytest.approx(1.0)
    r = client.post("/detect", json={"frame_id": 4, "descriptor": desc}).json()
    assert r["match"] is None  # inside the exclusion window


def test_frame_request_needs_one_source(client):
    assert client.post("/frames", json={"frame_id": 1}).status_code == 422


def test_wrong_layout_rejected(client):
    desc = {"num_rings": 2, "num_sectors": 3, "encoding": "P_plus_E", "matrix": [[0.0] * 3] * 4}
    assert client.post("/frames", json={"frame_id": 0, "descriptor": desc}).status_code == 422


def test_evaluate(client):
    recs = [{"query_id": i, "best_match_id": 0, "similarity": 1.0 if i < 3 else 0.0, "has_true_loop": i < 3, "match_is_true": i < 3} for i in range(6)]
    recs.append({"query_id": 6, "similarity": None, "has_true_loop": False})
    body = client.post("/evaluate", json={"records": recs}).json()
    assert body["f1"] == 1.0 and body["ep"] == 1.0
    assert body["curve"][-1]["threshold"] is None
    bad = client.post("/evaluate", json={"records": [{"query_id": 0, "similarity": 0.5, "has_true_loop": False}]})
    assert bad.status_code == 422
