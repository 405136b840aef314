import importlib
import uuid

import pytest
from fastapi.testclient import TestClient


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("PPUM_OUTPUT", str(tmp_path))
    import api

    importlib.reload(api)
    return TestClient(api.app)


def test_plan_short_query(client):
    response = client.post("/plan", json={"start": [0.0, 0.0], "goal": [0.3, 0.0]})
    assert response.status_code == 200
    body = response.json()
    assert body["reached"] is True
    assert body["valid_path"] == [[0.0, 0.0], [0.3, 0.0]]


def test_plan_rejects_blocked_start(client):
    response = client.post(
        "/plan",
        json={"start": [0.0, 0.0], "goal": [5.0, 0.0], "obstacles": [{"center": [0.1, 0.0], "radius": 0.5}]},
    )
    assert response.status_code == 400


def test_plan_rejects_bad_grid(client):
    grid = {"side_length": 2.0, "resolution": 2, "values": [0.5, 0.5, 0.5, 0.5]}
    response = client.post("/plan", json={"start": [0.0, 0.0], "goal": [0.3, 0.0], "grid": grid})
    assert response.status_code == 400


def test_fuse_rejects_unknown_memory(client):
    response = client.post("/fuse", json={"scenario": "case1_corridor", "memory": "XYZ"})
    assert response.status_code == 400


def test_fuse_unknown_scenario(client):
    response = client.post("/fuse", json={"scenario": "nowhere"})
    assert response.status_code == 400


def test_heatmap_download_validation(client):
    assert client.get("/download_heatmap/not-a-name.pgm").status_code == 400
    assert client.get(f"/download_heatmap/{uuid.uuid4()}.pgm").status_code == 404
