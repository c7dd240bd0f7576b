# tests/test_api.py
import pytest
from fastapi.testclient import TestClient

from safehood.main import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def test_health(client):
    r = client.get("/")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"


def test_simulate_bundled(client):
    r = client.post("/simulate", json={"bundled": "paper_sec2_5"})
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "horizon-reached"
    assert [e["event"] for e in body["events"]] == ["g1"]
    assert [s["location"] for s in body["segments"]] == ["l3", "l1"]


def test_simulate_inline_model(client, example_doc):
    r = client.post("/simulate", json={"model": example_doc, "initial_state": [1.05, 1.9]})
    assert r.status_code == 200
    assert [e["event"] for e in r.json()["events"]] == ["g2"]


def test_verify_robust_and_safe(client):
    robust = client.post("/verify", json={"bundled": "paper_sec2_5", "mode": "robust"}).json()
    safe = client.post("/verify", json={"bundled": "paper_sec2_5", "mode": "safe"}).json()
    assert len(robust["d_min"]) == len(safe["d_min"]) == 2
    assert safe["d_min"][0] >= robust["d_min"][0]
    assert robust["verdict"] == safe["verdict"] == "verified-safe"
    assert robust["critical_class"] == "noncritical"


def test_verify_box(client):
    r = client.post(
        "/verify",
        json={"bundled": "paper_sec2_5", "initial_box": [[1.24, 1.89], [1.26, 1.91]], "max_depth": 1},
    )
    assert r.status_code == 200
    assert r.json()["verdict"] in ("verified-safe", "inconclusive")
    assert r.json()["simulations"] >= 1


def test_radius_cap_comes_from_the_model_config(client, example_doc):
    example_doc["unsafe"] = []
    example_doc["config"]["radius_cap"] = 5.0
    r = client.post(
        "/verify",
        json={"model": example_doc, "mode": "robust", "initial_location": "l1", "initial_state": [1.0, 1.0]},
    )
    assert r.status_code == 200
    body = r.json()
    assert body["d_min"] == [5.0]
    assert body["neighborhoods"][0]["radius"] == 5.0


def test_falsified_state(client):
    r = client.post("/verify", json={"bundled": "paper_sec2_5", "initial_location": "l1", "initial_state": [1.5, 0.7]})
    assert r.status_code == 200
    assert r.json()["verdict"] == "falsified"


def test_model_errors_are_422(client, example_doc):
    example_doc["events"][0]["target"] = "l9"
    r = client.post("/simulate", json={"model": example_doc})
    assert r.status_code == 422
    assert "events.0.target" in r.json()["detail"]


def test_exactly_one_model_source(client, example_doc):
    assert client.post("/simulate", json={}).status_code == 422
    assert client.post("/simulate", json={"model": example_doc, "bundled": "paper_sec2_5"}).status_code == 422


def test_unknown_bundled_model_is_404(client):
    assert client.post("/simulate", json={"bundled": "nope"}).status_code == 404


def test_precondition_errors_are_400(client):
    r = client.post("/simulate", json={"bundled": "paper_sec2_5", "initial_state": [0.5, 0.5]})
    assert r.status_code == 400
