import pytest
from fastapi.testclient import TestClient

from main import app

BLINK_AT_4_TO_7 = [-1.0] * 4 + [3.0] * 4 + [-1.0] * 8


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


@pytest.fixture
def client_with_model(client, threshold_model):
    client.app.state.model = threshold_model
    return client


def _segment_body(**overrides):
    body = {
        "sample_rate_hz": 512,
        "channels": {"Fp1": BLINK_AT_4_TO_7},
        "subject_id": "req-1",
        "window_len": 8,
        "stride": 8,
        "offsets": [0, 4],
    }
    body.update(overrides)
    return body


def test_root_reports_model_status(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["model_status"] == "not loaded"


def test_segment_without_model_is_unavailable(client):
    response = client.post("/recordings/segment", json=_segment_body())
    assert response.status_code == 503


def test_segment_returns_labels_events_and_statistics(client_with_model):
    response = client_with_model.post("/recordings/segment", json=_segment_body())
    assert response.status_code == 200
    payload = response.json()
    assert payload["status"] == "success"
    assert payload["labels"] == [0] * 4 + [1] * 4 + [0] * 8
    assert payload["events"] == [{"onset": 4, "offset": 7}]
    assert payload["statistics"]["blink_count"] == 1


def test_segment_with_missing_electrode_is_a_bad_request(client_with_model):
    response = client_with_model.post("/recordings/segment", json=_segment_body(channels={"Fz": BLINK_AT_4_TO_7}))
    assert response.status_code == 400
    assert "Fp1" in response.json()["detail"]


def test_segment_with_ragged_channels_is_a_bad_request(client_with_model):
    body = _segment_body(channels={"Fp1": BLINK_AT_4_TO_7, "Fp2": [0.0, 1.0]})
    assert client_with_model.post("/recordings/segment", json=body).status_code == 400


def test_segment_with_bad_window_plan_is_a_bad_request(client_with_model):
    body = _segment_body(window_len=4, stride=8)
    assert client_with_model.post("/recordings/segment", json=body).status_code == 400


def test_evaluate_scores_labels(client):
    response = client.post(
        "/recordings/evaluate",
        json={"predicted": [0, 1, 1, 0, 0], "true": [0, 1, 1, 0, 1]},
    )
    assert response.status_code == 200
    payload = response.json()
    assert payload["status"] == "success"
    assert payload["counts"] == {"tp": 2, "fp": 0, "fn": 1, "tn": 2}
    assert payload["f1_micro"] == pytest.approx(0.8)
    assert payload["event_recall"] == pytest.approx(0.5)


def test_evaluate_rejects_non_binary_labels(client):
    response = client.post("/recordings/evaluate", json={"predicted": [0, 2], "true": [0, 1]})
    assert response.status_code == 400


def test_evaluate_rejects_length_mismatch(client):
    response = client.post("/recordings/evaluate", json={"predicted": [0, 1, 0], "true": [0, 1]})
    assert response.status_code == 400
