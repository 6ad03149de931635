import pytest
from fastapi.testclient import TestClient

from app.app import app
from app.services.experiment_worker import ExperimentWorker


@pytest.fixture
def client(mocker):
    mocker.patch.object(ExperimentWorker, "start_worker", new_callable=mocker.AsyncMock)
    with TestClient(app) as test_client:
        yield test_client


def test_alive_and_health(client):
    assert client.get("/").text == "I am alive"
    assert client.get("/health").text == "OK"


def test_submit_and_poll_experiment(client, tmp_path):
    body = {"problem": "ex1d", "cells": [8], "coarse_intervals": [2], "fine_steps": [2], "output_dir": str(tmp_path)}
    response = client.post("/v1/experiments", json=body)

    assert response.status_code == 200
    job = response.json()
    assert job["status"] == "PENDING"
    assert job["config"]["scheme"] == "peife"

    polled = client.get(f"/v1/experiments/{job['job_id']}")
    assert polled.status_code == 200
    assert polled.json()["job_id"] == job["job_id"]

    listed = client.get("/v1/experiments").json()["jobs"]
    assert [j["job_id"] for j in listed] == [job["job_id"]]


def test_unknown_job_is_404(client):
    response = client.get("/v1/experiments/no-such-job")
    assert response.status_code == 404
    assert "no-such-job" in response.json()["detail"]


def test_cross_field_checks_reject_config(client):
    response = client.post("/v1/experiments", json={"scheme": "peife", "p": 3, "q": 2})
    assert response.status_code == 400
    assert "p=3" in response.json()["detail"]


def test_malformed_body_is_422(client):
    response = client.post("/v1/experiments", json={"scheme": "rk4"})
    assert response.status_code == 422


def test_force_cleanup_route(client):
    stats = client.post("/v1/debug/force-cleanup").json()
    assert stats["initial_job_count"] == 0
