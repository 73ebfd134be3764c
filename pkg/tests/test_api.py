import pytest
from fastapi.testclient import TestClient

from scripts import api, results


@pytest.fixture
def client():
    return TestClient(api.app)


@pytest.fixture
def results_db(tmp_path, monkeypatch, sample_report):
    path = str(tmp_path / "results.db")
    con = results.connect(path)
    run_id = results.record_run(con, sample_report, "pick-mode", "node")
    con.close()
    monkeypatch.setenv("CLOTHRL_RESULTS_DB", path)
    return run_id


def test_list_runs(client, results_db):
    response = client.get("/runs")
    assert response.status_code == 200
    runs = response.json()["runs"]
    assert [r["run_id"] for r in runs] == [results_db]
    assert client.get("/runs", params={"study": "objectives"}).json() == {"runs": []}


def test_get_run_with_episodes(client, results_db):
    body = client.get(f"/runs/{results_db}").json()
    assert body["run"]["variant"] == "node"
    assert len(body["episodes"]) == 5
    assert body["episodes"][4]["normalized_improvement"] is None


def test_unknown_run(client, results_db):
    assert client.get("/runs/missing").status_code == 404


def test_missing_database(client, tmp_path, monkeypatch):
    monkeypatch.setenv("CLOTHRL_RESULTS_DB", str(tmp_path / "absent.db"))
    assert client.get("/runs").status_code == 500


def test_unknown_job(client):
    response = client.get("/eval/status/nope")
    assert response.status_code == 404
    assert response.json() == {"error": "Job ID not found"}


class ImmediateThread:
    def __init__(self, target, args):
        self.target, self.args = target, args

    def start(self):
        self.target(*self.args)


def test_eval_job_lifecycle(client, monkeypatch):
    launched = []

    def fake_job(job_id, cmd):
        launched.append(cmd)
        api.jobs[job_id].update(status="success", stdout="ok", stderr="")

    monkeypatch.setattr(api, "Thread", ImmediateThread)
    monkeypatch.setattr(api, "run_eval_job", fake_job)
    response = client.post("/eval/run", json={"checkpoint": "agent.clqn", "episodes": 5, "study": "s"})
    assert response.json()["status"] == "pending"
    status = client.get(f"/eval/status/{response.json()['job_id']}").json()
    assert status["status"] == "success" and status["stdout"] == "ok"
    assert "--record" in launched[0]
    assert launched[0][launched[0].index("--study") + 1] == "s"


def test_request_validation(client):
    response = client.post("/eval/run", json={"checkpoint": "a.clqn", "kind": "oracle"})
    assert response.status_code == 422


def test_command_line_for_a_job():
    request = api.EvalRequest(checkpoint="a.clqn", kind="student", episodes=7, variant="v1")
    cmd = api.build_command(request, "abc123")
    assert cmd[2] == "eval"
    assert cmd[cmd.index("--kind") + 1] == "student"
    assert cmd[cmd.index("--episodes") + 1] == "7"
    assert cmd[cmd.index("--report") + 1].endswith("abc123.json")
    assert "--study" not in cmd and cmd[-1] == "v1"


def test_random_baseline_needs_no_checkpoint(client, monkeypatch):
    launched = []
    monkeypatch.setattr(api, "Thread", ImmediateThread)
    monkeypatch.setattr(api, "run_eval_job", lambda job_id, cmd: launched.append(cmd))
    response = client.post("/eval/run", json={"kind": "random", "episodes": 3, "grid": 8})
    assert response.status_code == 200
    assert "--ckpt" not in launched[0]
    assert launched[0][launched[0].index("--grid") + 1] == "8"


@pytest.mark.parametrize("kind", ["agent", "student"])
def test_learned_policies_need_a_checkpoint(client, kind):
    response = client.post("/eval/run", json={"kind": kind})
    assert response.status_code == 422
    with pytest.raises(ValueError):
        api.EvalRequest(kind=kind)
