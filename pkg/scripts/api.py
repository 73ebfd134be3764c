"""
FastAPI app for cloth policy evaluation jobs

- POST /eval/run {kind, checkpoint, ...}: launches `run.py eval` in a background thread, returns job id
  (the random baseline needs no checkpoint)
- GET /eval/status/{job_id}: job status with captured stdout/stderr
- GET /runs: evaluation runs recorded in the results database
- GET /runs/{run_id}: one run with its per-episode rows
"""

import json
import os
import subprocess
import sys
import uuid
from threading import Thread
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, model_validator

from scripts import results
from scripts.config import results_db_path

app = FastAPI(title="Cloth flattening evaluation service")

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
JOB_TIMEOUT = 3600

jobs = {}


class EvalRequest(BaseModel):
    checkpoint: Optional[str] = None
    kind: str = Field("agent", pattern="^(agent|student|random)$")
    episodes: int = Field(100, ge=1)
    step_cap: int = Field(20, ge=1)
    seed: int = 0
    study: Optional[str] = None
    variant: Optional[str] = None
    grid: int = Field(16, ge=2, description="cloth grid for the random baseline")

    @model_validator(mode="after")
    def _needs_checkpoint(self):
        if self.kind != "random" and not self.checkpoint:
            raise ValueError(f"{self.kind} evaluation needs a checkpoint")
        return self


def build_command(request: EvalRequest, job_id):
    reports = os.path.join(PROJECT_ROOT, "reports")
    cmd = [
        sys.executable,
        os.path.join(PROJECT_ROOT, "run.py"),
        "eval",
        "--kind",
        request.kind,
        "--episodes",
        str(request.episodes),
        "--step-cap",
        str(request.step_cap),
        "--seed",
        str(request.seed),
        "--report",
        os.path.join(reports, f"{job_id}.json"),
        "--csv",
        os.path.join(reports, f"{job_id}.csv"),
        "--record",
    ]
    if request.checkpoint:
        cmd += ["--ckpt", request.checkpoint]
    else:
        cmd += ["--grid", str(request.grid)]
    if request.study:
        cmd += ["--study", request.study]
    if request.variant:
        cmd += ["--variant", request.variant]
    return cmd


def run_eval_job(job_id, cmd):
    jobs[job_id]["status"] = "running"
    try:
        os.makedirs(os.path.join(PROJECT_ROOT, "reports"), exist_ok=True)
        result = subprocess.run(cmd, cwd=PROJECT_ROOT, capture_output=True, text=True, timeout=JOB_TIMEOUT)
        jobs[job_id]["stdout"] = result.stdout
        jobs[job_id]["stderr"] = result.stderr
        jobs[job_id]["status"] = "success" if result.returncode == 0 else "error"
    except Exception as e:
        jobs[job_id]["status"] = "error"
        jobs[job_id]["stderr"] = str(e)


@app.post("/eval/run")
def run_eval_async(request: EvalRequest):
    job_id = str(uuid.uuid4())[:8]
    jobs[job_id] = {"status": "pending", "stdout": None, "stderr": None}
    thread = Thread(target=run_eval_job, args=(job_id, build_command(request, job_id)))
    thread.start()
    return {"job_id": job_id, "status": "pending"}


@app.get("/eval/status/{job_id}")
def get_job_status(job_id: str):
    job = jobs.get(job_id)
    if not job:
        return JSONResponse(status_code=404, content={"error": "Job ID not found"})
    return {"job_id": job_id, "status": job["status"], "stdout": job["stdout"], "stderr": job["stderr"]}


def _records(frame):
    return json.loads(frame.to_json(orient="records"))


def _open_db():
    path = results_db_path()
    if not os.path.exists(path):
        raise HTTPException(status_code=500, detail="Results database not found.")
    return results.connect(path, read_only=True)


@app.get("/runs")
def get_runs(study: Optional[str] = None):
    con = _open_db()
    try:
        frame = results.list_runs(con, study)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"DuckDB error: {e}")
    finally:
        con.close()
    return {"runs": _records(frame)}


@app.get("/runs/{run_id}")
def get_run(run_id: str):
    con = _open_db()
    try:
        run = con.execute("SELECT * FROM runs WHERE run_id = ?", [run_id]).fetchdf()
        episodes = results.run_episodes_frame(con, run_id)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"DuckDB error: {e}")
    finally:
        con.close()
    if run.empty:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found.")
    return {"run": _records(run)[0], "episodes": _records(episodes)}
