"""
DuckDB results store for evaluation runs and ablation studies.
- runs: one row per evaluated checkpoint (study, variant, policy, aggregates, report path)
- episodes: per-episode rows keyed by run_id
- normalized_improvement is registered as a scalar UDF on writable connections so summaries can be recomputed in SQL
"""

import json
import uuid

import duckdb
import numpy as np
import pandas as pd
from loguru import logger

from scripts.config import results_db_path
from scripts.evaluate import EvalReport, iqm, normalized_improvement

SCHEMA = [
    """
    CREATE TABLE IF NOT EXISTS runs (
        run_id VARCHAR PRIMARY KEY,
        study VARCHAR,
        variant VARCHAR,
        policy VARCHAR,
        seed BIGINT,
        n_params BIGINT,
        mean DOUBLE,
        iqm DOUBLE,
        ci_low DOUBLE,
        ci_high DOUBLE,
        n_unstable INTEGER,
        cov_max DOUBLE,
        report_path VARCHAR,
        config VARCHAR,
        created_at VARCHAR
    )
    """,
    """
    CREATE TABLE IF NOT EXISTS episodes (
        run_id VARCHAR,
        episode INTEGER,
        seed BIGINT,
        initial_coverage DOUBLE,
        final_coverage DOUBLE,
        steps INTEGER,
        normalized_improvement DOUBLE,
        discounted_return DOUBLE,
        unstable BOOLEAN
    )
    """,
]


def _improvement_udf(cov_first, cov_last, cov_max):
    if cov_first is None or cov_last is None or cov_max is None:
        return None
    return normalized_improvement(cov_first, cov_last, cov_max)


def connect(path=None, read_only=False):
    con = duckdb.connect(path or results_db_path(), read_only=read_only)
    if read_only:
        return con
    for statement in SCHEMA:
        con.execute(statement)
    con.create_function(
        "normalized_improvement",
        _improvement_udf,
        parameters=["DOUBLE", "DOUBLE", "DOUBLE"],
        return_type="DOUBLE",
        null_handling="special",
    )
    return con


def record_run(con, report: EvalReport, study, variant, report_path=None):
    run_id = str(uuid.uuid4())[:8]
    cov_max = report.config.get("cov_max")
    if cov_max is None:
        sim = report.config.get("sim_params", {})
        cov_max = (sim["cloth_side"] / sim["workspace_side"]) ** 2 if sim else None
    con.execute(
        "INSERT INTO runs VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
        [
            run_id,
            study,
            variant,
            report.policy,
            report.config.get("eval", {}).get("seed"),
            report.n_params,
            report.mean,
            report.iqm,
            report.mean_ci[0],
            report.mean_ci[1],
            report.n_unstable,
            cov_max,
            None if report_path is None else str(report_path),
            json.dumps(report.config, sort_keys=True),
            report.created_at,
        ],
    )
    episodes = pd.DataFrame([e.model_dump() for e in report.episodes])
    episodes.insert(0, "run_id", run_id)
    con.register("episodes_df", episodes)
    con.execute(
        "INSERT INTO episodes SELECT run_id, episode, seed, initial_coverage, final_coverage, steps, "
        "normalized_improvement, discounted_return, unstable FROM episodes_df"
    )
    con.unregister("episodes_df")
    logger.info(f"Recorded run {run_id} ({study}/{variant})")
    return run_id


def list_runs(con, study=None):
    if study is None:
        return con.execute("SELECT * FROM runs ORDER BY study, variant, created_at").fetchdf()
    return con.execute("SELECT * FROM runs WHERE study = ? ORDER BY variant, created_at", [study]).fetchdf()


def run_episodes_frame(con, run_id):
    return con.execute("SELECT * FROM episodes WHERE run_id = ? ORDER BY episode", [run_id]).fetchdf()


def summary(con, study):
    """Per-variant mean / IQM / CI, with scores recomputed from coverages by the SQL UDF."""
    scores = con.execute(
        """
        SELECT r.variant, r.run_id, r.ci_low, r.ci_high,
               normalized_improvement(e.initial_coverage, e.final_coverage,
                                      GREATEST(r.cov_max, e.initial_coverage)) AS score
        FROM runs r
        JOIN episodes e ON e.run_id = r.run_id
        WHERE r.study = ? AND NOT e.unstable
        ORDER BY r.variant, e.run_id, e.episode
        """,
        [study],
    ).fetchdf()
    if scores.empty:
        return pd.DataFrame(columns=["variant", "runs", "episodes", "mean", "iqm", "ci_low", "ci_high"])
    rows = []
    for variant, group in scores.groupby("variant", sort=True):
        values = group["score"].to_numpy(dtype=np.float64)
        rows.append(
            {
                "variant": variant,
                "runs": group["run_id"].nunique(),
                "episodes": len(values),
                "mean": float(values.mean()),
                "iqm": iqm(values),
                "ci_low": float(group["ci_low"].mean()),
                "ci_high": float(group["ci_high"].mean()),
            }
        )
    return pd.DataFrame(rows)
