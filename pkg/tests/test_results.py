import numpy as np
import pytest

from scripts import results
from scripts.evaluate import iqm


@pytest.fixture
def con(tmp_path):
    con = results.connect(str(tmp_path / "results.db"))
    yield con
    con.close()


def test_schema_is_created(con):
    tables = set(con.execute("SELECT table_name FROM information_schema.tables").fetchdf()["table_name"])
    assert {"runs", "episodes"} <= tables


def test_improvement_udf(con):
    assert con.execute("SELECT normalized_improvement(0.5, 1.0, 1.0)").fetchone()[0] == 1.0
    assert con.execute("SELECT normalized_improvement(0.2, 0.5, 0.8)").fetchone()[0] == pytest.approx(0.5)
    assert con.execute("SELECT normalized_improvement(NULL, 0.5, 0.8)").fetchone()[0] is None


def test_record_and_list(con, sample_report):
    run_id = results.record_run(con, sample_report, "pick-mode", "node", "reports/a.json")
    runs = results.list_runs(con)
    assert list(runs["run_id"]) == [run_id]
    row = runs.iloc[0]
    assert row["policy"] == "agent" and row["n_params"] == 1234
    assert row["cov_max"] == pytest.approx((0.21 / 0.70) ** 2)
    assert row["seed"] == 2
    assert row["mean"] == pytest.approx(sample_report.mean)
    episodes = results.run_episodes_frame(con, run_id)
    assert list(episodes["episode"]) == [0, 1, 2, 3, 4]
    assert list(episodes["unstable"]) == [False, False, False, False, True]


def test_list_filters_by_study(con, sample_report):
    results.record_run(con, sample_report, "objectives", "1-objectives")
    results.record_run(con, sample_report, "pick-mode", "pixel")
    assert list(results.list_runs(con, "objectives")["variant"]) == ["1-objectives"]
    assert len(results.list_runs(con)) == 2


def test_summary_recomputes_scores_in_sql(con, sample_report):
    results.record_run(con, sample_report, "objectives", "3-objectives")
    results.record_run(con, sample_report, "objectives", "3-objectives")
    results.record_run(con, sample_report, "objectives", "9-objectives")
    frame = results.summary(con, "objectives")
    assert list(frame["variant"]) == ["3-objectives", "9-objectives"]
    three = frame.iloc[0]
    assert three["runs"] == 2 and three["episodes"] == 8
    scores = np.array(sample_report.scores())
    assert three["mean"] == pytest.approx(scores.mean())
    assert three["iqm"] == pytest.approx(iqm(np.concatenate([scores, scores])))
    assert three["ci_low"] == pytest.approx(sample_report.mean_ci[0])


def test_summary_of_unknown_study(con):
    frame = results.summary(con, "nothing")
    assert frame.empty
    assert list(frame.columns) == ["variant", "runs", "episodes", "mean", "iqm", "ci_low", "ci_high"]
