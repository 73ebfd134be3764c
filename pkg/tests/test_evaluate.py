import math

import numpy as np
import pandas as pd
import pytest

from scripts.config import EvalConfig
from scripts.env import StepResult
from scripts.errors import SimulationInstabilityError
from scripts.evaluate import (
    EvalReport,
    Policy,
    RandomPolicy,
    aggregate,
    bootstrap_ci,
    evaluate,
    iqm,
    normalized_improvement,
)
from scripts.rewards import R_MAX, ObjectiveId, reward_vector
from scripts.sim_core import flat_coverage, flat_state


class TeleportPolicy(Policy):
    """Replaces the cloth by a perfectly flat one in a single step."""

    name = "teleport"

    def step(self, env, rng):
        state = flat_state(env.params)
        rewards = reward_vector(state, env.params)
        cov = rewards[ObjectiveId.FLATTEN] / R_MAX * env.flat
        env.state = state
        return StepResult(state, rewards, True, float(cov), 0, 0)


class FlakyPolicy(TeleportPolicy):
    """Blows up on its first episode only."""

    def __init__(self, config):
        super().__init__(config)
        self.calls = 0

    def step(self, env, rng):
        self.calls += 1
        if self.calls == 1:
            raise SimulationInstabilityError(0, 3)
        return super().step(env, rng)


class UnstablePolicy(TeleportPolicy):
    """Blows up on every episode."""

    def step(self, env, rng):
        raise SimulationInstabilityError(1)


def test_normalized_improvement_cases():
    assert normalized_improvement(0.5, 1.0, 1.0) == 1.0
    assert normalized_improvement(0.5, 0.5, 1.0) == 0.0
    assert normalized_improvement(0.6, 0.4, 1.0) == pytest.approx(-0.5)
    assert normalized_improvement(0.2, 0.5, 0.8) == pytest.approx(0.5)


def test_degenerate_start_at_maximum():
    assert normalized_improvement(0.09, 0.09, 0.09) == 1.0
    assert normalized_improvement(0.09, 0.05, 0.09) == 0.0


def test_coverage_fractions_are_checked():
    with pytest.raises(ValueError):
        normalized_improvement(-0.1, 0.5, 1.0)
    with pytest.raises(ValueError):
        normalized_improvement(0.1, 1.5, 1.0)


def test_iqm():
    assert iqm([1, 2, 3, 4, 5, 6, 7, 8]) == 4.5
    assert iqm([8, 1, 7, 2, 6, 3, 5, 4]) == 4.5
    assert iqm([1.0, 100.0, 3.0]) == pytest.approx(104.0 / 3)
    with pytest.raises(ValueError):
        iqm([])


def test_bootstrap_of_constant_scores():
    low, high = bootstrap_ci([0.7] * 20)
    assert low == pytest.approx(0.7) and high == pytest.approx(0.7)


def test_bootstrap_interval_contains_the_statistic(rng):
    scores = rng.normal(size=50)
    for statistic in (np.mean, iqm):
        low, high = bootstrap_ci(scores, statistic, n_resamples=500, rng=np.random.default_rng(1))
        assert low <= statistic(scores) <= high
        assert high - low > 0


def test_bootstrap_is_seeded(rng):
    scores = rng.random(30)
    a = bootstrap_ci(scores, rng=np.random.default_rng(3))
    b = bootstrap_ci(scores, rng=np.random.default_rng(3))
    assert a == b
    with pytest.raises(ValueError):
        bootstrap_ci(scores, n_resamples=50)


def test_aggregate_without_scores_is_nan():
    summary = aggregate([], EvalConfig())
    assert all(math.isnan(summary[key]) for key in ("mean", "std", "iqm"))
    assert all(math.isnan(v) for v in summary["mean_ci"] + summary["iqm_ci"])


def test_aggregate_fields(rng):
    scores = rng.random(12)
    summary = aggregate(scores, EvalConfig(n_resamples=200))
    assert summary["mean"] == pytest.approx(scores.mean())
    assert summary["iqm"] == pytest.approx(iqm(scores))
    assert summary["std"] == pytest.approx(scores.std(ddof=1))
    assert summary["mean_ci"][0] <= summary["mean"] <= summary["mean_ci"][1]


def test_teleport_policy_scores_one(small_params, small_config):
    report = evaluate(TeleportPolicy(small_config), small_params, EvalConfig(episodes=3, n_resamples=100), workers=1)
    assert len(report.episodes) == 3
    assert all(e.steps == 1 for e in report.episodes)
    assert report.mean == pytest.approx(1.0, abs=0.1)
    assert report.n_unstable == 0


def test_unstable_episodes_are_flagged_and_excluded(small_params, small_config):
    report = evaluate(FlakyPolicy(small_config), small_params, EvalConfig(episodes=3, n_resamples=100), workers=1)
    assert report.n_unstable == 1
    bad = report.episodes[0]
    assert bad.unstable and bad.normalized_improvement is None and bad.final_coverage is None
    assert len(report.scores()) == 2
    assert report.mean == pytest.approx(np.mean(report.scores()))


def test_random_policy_is_reproducible(small_params):
    cfg = EvalConfig(episodes=2, step_cap=1, seed=4, n_resamples=100)
    a = evaluate(RandomPolicy(small_params), small_params, cfg, workers=1)
    b = evaluate(RandomPolicy(small_params), small_params, cfg, workers=1)
    assert a.model_dump(exclude={"created_at"}) == b.model_dump(exclude={"created_at"})
    assert a.policy == "random" and a.n_params == 0
    for e in a.episodes:
        assert 0.0 <= e.final_coverage <= 1.1 * flat_coverage(small_params)
        assert e.steps == 1


def test_report_files(tmp_path, small_params, small_config):
    report = evaluate(TeleportPolicy(small_config), small_params, EvalConfig(episodes=2, n_resamples=100), workers=1)
    report.write_json(tmp_path / "r.json")
    report.write_csv(tmp_path / "r.csv")
    back = EvalReport.read_json(tmp_path / "r.json")
    assert back == report
    frame = pd.read_csv(tmp_path / "r.csv")
    assert len(frame) == 2
    assert {"episode", "seed", "normalized_improvement", "discounted_return", "unstable"} <= set(frame.columns)
    assert back.mean == pytest.approx(np.mean(back.scores()))


def test_all_unstable_run_still_reports(tmp_path, small_params, small_config):
    report = evaluate(UnstablePolicy(small_config), small_params, EvalConfig(episodes=2, n_resamples=100), workers=1)
    assert report.n_unstable == 2
    assert report.scores() == []
    assert math.isnan(report.mean) and math.isnan(report.iqm_ci[1])
    report.write_json(tmp_path / "r.json")
    back = EvalReport.read_json(tmp_path / "r.json")
    assert math.isnan(back.mean) and math.isnan(back.mean_ci[0])
    assert back.n_unstable == 2
