import numpy as np
import pytest

from scripts.config import AgentConfig, RenderConfig, SimParams


@pytest.fixture
def small_params():
    # 6x6 cloth with a coarser time step keeps pick-and-place under a second
    return SimParams(grid_side=6, dt=5e-4, substeps=10, settle_steps=400, carry_speed=2.0)


@pytest.fixture
def small_config():
    return AgentConfig(grid_side=6, place_grid=8)


@pytest.fixture
def small_render():
    return RenderConfig(size=64, margin=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sample_report():
    from scripts.config import EvalConfig
    from scripts.evaluate import EpisodeRecord, EvalReport, aggregate, normalized_improvement

    params = SimParams(grid_side=6)
    coverages = [(0.03, 0.09), (0.05, 0.07), (0.04, 0.03), (0.06, 0.09)]
    episodes = [
        EpisodeRecord(
            episode=i,
            seed=100 + i,
            initial_coverage=first,
            final_coverage=last,
            steps=3,
            normalized_improvement=normalized_improvement(first, last, 0.09),
            discounted_return=10.0 * i,
        )
        for i, (first, last) in enumerate(coverages)
    ]
    episodes.append(
        EpisodeRecord(
            episode=4,
            seed=104,
            initial_coverage=None,
            final_coverage=None,
            steps=0,
            normalized_improvement=None,
            discounted_return=None,
            unstable=True,
        )
    )
    eval_cfg = EvalConfig(episodes=5, n_resamples=100, seed=2)
    scores = [e.normalized_improvement for e in episodes if not e.unstable]
    return EvalReport(
        policy="agent",
        n_params=1234,
        config={"eval": eval_cfg.model_dump(), "sim_params": params.model_dump()},
        episodes=episodes,
        n_unstable=1,
        created_at="2026-01-01T00:00:00+00:00",
        **aggregate(scores, eval_cfg),
    )
