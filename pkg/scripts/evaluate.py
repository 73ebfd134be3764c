"""
Evaluation harness.
- Metrics: normalized improvement, inter-quartile mean, percentile bootstrap confidence intervals
- Policies: greedy agent, image-based student, uniform random baseline
- evaluate(): seeded episodes on worker processes, unstable episodes flagged and excluded,
  report assembled in episode order and written as JSON + CSV
"""

from datetime import datetime, timezone
from functools import partial
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from scripts.config import AgentConfig, EvalConfig, RenderConfig, SimParams
from scripts.distill import render_observation, student_policy
from scripts.env import ClothEnv
from scripts.errors import SimulationInstabilityError
from scripts.rewards import ObjectiveId
from scripts.rollouts import episode_seed, run_episodes
from scripts.sim_core import PickPlaceAction, flat_coverage

DEGENERATE_EPS = 1e-6


def normalized_improvement(cov_first, cov_last, cov_max):
    """(last - first) / (max - first); 1 means fully flattened, negative means worse than the start."""
    for name, value in (("cov_first", cov_first), ("cov_last", cov_last), ("cov_max", cov_max)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name}={value} outside [0, 1]")
    span = cov_max - cov_first
    if span < DEGENERATE_EPS:
        return 1.0 if cov_last >= cov_max - DEGENERATE_EPS else 0.0
    return (cov_last - cov_first) / span


def iqm(scores):
    """Mean after dropping floor(n/4) scores from each end of the sorted list."""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    if scores.size == 0:
        raise ValueError("iqm of an empty score list")
    trim = scores.size // 4
    return float(scores[trim : scores.size - trim].mean())


def bootstrap_ci(scores, statistic=np.mean, n_resamples=2000, confidence=0.95, rng=None):
    """Percentile bootstrap; the returned interval always contains the point statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("bootstrap of an empty score list")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.integers(0, scores.size, size=(n_resamples, scores.size))
    stats = np.array([statistic(scores[row]) for row in idx])
    alpha = (1.0 - confidence) / 2.0
    low, high = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    point = float(statistic(scores))
    return float(min(low, point)), float(max(high, point))


class Policy:
    name = "policy"
    n_params = 0

    def __init__(self, config: AgentConfig):
        self.config = config

    def act(self, env, rng):
        raise NotImplementedError

    def step(self, env, rng):
        return env.step(self.act(env, rng))


class AgentPolicy(Policy):
    name = "agent"

    def __init__(self, agent):
        super().__init__(agent.config)
        self.agent = agent
        self.n_params = agent.num_parameters()

    def act(self, env, rng):
        return self.agent.act(env.state, rng, 0.0, 0.0)


class StudentPolicy(Policy):
    name = "student"

    def __init__(self, student, render: RenderConfig, params: SimParams):
        super().__init__(AgentConfig(grid_side=params.grid_side))
        self.student = student
        self.render = render
        self.params = params
        self.n_params = student.num_parameters()

    def act(self, env, rng):
        observation = render_observation(env.state, self.render, self.params)
        return student_policy(self.student, observation, env.state, self.render, self.params)


class RandomPolicy(Policy):
    """Uniform cloth node + uniform workspace point."""

    name = "random"

    def __init__(self, params: SimParams):
        super().__init__(AgentConfig(grid_side=params.grid_side))

    def act(self, env, rng):
        pick = int(rng.integers(env.state.n_nodes))
        u, v = rng.random(2)
        return PickPlaceAction(pick, (float(u), float(v)))


class EpisodeRecord(BaseModel):
    episode: int
    seed: int
    initial_coverage: Optional[float]
    final_coverage: Optional[float]
    steps: int
    normalized_improvement: Optional[float]
    discounted_return: Optional[float]
    unstable: bool = False


class EvalReport(BaseModel):
    # aggregates are NaN when every episode was unstable
    model_config = ConfigDict(ser_json_inf_nan="constants")

    policy: str
    n_params: int
    config: dict
    episodes: List[EpisodeRecord]
    n_unstable: int
    mean: float
    std: float
    iqm: float
    mean_ci: Tuple[float, float]
    iqm_ci: Tuple[float, float]
    created_at: Optional[str] = Field(None, description="wall-clock stamp, excluded from reproducibility checks")

    def scores(self):
        return [e.normalized_improvement for e in self.episodes if not e.unstable]

    def write_json(self, path):
        with open(path, "w") as f:
            f.write(self.model_dump_json(indent=2))

    def write_csv(self, path):
        pd.DataFrame([e.model_dump() for e in self.episodes]).to_csv(path, index=False)

    @classmethod
    def read_json(cls, path):
        with open(path) as f:
            return cls.model_validate_json(f.read())


def aggregate(scores, eval_cfg: EvalConfig):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        logger.warning("No stable evaluation episodes; aggregates are NaN")
        nan = float("nan")
        return {"mean": nan, "std": nan, "iqm": nan, "mean_ci": (nan, nan), "iqm_ci": (nan, nan)}

    def ci(statistic):
        rng = np.random.default_rng(episode_seed(eval_cfg.seed, 6))
        return bootstrap_ci(scores, statistic, eval_cfg.n_resamples, eval_cfg.confidence, rng)

    return {
        "mean": float(scores.mean()),
        "std": float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
        "iqm": iqm(scores),
        "mean_ci": ci(np.mean),
        "iqm_ci": ci(iqm),
    }


def _run_episode(index, policy, params, step_cap, seed, gamma):
    ep_seed = episode_seed(seed, 4, index)
    env = ClothEnv(params, policy.config, step_cap=step_cap)
    rng = np.random.default_rng(episode_seed(seed, 5, index))
    cov_max = flat_coverage(params)
    try:
        env.reset(ep_seed)
        first = last = env.initial_coverage
        ret, steps, done = 0.0, 0, False
        while not done:
            result = policy.step(env, rng)
            ret += gamma**steps * float(result.rewards[ObjectiveId.FLATTEN])
            steps += 1
            last, done = result.coverage, result.done
    except SimulationInstabilityError as exc:
        logger.warning(f"Evaluation episode {index} unstable: {exc}")
        return EpisodeRecord(
            episode=index,
            seed=ep_seed,
            initial_coverage=None,
            final_coverage=None,
            steps=0,
            normalized_improvement=None,
            discounted_return=None,
            unstable=True,
        )
    score = normalized_improvement(min(first, 1.0), min(last, 1.0), max(cov_max, first))
    return EpisodeRecord(
        episode=index,
        seed=ep_seed,
        initial_coverage=first,
        final_coverage=last,
        steps=steps,
        normalized_improvement=score,
        discounted_return=ret,
    )


def evaluate(policy: Policy, params: SimParams, eval_cfg: EvalConfig = None, workers=None, progress=False):
    eval_cfg = eval_cfg or EvalConfig()
    task = partial(
        _run_episode,
        policy=policy,
        params=params,
        step_cap=eval_cfg.step_cap,
        seed=eval_cfg.seed,
        gamma=policy.config.gamma,
    )
    episodes = run_episodes(task, range(eval_cfg.episodes), workers, progress=progress, desc=f"eval {policy.name}")
    stable = [e.normalized_improvement for e in episodes if not e.unstable]
    n_unstable = len(episodes) - len(stable)
    report = EvalReport(
        policy=policy.name,
        n_params=policy.n_params,
        config={"eval": eval_cfg.model_dump(), "sim_params": params.model_dump()},
        episodes=episodes,
        n_unstable=n_unstable,
        created_at=datetime.now(timezone.utc).isoformat(),
        **aggregate(stable, eval_cfg),
    )
    for e in episodes:
        if not e.unstable:
            logger.debug(f"episode {e.episode}: improvement {e.normalized_improvement:.3f} return {e.discounted_return:.2f}")
    logger.info(
        f"{policy.name}: mean {report.mean:.3f} IQM {report.iqm:.3f} "
        f"CI [{report.mean_ci[0]:.3f}, {report.mean_ci[1]:.3f}] over {len(stable)} episodes"
        + (f", {n_unstable} unstable" if n_unstable else "")
    )
    return report
