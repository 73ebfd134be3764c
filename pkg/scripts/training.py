"""
Training loops.
- pretrain: offline double-DQN on the dataset's train split, all active objectives, bound loss on
- finetune: replay buffer pre-filled from the dataset, then blocks of epsilon-greedy collection followed
  by optimization on the Flatten objective only, bound loss off
- Metrics: append-only CSV (step, loss_pick, loss_place, loss_bound, validation_loss, mean_return)
- Fine-tuning writes visited states to a Parquet trajectory dump for distillation
"""

import os

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from scripts.agent import (
    Agent,
    Batch,
    compute_targets,
    epsilon_schedule,
    node_to_cell,
    pick_encodings,
    state_images,
    td_loss,
)
from scripts.config import AgentConfig, SimParams, TrainConfig
from scripts.dataset import SOURCE_ONLINE, make_record, read_dataset
from scripts.env import ClothEnv
from scripts.features import compute_norm_stats
from scripts.replay import ReplayBuffer
from scripts.rewards import ObjectiveId, objective_mask
from scripts.rollouts import episode_seed
from scripts.sim_core import ClothState

METRIC_COLUMNS = ["step", "loss_pick", "loss_place", "loss_bound", "validation_loss", "mean_return"]
ARCHITECTURE_FIELDS = ("grid_side", "place_grid", "pick_mode", "encoder", "width_multiplier")


def append_metrics(path, row):
    if path is None:
        return
    frame = pd.DataFrame([row], columns=METRIC_COLUMNS)
    frame.to_csv(path, mode="a", header=not os.path.exists(path), index=False)


def records_to_batch(records, stats):
    return Batch(
        states=state_images(records["state"], stats),
        picks=records["pick"].astype(np.int64),
        places=records["place"].astype(np.int64),
        rewards=records["reward"].astype(np.float32),
        dones=records["done"].astype(np.float32),
        next_states=state_images(records["next_state"], stats),
    )


def to_pixel_picks(records, place_grid, params: SimParams):
    """Copy of node-mode records with each pick replaced by the workspace cell under the node."""
    converted = records.copy()
    for i in range(len(converted)):
        state = ClothState.from_positions(converted["state"][i])
        converted["pick"][i] = node_to_cell(state, int(converted["pick"][i]), place_grid, params)
    return converted


def _records_for(config: AgentConfig, dataset):
    if config.grid_side != dataset.grid_side or config.place_grid != dataset.place_grid:
        raise ValueError(
            f"agent grid {config.grid_side}/{config.place_grid} does not match "
            f"dataset grid {dataset.grid_side}/{dataset.place_grid}"
        )
    if config.pick_mode == "pixel":
        return to_pixel_picks(dataset.records, config.place_grid, dataset.params)
    return dataset.records


def validation_loss(agent: Agent, records, mask):
    batch = records_to_batch(records, agent.stats)
    targets = compute_targets(batch, agent.online, agent.target, agent.config)
    enc = pick_encodings(batch.states, batch.picks, agent.config)
    (pick_maps, place_maps), _ = agent.online.forward((batch.states, enc))
    l_pick, l_place, _, _ = td_loss(pick_maps, place_maps, batch.picks, batch.places, *targets, mask)
    return l_pick + l_place


def split_indices(n, validation_fraction, rng):
    perm = rng.permutation(n)
    n_val = int(round(validation_fraction * n))
    if n - n_val < 1:
        n_val = n - 1
    return perm[n_val:], perm[:n_val]


def pretrain(data_path, out_path, train: TrainConfig, config: AgentConfig, metrics_path=None, progress=False):
    dataset = read_dataset(data_path)
    records = _records_for(config, dataset)
    rng = np.random.default_rng(train.seed)
    train_idx, val_idx = split_indices(len(records), train.validation_fraction, rng)
    stats = compute_norm_stats(records["state"][i] for i in train_idx)
    agent = Agent(config, stats, lr=train.pretrain_lr, weight_decay=train.weight_decay)
    mask = objective_mask(train.objective_count)
    val_records = records[val_idx[: train.batch_size]]
    log_every = max(1, train.offline_steps // 20)
    logger.info(
        f"Pretraining on {len(train_idx)} transitions ({len(val_idx)} held out), "
        f"{train.objective_count} objectives, {agent.num_parameters()} parameters"
    )
    for step in tqdm(range(train.offline_steps), desc="pretrain", disable=not progress):
        batch = records_to_batch(records[train_idx[rng.integers(len(train_idx), size=train.batch_size)]], stats)
        terms = agent.train_step(batch, mask, include_bound=True)
        if (step + 1) % log_every == 0 or step + 1 == train.offline_steps:
            val = validation_loss(agent, val_records, mask) if len(val_records) else float("nan")
            append_metrics(
                metrics_path,
                {
                    "step": step + 1,
                    "loss_pick": terms.pick,
                    "loss_place": terms.place,
                    "loss_bound": terms.bound,
                    "validation_loss": val,
                    "mean_return": float("nan"),
                },
            )
            logger.debug(f"step {step + 1}: loss {terms.total:.4f} validation {val:.4f}")
    agent.save(out_path, stage="pretrain", sim_params=dataset.params.model_dump(), dataset=str(data_path))
    return agent


def _check_architecture(current: AgentConfig, requested: AgentConfig):
    for name in ARCHITECTURE_FIELDS:
        if getattr(current, name) != getattr(requested, name):
            raise ValueError(f"cannot change {name} when fine-tuning ({getattr(current, name)} -> {getattr(requested, name)})")


def write_trajectories(path, rows):
    frame = pd.DataFrame(rows, columns=["episode", "step", "coverage", "positions"])
    frame.to_parquet(path, engine="pyarrow", index=False)


def finetune(
    checkpoint_path,
    out_path,
    train: TrainConfig,
    params: SimParams,
    data_path=None,
    config: AgentConfig = None,
    metrics_path=None,
    trajectory_path=None,
    progress=False,
):
    agent = Agent.load(checkpoint_path)
    if config is not None:
        _check_architecture(agent.config, config)
        agent.config = config
        agent.online.config = config
        agent.target.config = config
    agent.reset_optimizer(lr=train.finetune_lr, weight_decay=train.weight_decay)
    rng = np.random.default_rng(train.seed)
    buffer = ReplayBuffer(train.buffer_capacity, agent.config.grid_side)
    if data_path is not None:
        records = _records_for(agent.config, read_dataset(data_path))
        prefill = rng.permutation(len(records))[: train.buffer_capacity]
        buffer.extend(records[np.sort(prefill)])
    logger.info(f"Replay buffer pre-filled with {len(buffer)} transitions")

    env = ClothEnv(params, agent.config, step_cap=train.step_cap)
    mask = objective_mask(1)
    gamma = agent.config.gamma
    trajectory = []
    episode, state, ret, t = 0, None, 0.0, 0

    for block in tqdm(range(train.blocks), desc="finetune", disable=not progress):
        eps_pick, eps_place = epsilon_schedule(agent.config, block, train.blocks)
        returns = []
        for _ in range(train.collect_per_block):
            if state is None:
                state = env.reset(episode_seed(train.seed, 2, episode))
                ret, t = 0.0, 0
                trajectory.append(_traj_row(episode, 0, env.initial_coverage, state))
            action = agent.act(state, rng, eps_pick, eps_place)
            result = env.step(action)
            buffer.push(online_record(agent.config.grid_side, state, result))
            ret += gamma**t * float(result.rewards[ObjectiveId.FLATTEN])
            t += 1
            state = result.state
            trajectory.append(_traj_row(episode, t, result.coverage, state))
            if result.done:
                returns.append(ret)
                episode += 1
                state = None
        terms = None
        for _ in range(train.opt_iters):
            batch = records_to_batch(buffer.sample(train.batch_size, rng), agent.stats)
            terms = agent.train_step(batch, mask, include_bound=False)
        mean_return = float(np.mean(returns)) if returns else float("nan")
        append_metrics(
            metrics_path,
            {
                "step": block + 1,
                "loss_pick": terms.pick if terms else float("nan"),
                "loss_place": terms.place if terms else float("nan"),
                "loss_bound": 0.0,
                "validation_loss": float("nan"),
                "mean_return": mean_return,
            },
        )
        logger.info(f"block {block + 1}/{train.blocks}: eps=({eps_pick:.3f}, {eps_place:.3f}) episodes={len(returns)} return={mean_return:.2f}")

    if trajectory_path is not None:
        write_trajectories(trajectory_path, trajectory)
    agent.save(out_path, stage="finetune", sim_params=params.model_dump(), checkpoint=str(checkpoint_path))
    return agent, buffer


def _traj_row(episode, step, cov, state):
    return {
        "episode": episode,
        "step": step,
        "coverage": float(cov),
        "positions": state.positions.astype(np.float32).reshape(-1).tolist(),
    }


def online_record(grid_side, state, result):
    """Replay record of an environment step; a step-cap truncation still bootstraps."""
    return make_record(
        grid_side,
        state,
        result.pick,
        result.place,
        result.rewards,
        result.terminal,
        result.state,
        result.redirected,
        SOURCE_ONLINE,
    )
