"""
Offline transition dataset.
- Random-interaction episodes from crumpled starts plus fold-to-unfold episodes from flat starts
- Two independently seeded streams merged so the heuristic share is exactly round(fraction * n)
- CLRL file: fixed-size little-endian records, raw particle positions (not images)
- A JSON generation report is written next to the dataset

CLRL layout:
    b"CLRL" | u32 version | u32 G | u32 P | u32 n_objectives | u64 count | u32 len + sim params JSON
    count x record (see record_dtype)
"""

import json
import math
from dataclasses import dataclass
from functools import partial

import numpy as np
from loguru import logger

from scripts.agent import cell_center, cell_of
from scripts.checkpoint import BinaryReader, text_block, u32, u64
from scripts.config import N_OBJECTIVES, SimParams
from scripts.errors import ArtifactFormatError, EmptyDatasetError, SimulationInstabilityError
from scripts.rewards import R_MAX, ObjectiveId, reward_vector
from scripts.rollouts import episode_seed, run_episodes
from scripts.sim_core import (
    PickPlaceAction,
    execute_pick_place,
    flat_coverage,
    flat_state,
    generate_crumpled_state,
    scene_to_normalized,
)

DATASET_MAGIC = b"CLRL"
DATASET_VERSION = 1
SOURCE_RANDOM = 0
SOURCE_HEURISTIC = 1
SOURCE_ONLINE = 2
WAVE_SIZE = 16
MAX_RETRIES = 5


def record_dtype(grid_side):
    g = grid_side
    return np.dtype(
        [
            ("state", "<f4", (g, g, 3)),
            ("pick", "<i4"),
            ("place", "<i4"),
            ("reward", "<f4", (N_OBJECTIVES,)),
            ("done", "u1"),
            ("next_state", "<f4", (g, g, 3)),
            ("redirected", "u1"),
            ("source", "u1"),
        ]
    )


@dataclass
class Dataset:
    records: np.ndarray
    params: SimParams
    place_grid: int

    def __len__(self):
        return len(self.records)

    @property
    def grid_side(self):
        return self.params.grid_side


def make_record(grid_side, state, pick, place, rewards, done, next_state, redirected, source):
    rec = np.zeros((), dtype=record_dtype(grid_side))
    rec["state"] = state.positions
    rec["pick"] = pick
    rec["place"] = place
    rec["reward"] = rewards
    rec["done"] = done
    rec["next_state"] = next_state.positions
    rec["redirected"] = redirected
    rec["source"] = source
    return rec


def encode_dataset(records, params: SimParams, place_grid):
    header = [
        DATASET_MAGIC,
        u32(DATASET_VERSION),
        u32(params.grid_side),
        u32(place_grid),
        u32(N_OBJECTIVES),
        u64(len(records)),
        text_block(params.model_dump_json()),
    ]
    records = np.ascontiguousarray(records, dtype=record_dtype(params.grid_side))
    return b"".join(header) + records.tobytes()


def write_dataset(path, records, params: SimParams, place_grid):
    with open(path, "wb") as f:
        f.write(encode_dataset(records, params, place_grid))


def read_dataset(path):
    with open(path, "rb") as f:
        reader = BinaryReader(f.read(), label=str(path))
    reader.expect(DATASET_MAGIC, DATASET_VERSION)
    grid_side, place_grid, n_objectives = reader.u32(), reader.u32(), reader.u32()
    count = reader.u64()
    params = SimParams.model_validate_json(reader.text())
    if n_objectives != N_OBJECTIVES or params.grid_side != grid_side:
        raise ArtifactFormatError(f"{path}: inconsistent header")
    dtype = record_dtype(grid_side)
    if reader.remaining != count * dtype.itemsize:
        raise ArtifactFormatError(f"{path}: expected {count} records, found {reader.remaining} bytes")
    records = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).copy()
    return Dataset(records, params, place_grid)


def validate_records(records, place_grid, pick_mode="node", miss_penalty=-10.0):
    """Raises ArtifactFormatError on the first record that breaks the transition invariants."""
    g = records.dtype["state"].shape[0]
    pick_limit = g * g if pick_mode == "node" else place_grid * place_grid
    for idx, rec in enumerate(records):
        if not 0 <= rec["pick"] < pick_limit or not 0 <= rec["place"] < place_grid * place_grid:
            raise ArtifactFormatError(f"record {idx}: action index out of range")
        rewards = rec["reward"]
        fold_ok = np.all((rewards[1:] >= 0) & (rewards[1:] <= R_MAX))
        flatten = float(rewards[ObjectiveId.FLATTEN])
        flat_ok = 0 <= flatten <= R_MAX or np.isclose(flatten, miss_penalty)
        if not (fold_ok and flat_ok):
            raise ArtifactFormatError(f"record {idx}: reward out of range")
        if not (np.all(np.isfinite(rec["state"])) and np.all(np.isfinite(rec["next_state"]))):
            raise ArtifactFormatError(f"record {idx}: non-finite positions")
    return True


def _transition(state, action, params, place_grid, source, termination_fraction):
    next_state, grasp = execute_pick_place(state, action, params)
    rewards = reward_vector(next_state, params)
    done = rewards[ObjectiveId.FLATTEN] / R_MAX >= termination_fraction
    rec = make_record(
        params.grid_side,
        state,
        grasp.grasped_node,
        cell_of(action.place, place_grid),
        rewards,
        done,
        next_state,
        grasp.was_redirected,
        source,
    )
    return rec, next_state, grasp


def random_episode(seed, params: SimParams, place_grid=32, n_actions=10, max_drops=3, termination_fraction=0.95):
    """Uniform random pick node + random place cell from a crumpled start."""
    rng = np.random.default_rng(seed)
    state = generate_crumpled_state(int(rng.integers(2**31)), params, max_drops)
    records = []
    for _ in range(n_actions):
        pick = int(rng.integers(params.grid_side**2))
        place = cell_center(int(rng.integers(place_grid**2)), place_grid)
        rec, state, _ = _transition(
            state, PickPlaceAction(pick, place), params, place_grid, SOURCE_RANDOM, termination_fraction
        )
        records.append(rec)
        if rec["done"]:
            break
    return records


def _quantized_uv(xy, params, place_grid):
    uv = np.clip(scene_to_normalized(xy, params.workspace_side), 0.0, 1.0)
    return cell_center(cell_of(uv, place_grid), place_grid)


def fold_to_unfold_rollout(state, params: SimParams, rng, k=None, place_grid=32, actions=None, termination_fraction=0.95):
    """
    Fold a (near) flat cloth k times with recorded actions, then replay them reversed:
    pick the node that was carried, place it back where it was picked.
    Returns the 2k transitions, fold phase first.
    """
    if actions is None:
        k = int(rng.integers(1, 4)) if k is None else int(k)
        n = params.grid_side**2
        actions = [tuple(int(v) for v in rng.choice(n, size=2, replace=False)) for _ in range(k)]
    else:
        actions = list(actions)
    records = []
    undo = []
    for entry in actions:
        if isinstance(entry, PickPlaceAction):
            action = entry
        else:
            pick, target = entry
            action = PickPlaceAction(pick, _quantized_uv(state.node_position(target)[:2], params, place_grid))
        picked_from = state.node_position(action.pick)[:2].copy()
        rec, state, grasp = _transition(state, action, params, place_grid, SOURCE_HEURISTIC, termination_fraction)
        records.append(rec)
        undo.append((grasp.grasped_node, _quantized_uv(picked_from, params, place_grid)))
    for node, uv in reversed(undo):
        rec, state, _ = _transition(
            state, PickPlaceAction(node, uv), params, place_grid, SOURCE_HEURISTIC, termination_fraction
        )
        records.append(rec)
    return records


def heuristic_episode(seed, params: SimParams, place_grid=32, termination_fraction=0.95):
    rng = np.random.default_rng(seed)
    half_diagonal = params.cloth_side * math.sqrt(2.0) / 2.0
    limit = max(params.workspace_side / 2.0 - half_diagonal, 0.0)
    start = flat_state(params, center=rng.uniform(-limit, limit, size=2), angle=rng.uniform(0.0, 2.0 * math.pi))
    return fold_to_unfold_rollout(start, params, rng, place_grid=place_grid, termination_fraction=termination_fraction)


def _episode_task(item, params, place_grid, n_actions, max_drops, seed):
    """Runs one episode, retrying with derived seeds when the simulation blows up; gives up with no records."""
    stream, index = item
    for attempt in range(MAX_RETRIES):
        ep_seed = episode_seed(seed, stream, index, attempt)
        try:
            if stream == SOURCE_RANDOM:
                return random_episode(ep_seed, params, place_grid, n_actions, max_drops), attempt
            return heuristic_episode(ep_seed, params, place_grid), attempt
        except SimulationInstabilityError as exc:
            logger.warning(f"Episode {stream}/{index} attempt {attempt} discarded: {exc}")
    logger.warning(f"Episode {stream}/{index} discarded after {MAX_RETRIES} unstable attempts")
    return [], MAX_RETRIES


def _collect_stream(stream, target, task, workers, progress):
    records, discarded, episodes, index = [], 0, 0, 0
    while len(records) < target:
        wave = [(stream, i) for i in range(index, index + WAVE_SIZE)]
        index += WAVE_SIZE
        before = len(records)
        for episode, retries in run_episodes(task, wave, workers, progress=False):
            discarded += retries
            if episode and len(records) < target:
                episodes += 1
                records.extend(episode)
        if len(records) == before:
            raise EmptyDatasetError(f"Every episode {index - WAVE_SIZE}..{index - 1} of stream {stream} was unstable")
        if progress:
            logger.info(f"[stream {stream}] {min(len(records), target)}/{target} transitions")
    return records[:target], discarded, episodes


def merge_streams(random_records, heuristic_records):
    """Deterministic interleave keeping each stream's order, spread by relative position."""
    keys = [(i / max(len(random_records), 1), 0, i) for i in range(len(random_records))]
    keys += [(i / max(len(heuristic_records), 1), 1, i) for i in range(len(heuristic_records))]
    keys.sort()
    pools = (random_records, heuristic_records)
    return [pools[src][i] for _, src, i in keys]


def generate_offline_dataset(
    path,
    n_transitions,
    heuristic_fraction,
    params: SimParams,
    seed,
    place_grid=32,
    episode_actions=10,
    max_drops=3,
    workers=None,
    progress=False,
):
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    n_heuristic = int(round(heuristic_fraction * n_transitions))
    n_random = n_transitions - n_heuristic
    task = partial(
        _episode_task,
        params=params,
        place_grid=place_grid,
        n_actions=episode_actions,
        max_drops=max_drops,
        seed=seed,
    )
    rand, rand_discarded, rand_eps = _collect_stream(SOURCE_RANDOM, n_random, task, workers, progress)
    heur, heur_discarded, heur_eps = _collect_stream(SOURCE_HEURISTIC, n_heuristic, task, workers, progress)
    merged = merge_streams(rand, heur)
    records = np.empty(len(merged), dtype=record_dtype(params.grid_side))
    for i, rec in enumerate(merged):
        records[i] = rec
    write_dataset(path, records, params, place_grid)
    report = {
        "transitions": int(len(records)),
        "random_transitions": n_random,
        "heuristic_transitions": n_heuristic,
        "random_episodes": rand_eps,
        "heuristic_episodes": heur_eps,
        "discarded_episodes": rand_discarded + heur_discarded,
        "seed": seed,
        "flat_coverage": flat_coverage(params),
    }
    with open(f"{path}.report.json", "w") as f:
        json.dump(report, f, indent=2)
    logger.info(
        f"Wrote {len(records)} transitions ({n_heuristic} heuristic) to {path}; "
        f"{report['discarded_episodes']} episodes discarded"
    )
    return report


def subsample_dataset(path, fraction, seed, out):
    """Seeded subset (order preserved) for the dataset-size study."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    ds = read_dataset(path)
    if len(ds) == 0:
        raise EmptyDatasetError(f"{path} holds no transitions")
    keep = max(1, int(round(fraction * len(ds))))
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=keep, replace=False))
    write_dataset(out, ds.records[idx], ds.params, ds.place_grid)
    return keep
