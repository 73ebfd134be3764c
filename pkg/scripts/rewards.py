"""
Reward functions, all bounded in [0, R_MAX].
- Flatten: covered workspace area relative to the flat cloth
- Eight fold objectives (4 straight, 4 diagonal): pair distance between the moving side and its mirror
  plus distance of the moving side to a folded shape centred in the workspace

Grid naming: "left" is column 0, "top" is row 0. The first-named side is the one that moves,
so FOLD_LEFT_RIGHT lays the left half onto the right half.
"""

from enum import IntEnum
from functools import lru_cache

import numpy as np

from scripts.config import N_OBJECTIVES, SimParams
from scripts.sim_core import ClothState, coverage, flat_coverage, flat_state

R_MAX = 50.0


class ObjectiveId(IntEnum):
    FLATTEN = 0
    FOLD_LEFT_RIGHT = 1
    FOLD_RIGHT_LEFT = 2
    FOLD_TOP_BOTTOM = 3
    FOLD_BOTTOM_TOP = 4
    FOLD_TL_BR = 5
    FOLD_BR_TL = 6
    FOLD_TR_BL = 7
    FOLD_BL_TR = 8

    @property
    def is_straight(self):
        return 1 <= self.value <= 4

    @property
    def is_diagonal(self):
        return self.value >= 5


STRAIGHT_FOLDS = [o for o in ObjectiveId if o.is_straight]
DIAGONAL_FOLDS = [o for o in ObjectiveId if o.is_diagonal]

_OBJECTIVE_SETS = {
    1: (ObjectiveId.FLATTEN,),
    3: (ObjectiveId.FLATTEN, ObjectiveId.FOLD_LEFT_RIGHT, ObjectiveId.FOLD_TL_BR),
    9: tuple(ObjectiveId),
}


def active_objectives(count):
    if count not in _OBJECTIVE_SETS:
        raise ValueError(f"objective count must be 1, 3 or 9, got {count}")
    return _OBJECTIVE_SETS[count]


def objective_mask(count):
    mask = np.zeros(N_OBJECTIVES, dtype=bool)
    mask[list(active_objectives(count))] = True
    return mask


def _fold_geometry(objective, g):
    """(moving mask, mirror row index, mirror column index) over the G x G grid."""
    i, j = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    last = g - 1
    if objective in (ObjectiveId.FOLD_LEFT_RIGHT, ObjectiveId.FOLD_RIGHT_LEFT):
        mi, mj = i, last - j
        moving = 2 * j < last if objective == ObjectiveId.FOLD_LEFT_RIGHT else 2 * j > last
    elif objective in (ObjectiveId.FOLD_TOP_BOTTOM, ObjectiveId.FOLD_BOTTOM_TOP):
        mi, mj = last - i, j
        moving = 2 * i < last if objective == ObjectiveId.FOLD_TOP_BOTTOM else 2 * i > last
    elif objective in (ObjectiveId.FOLD_TL_BR, ObjectiveId.FOLD_BR_TL):
        # fold line is the anti-diagonal
        mi, mj = last - j, last - i
        moving = i + j < last if objective == ObjectiveId.FOLD_TL_BR else i + j > last
    elif objective in (ObjectiveId.FOLD_TR_BL, ObjectiveId.FOLD_BL_TR):
        mi, mj = j, i
        moving = j > i if objective == ObjectiveId.FOLD_TR_BL else i > j
    else:
        raise ValueError(f"{objective!r} is not a fold objective")
    return moving, mi, mj


@lru_cache(maxsize=64)
def _fold_targets(objective, params: SimParams):
    g = params.grid_side
    moving, mi, mj = _fold_geometry(objective, g)
    reference = flat_state(params).positions
    stationary = ~moving
    targets = reference - reference[stationary].mean(axis=0)
    targets[..., 2] = 0.0
    targets[moving] = targets[mi[moving], mj[moving]]
    return moving, mi, mj, targets


def _fold_cost(positions, objective, params):
    moving, mi, mj, targets = _fold_targets(objective, params)
    moved = positions[moving]
    pair = np.linalg.norm(moved - positions[mi[moving], mj[moving]], axis=-1).mean()
    placement = np.linalg.norm(moved - targets[moving], axis=-1).mean()
    return float(pair + placement)


@lru_cache(maxsize=64)
def _flat_cost(objective, params: SimParams):
    return _fold_cost(flat_state(params).positions, objective, params)


def fold_reference(objective, params: SimParams):
    """Perfectly folded, centred configuration (flat centred cloth for FLATTEN)."""
    objective = ObjectiveId(objective)
    if objective == ObjectiveId.FLATTEN:
        return flat_state(params)
    _, _, _, targets = _fold_targets(objective, params)
    return ClothState.from_positions(targets)


def _fold_reward(state, objective, params):
    cost = _fold_cost(state.positions, objective, params)
    return R_MAX * max(0.0, 1.0 - cost / _flat_cost(objective, params))


def reward_flatten(state: ClothState, params: SimParams, resolution=None):
    ratio = coverage(state, params, resolution) / flat_coverage(params)
    return float(np.clip(R_MAX * ratio, 0.0, R_MAX))


def reward_fold_straight(state: ClothState, direction, params: SimParams):
    direction = ObjectiveId(direction)
    if not direction.is_straight:
        raise ValueError(f"{direction.name} is not a straight fold")
    return _fold_reward(state, direction, params)


def reward_fold_diagonal(state: ClothState, direction, params: SimParams):
    direction = ObjectiveId(direction)
    if not direction.is_diagonal:
        raise ValueError(f"{direction.name} is not a diagonal fold")
    return _fold_reward(state, direction, params)


def reward(state: ClothState, objective, params: SimParams):
    objective = ObjectiveId(objective)
    if objective == ObjectiveId.FLATTEN:
        return reward_flatten(state, params)
    return _fold_reward(state, objective, params)


def reward_vector(state: ClothState, params: SimParams):
    return np.array([reward(state, o, params) for o in ObjectiveId], dtype=np.float64)
