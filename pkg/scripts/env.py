"""
Episode environment around the simulator.
- reset(seed): crumpled start state
- step(action): pick-and-place, full reward vector; terminal at a fraction of flat coverage,
  truncated (not terminal) at the step cap
- Pixel pick mode: a pick cell with no cloth node under it is a miss (state unchanged, Flatten reward = penalty)
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from scripts.agent import cell_of, pixel_pick_adapter
from scripts.config import AgentConfig, SimParams
from scripts.errors import InvalidActionError
from scripts.rewards import ObjectiveId, reward_vector
from scripts.sim_core import (
    ClothState,
    GraspRecord,
    PickPlaceAction,
    coverage,
    execute_pick_place,
    flat_coverage,
    generate_crumpled_state,
)


@dataclass(frozen=True)
class StepResult:
    state: ClothState
    rewards: np.ndarray  # (N_OBJECTIVES,)
    terminal: bool  # coverage reached the termination fraction
    coverage: float
    pick: int  # stored pick: grasped node (node mode) or the requested cell (pixel mode)
    place: int  # place cell
    grasp: Optional[GraspRecord] = None
    missed: bool = False
    truncated: bool = False  # step cap reached without solving

    @property
    def done(self):
        return self.terminal or self.truncated

    @property
    def redirected(self):
        return bool(self.grasp is not None and self.grasp.was_redirected)


class ClothEnv:
    def __init__(self, params: SimParams, config: AgentConfig = None, step_cap=20, max_drops=3):
        config = config or AgentConfig(grid_side=params.grid_side)
        if config.grid_side != params.grid_side:
            raise ValueError(f"agent grid {config.grid_side} does not match simulator grid {params.grid_side}")
        self.params = params
        self.config = config
        self.step_cap = step_cap
        self.max_drops = max_drops
        self.flat = flat_coverage(params)
        self.state = None
        self.steps = 0
        self.initial_coverage = None

    def reset(self, seed):
        self.state = generate_crumpled_state(seed, self.params, self.max_drops)
        self.steps = 0
        self.initial_coverage = coverage(self.state, self.params)
        return self.state

    def set_state(self, state: ClothState):
        self.state = state
        self.steps = 0
        self.initial_coverage = coverage(state, self.params)
        return state

    def solved(self, cov):
        return cov >= self.config.termination_fraction * self.flat

    def step(self, action: PickPlaceAction):
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        place = cell_of(action.place, self.config.place_grid)
        grasp = None
        missed = False
        if self.config.pick_mode == "pixel":
            cells = self.config.place_grid**2
            if not 0 <= action.pick < cells:
                raise InvalidActionError(f"pick cell {action.pick} outside [0, {cells})")
            node = pixel_pick_adapter(self.state, action.pick, self.config.place_grid, self.params)
            missed = node is None
            stored_pick = action.pick
        else:
            node = action.pick
        if missed:
            next_state = self.state
        else:
            next_state, grasp = execute_pick_place(self.state, PickPlaceAction(node, action.place), self.params)
            if self.config.pick_mode == "node":
                stored_pick = grasp.grasped_node
        rewards = reward_vector(next_state, self.params)
        cov = coverage(next_state, self.params)
        if missed:
            rewards[ObjectiveId.FLATTEN] = self.config.miss_penalty
        self.state = next_state
        self.steps += 1
        terminal = self.solved(cov)
        truncated = not terminal and self.steps >= self.step_cap
        return StepResult(
            next_state, rewards, terminal, float(cov), int(stored_pick), place, grasp, missed, truncated
        )
