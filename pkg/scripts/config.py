"""
Configuration for the cloth RL pipeline.
- Parameter bundles are frozen pydantic models (validated, hashable, JSON-serializable)
- Environment variables are read from .env (CLOTHRL_THREADS, CLOTHRL_LOG_LEVEL, CLOTHRL_RESULTS_DB)
"""

import os
from typing import Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

load_dotenv()

N_OBJECTIVES = 9
LATENT_SIZE = 32


class SimParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid_side: int = Field(16, ge=2, le=40)
    cloth_side: float = Field(0.21, gt=0)  # m
    workspace_side: float = Field(0.70, gt=0)  # m
    cloth_mass: float = Field(0.05, gt=0)  # kg, whole cloth
    stiffness_structural: float = Field(400.0, gt=0)  # N/m
    stiffness_shear: float = Field(100.0, gt=0)
    stiffness_bend: float = Field(40.0, gt=0)
    damping: float = Field(0.02, ge=0)  # N*s/m along each spring
    air_drag: float = Field(2.0, ge=0)  # 1/s
    gravity: float = Field(9.81, ge=0)
    friction: float = Field(0.5, ge=0, le=1)
    dt: float = Field(2e-4, gt=0)
    substeps: int = Field(20, ge=1)  # minimum substeps per primitive phase
    lift_height: float = Field(0.08, gt=0)
    carry_speed: float = Field(1.0, gt=0)  # m/s
    settle_steps: int = Field(1000, ge=0)
    grasp_radius_factor: float = Field(1.5, ge=0)
    coverage_resolution: int = Field(200, ge=32)

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.cloth_side >= self.workspace_side:
            raise ValueError("cloth_side must be smaller than workspace_side")
        return self

    @computed_field
    @property
    def rest_length(self) -> float:
        return self.cloth_side / (self.grid_side - 1)

    @property
    def particle_mass(self) -> float:
        return self.cloth_mass / (self.grid_side * self.grid_side)

    @property
    def grasp_radius(self) -> float:
        return self.grasp_radius_factor * self.rest_length


class AgentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    gamma: float = Field(0.9, gt=0, lt=1)
    tau: float = Field(5e-4, gt=0, lt=1)
    r_max: float = Field(50.0, gt=0)
    eps_pick: float = Field(0.1, ge=0, le=1)
    eps_place: float = Field(0.1, ge=0, le=1)
    # None keeps epsilon constant over fine-tuning, otherwise linear decay to these values
    eps_pick_final: Optional[float] = Field(None, ge=0, le=1)
    eps_place_final: Optional[float] = Field(None, ge=0, le=1)
    grid_side: int = Field(16, ge=2, le=40)
    place_grid: int = Field(32, ge=4)
    termination_fraction: float = Field(0.95, gt=0, le=1)
    pick_mode: Literal["node", "pixel"] = "node"
    miss_penalty: float = -10.0
    encoder: Literal["conv", "linear"] = "conv"
    width_multiplier: int = Field(1, ge=1, le=8)
    seed: int = 0

    @property
    def q_bound(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    @property
    def pick_grid(self) -> int:
        return self.grid_side if self.pick_mode == "node" else self.place_grid


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(256, ge=1)
    collect_per_block: int = Field(2000, ge=1)
    opt_iters: int = Field(4, ge=0)
    blocks: int = Field(20, ge=0)
    offline_steps: int = Field(2000, ge=0)
    pretrain_lr: float = Field(1e-3, gt=0)
    finetune_lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    objective_count: Literal[1, 3, 9] = 9
    heuristic_fraction: float = Field(0.06, ge=0, le=1)
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    buffer_capacity: int = Field(20000, ge=1)
    episode_actions: int = Field(10, ge=1)
    step_cap: int = Field(20, ge=1)
    seed: int = 0


class RenderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    size: int = Field(128, ge=16)
    margin: int = Field(4, ge=1)
    background: Tuple[float, float, float] = (0.22, 0.22, 0.25)
    outside: Tuple[float, float, float] = (0.05, 0.05, 0.05)
    border: Tuple[float, float, float] = (0.9, 0.9, 0.9)
    cloth: Tuple[float, float, float] = (0.85, 0.25, 0.2)
    light_direction: Tuple[float, float, float] = (0.3, 0.2, 1.0)
    ambient: float = Field(0.45, ge=0, le=1)
    height_gain: float = Field(2.0, ge=0)  # brightening per meter of height
    color_jitter: float = Field(0.0, ge=0, le=0.5)
    silhouette_threshold: float = Field(0.12, gt=0)


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    episodes: int = Field(100, ge=1)
    step_cap: int = Field(20, ge=1)
    seed: int = 0
    n_resamples: int = Field(2000, ge=100)
    confidence: float = Field(0.95, gt=0, lt=1)


def worker_count():
    """Parallel workers allowed by CLOTHRL_THREADS (defaults to the CPU count)."""
    raw = os.getenv("CLOTHRL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def log_level():
    return os.getenv("CLOTHRL_LOG_LEVEL", "INFO").upper()


def results_db_path():
    return os.getenv("CLOTHRL_RESULTS_DB", "results.db")
