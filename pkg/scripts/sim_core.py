"""
Mass-spring cloth simulator.
- G x G particle grid with structural, shear and bend springs, semi-implicit Euler integration
- Ground plane at z = 0 with Coulomb friction; no self-collision (layers may interpenetrate)
- Quasi-static pick-and-place primitive: lift, carry, release, settle
- Coverage of the workspace by the cloth's vertical projection (raster and exact polygon union)

Scene frame: the workspace is the square [-W/2, W/2]^2 on the ground plane. Grid row index i runs
along +x and column index j along +y in the flat reference layout. Normalized ground coordinates
(u, v) in [0, 1]^2 map to scene (x, y) = ((u - 0.5) W, (v - 0.5) W).
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import shapely

from scripts.config import SimParams
from scripts.errors import InvalidActionError, SimulationInstabilityError


@dataclass(frozen=True)
class ClothState:
    positions: np.ndarray  # (G, G, 3) meters
    velocities: np.ndarray  # (G, G, 3) m/s

    @classmethod
    def from_positions(cls, positions):
        positions = np.asarray(positions, dtype=np.float64)
        return cls(positions.copy(), np.zeros_like(positions))

    @property
    def grid_side(self):
        return self.positions.shape[0]

    @property
    def n_nodes(self):
        return self.grid_side * self.grid_side

    def flat_positions(self):
        return self.positions.reshape(-1).copy()

    def node_position(self, node):
        return self.positions.reshape(-1, 3)[node]

    def validate(self, tol=1e-6):
        g = self.grid_side
        if self.positions.shape != (g, g, 3) or self.velocities.shape != (g, g, 3):
            raise ValueError(f"ClothState arrays must be ({g}, {g}, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("ClothState has non-finite positions")
        if self.positions[..., 2].min() < -tol:
            raise ValueError("ClothState penetrates the ground plane")
        return self


@dataclass(frozen=True)
class PickPlaceAction:
    pick: int
    place: Tuple[float, float]

    def __post_init__(self):
        u, v = (min(1.0, max(0.0, float(c))) for c in self.place)
        object.__setattr__(self, "pick", int(self.pick))
        object.__setattr__(self, "place", (u, v))


@dataclass(frozen=True)
class GraspRecord:
    requested_node: int
    grasped_node: int

    @property
    def was_redirected(self):
        return self.grasped_node != self.requested_node


def normalized_to_scene(uv, workspace_side):
    uv = np.asarray(uv, dtype=np.float64)
    return (uv - 0.5) * workspace_side


def scene_to_normalized(xy, workspace_side):
    xy = np.asarray(xy, dtype=np.float64)
    return xy / workspace_side + 0.5


def flat_state(params: SimParams, center=(0.0, 0.0), angle=0.0, height=0.0):
    """Flat cloth centred at `center`, grid axes rotated by `angle` (radians) about z."""
    g = params.grid_side
    offsets = (np.arange(g) - (g - 1) / 2.0) * params.rest_length
    local_x, local_y = np.meshgrid(offsets, offsets, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    positions = np.empty((g, g, 3))
    positions[..., 0] = c * local_x - s * local_y + center[0]
    positions[..., 1] = s * local_x + c * local_y + center[1]
    positions[..., 2] = height
    return ClothState.from_positions(positions)


def flat_coverage(params: SimParams):
    return (params.cloth_side / params.workspace_side) ** 2


@dataclass(frozen=True)
class SpringTable:
    i: np.ndarray
    j: np.ndarray
    rest: np.ndarray
    stiffness: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.i)


@lru_cache(maxsize=16)
def spring_table(params: SimParams):
    g = params.grid_side
    r = params.rest_length
    idx = np.arange(g * g).reshape(g, g)
    groups = [
        (idx[:, :-1], idx[:, 1:], r, params.stiffness_structural),
        (idx[:-1, :], idx[1:, :], r, params.stiffness_structural),
        (idx[:-1, :-1], idx[1:, 1:], r * math.sqrt(2.0), params.stiffness_shear),
        (idx[:-1, 1:], idx[1:, :-1], r * math.sqrt(2.0), params.stiffness_shear),
        (idx[:, :-2], idx[:, 2:], 2.0 * r, params.stiffness_bend),
        (idx[:-2, :], idx[2:, :], 2.0 * r, params.stiffness_bend),
    ]
    i = np.concatenate([a.ravel() for a, _, _, _ in groups])
    j = np.concatenate([b.ravel() for _, b, _, _ in groups])
    rest = np.concatenate([np.full(a.size, length) for a, _, length, _ in groups])
    stiffness = np.concatenate([np.full(a.size, k) for a, _, _, k in groups])
    return SpringTable(i, j, rest, stiffness)


def spring_forces(positions, velocities, springs: SpringTable, damping):
    """Hooke + dashpot forces on an (N, 3) particle set."""
    n = len(positions)
    forces = np.zeros((n, 3))
    if len(springs) == 0:
        return forces
    d = positions[springs.j] - positions[springs.i]
    length = np.sqrt(np.einsum("sk,sk->s", d, d))
    safe = np.where(length > 1e-12, length, 1.0)
    unit = d / safe[:, None]
    unit[length <= 1e-12] = 0.0
    rel_speed = np.einsum("sk,sk->s", velocities[springs.j] - velocities[springs.i], unit)
    magnitude = springs.stiffness * (length - springs.rest) + damping * rel_speed
    f = magnitude[:, None] * unit  # acts on i toward j, and opposite on j
    for axis in range(3):
        forces[:, axis] = np.bincount(springs.i, f[:, axis], n) - np.bincount(springs.j, f[:, axis], n)
    return forces


def integrate(positions, velocities, springs, params: SimParams, pinned=None, step=None):
    """One semi-implicit Euler substep on flat (N, 3) arrays."""
    mass = params.particle_mass
    forces = spring_forces(positions, velocities, springs, params.damping)
    forces[:, 2] -= mass * params.gravity
    forces -= mass * params.air_drag * velocities
    finite = np.isfinite(forces).all(axis=1)
    if not finite.all():
        raise SimulationInstabilityError(np.flatnonzero(~finite)[0], step)

    v = velocities + (params.dt / mass) * forces
    x = positions + params.dt * v

    below = x[:, 2] < 0.0
    if below.any():
        normal_impulse = np.maximum(-v[below, 2], 0.0)
        x[below, 2] = 0.0
        v[below, 2] = np.maximum(v[below, 2], 0.0)
        tangential = v[below, :2]
        speed = np.sqrt(np.einsum("sk,sk->s", tangential, tangential))
        slow = np.maximum(speed, 1e-12)
        scale = np.clip(1.0 - params.friction * normal_impulse / slow, 0.0, 1.0)
        v[below, :2] = tangential * scale[:, None]

    if pinned is not None:
        node, target = pinned
        x[node] = target
        v[node] = 0.0
    return x, v


def step_physics(state: ClothState, params: SimParams, pinned=None):
    if state.grid_side != params.grid_side:
        raise ValueError(f"state grid {state.grid_side} does not match params grid {params.grid_side}")
    g = state.grid_side
    x, v = integrate(state.positions.reshape(-1, 3), state.velocities.reshape(-1, 3), spring_table(params), params, pinned)
    return ClothState(x.reshape(g, g, 3), v.reshape(g, g, 3))


def total_energy(state: ClothState, params: SimParams):
    mass = params.particle_mass
    x = state.positions.reshape(-1, 3)
    v = state.velocities.reshape(-1, 3)
    kinetic = 0.5 * mass * float(np.sum(v * v))
    gravitational = mass * params.gravity * float(np.sum(x[:, 2]))
    springs = spring_table(params)
    length = np.linalg.norm(x[springs.j] - x[springs.i], axis=1)
    elastic = 0.5 * float(np.sum(springs.stiffness * (length - springs.rest) ** 2))
    return kinetic + gravitational + elastic


def resolve_grasp(state: ClothState, requested, radius):
    """Topmost node within `radius` (xy) of the requested node; ties go to the lowest index."""
    n = state.n_nodes
    requested = int(requested)
    if not 0 <= requested < n:
        raise InvalidActionError(f"pick node {requested} outside [0, {n})")
    if radius <= 0:
        return GraspRecord(requested, requested)
    pos = state.positions.reshape(-1, 3)
    delta = pos[:, :2] - pos[requested, :2]
    candidates = np.einsum("sk,sk->s", delta, delta) <= radius * radius
    z = np.where(candidates, pos[:, 2], -np.inf)
    return GraspRecord(requested, int(np.argmax(z)))


def _move_pinned(x, v, node, start, end, params, springs):
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    distance = float(np.linalg.norm(end - start))
    n_steps = max(params.substeps, math.ceil(distance / (params.carry_speed * params.dt)))
    for k in range(1, n_steps + 1):
        target = start + (end - start) * (k / n_steps)
        x, v = integrate(x, v, springs, params, pinned=(node, target), step=k)
    return x, v


def _settle(x, v, params, springs, n_steps):
    for k in range(n_steps):
        x, v = integrate(x, v, springs, params, step=k)
    return x, v


def _drag_and_drop(state, node, lift_to_z, place_xy, params):
    g = state.grid_side
    springs = spring_table(params)
    x = state.positions.reshape(-1, 3).copy()
    v = state.velocities.reshape(-1, 3).copy()
    p0 = x[node].copy()
    lifted = np.array([p0[0], p0[1], max(lift_to_z, p0[2])])
    carried = np.array([place_xy[0], place_xy[1], lifted[2]])
    x, v = _move_pinned(x, v, node, p0, lifted, params, springs)
    x, v = _move_pinned(x, v, node, lifted, carried, params, springs)
    x, v = _settle(x, v, params, springs, params.settle_steps)
    x[:, 2] = np.maximum(x[:, 2], 0.0)
    return ClothState(x.reshape(g, g, 3), np.zeros((g, g, 3)))


def execute_pick_place(state: ClothState, action: PickPlaceAction, params: SimParams):
    """Run the pick-and-place primitive; returns the settled state and the grasp actually made."""
    grasp = resolve_grasp(state, action.pick, params.grasp_radius)
    place_xy = normalized_to_scene(action.place, params.workspace_side)
    settled = _drag_and_drop(state, grasp.grasped_node, params.lift_height, place_xy, params)
    return settled, grasp


def generate_crumpled_state(seed, params: SimParams, max_drops=3):
    """Random flat placement followed by 1..max_drops random pick-lift-drop actions."""
    if max_drops < 1:
        raise ValueError("max_drops must be >= 1")
    rng = np.random.default_rng(seed)
    half_diagonal = params.cloth_side * math.sqrt(2.0) / 2.0
    limit = max(params.workspace_side / 2.0 - half_diagonal, 0.0)
    center = rng.uniform(-limit, limit, size=2)
    state = flat_state(params, center=center, angle=rng.uniform(0.0, 2.0 * math.pi))
    inner = params.workspace_side / 2.0 - params.rest_length
    for _ in range(int(rng.integers(1, max_drops + 1))):
        node = int(rng.integers(state.n_nodes))
        height = rng.uniform(0.5, 1.0) * params.cloth_side
        xy = state.node_position(node)[:2] + rng.normal(0.0, params.cloth_side / 3.0, size=2)
        state = _drag_and_drop(state, node, height, np.clip(xy, -inner, inner), params)
    return state


@lru_cache(maxsize=16)
def triangle_node_indices(grid_side):
    """(2 (G-1)^2, 3) node indices, two triangles per grid quad."""
    idx = np.arange(grid_side * grid_side).reshape(grid_side, grid_side)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
    first = np.stack([a, b, c], axis=-1).reshape(-1, 3)
    second = np.stack([a, c, d], axis=-1).reshape(-1, 3)
    return np.concatenate([first, second], axis=0)


def cloth_triangles(state: ClothState):
    """(2 (G-1)^2, 3, 3) triangle vertex positions."""
    return state.positions.reshape(-1, 3)[triangle_node_indices(state.grid_side)]


def triangle_cells(tri_xy, origin, cell, shape):
    """
    Cells of a regular grid whose centres fall inside a 2D triangle.
    Returns (row slice, column slice, boolean mask) or None when nothing is covered.
    """
    lo = tri_xy.min(axis=0)
    hi = tri_xy.max(axis=0)
    r0 = max(int(math.ceil((lo[0] - origin[0]) / cell - 0.5)), 0)
    r1 = min(int(math.floor((hi[0] - origin[0]) / cell - 0.5)), shape[0] - 1)
    c0 = max(int(math.ceil((lo[1] - origin[1]) / cell - 0.5)), 0)
    c1 = min(int(math.floor((hi[1] - origin[1]) / cell - 0.5)), shape[1] - 1)
    if r1 < r0 or c1 < c0:
        return None
    cx = origin[0] + (np.arange(r0, r1 + 1) + 0.5) * cell
    cy = origin[1] + (np.arange(c0, c1 + 1) + 0.5) * cell
    qx, qy = np.meshgrid(cx, cy, indexing="ij")
    edges = []
    for k in range(3):
        p, q = tri_xy[k], tri_xy[(k + 1) % 3]
        edges.append((q[0] - p[0]) * (qy - p[1]) - (q[1] - p[1]) * (qx - p[0]))
    e0, e1, e2 = edges
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return slice(r0, r1 + 1), slice(c0, c1 + 1), inside


def _triangle_area(tri_xy):
    u = tri_xy[:, 1] - tri_xy[:, 0]
    w = tri_xy[:, 2] - tri_xy[:, 0]
    return 0.5 * np.abs(u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0])


def occupancy_grid(state: ClothState, workspace_side, resolution):
    grid = np.zeros((resolution, resolution), dtype=bool)
    cell = workspace_side / resolution
    origin = (-workspace_side / 2.0, -workspace_side / 2.0)
    tris = cloth_triangles(state)[:, :, :2]
    for tri in tris[_triangle_area(tris) > 1e-14]:
        hit = triangle_cells(tri, origin, cell, grid.shape)
        if hit is not None:
            rows, cols, inside = hit
            grid[rows, cols] |= inside
    return grid


def coverage(state: ClothState, params: SimParams, resolution=None):
    """Fraction of workspace cells whose centre lies under the cloth."""
    resolution = resolution or params.coverage_resolution
    if resolution < 32:
        raise ValueError("coverage resolution must be >= 32")
    return float(occupancy_grid(state, params.workspace_side, resolution).mean())


def cloth_footprint(state: ClothState):
    tris = cloth_triangles(state)[:, :, :2]
    tris = tris[_triangle_area(tris) > 1e-14]
    return shapely.union_all(shapely.polygons(tris))


def coverage_exact(state: ClothState, params: SimParams):
    half = params.workspace_side / 2.0
    footprint = cloth_footprint(state).intersection(shapely.box(-half, -half, half, half))
    return float(footprint.area / params.workspace_side**2)


def node_for_point(state: ClothState, xy, radius) -> Optional[int]:
    """Nearest node (in xy) to a ground point, or None if none lies within `radius`."""
    pos = state.positions.reshape(-1, 3)
    delta = pos[:, :2] - np.asarray(xy, dtype=np.float64)
    dist2 = np.einsum("sk,sk->s", delta, delta)
    node = int(np.argmin(dist2))
    return node if dist2[node] <= radius * radius else None
