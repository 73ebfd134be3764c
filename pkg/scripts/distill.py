"""
Cross-modality distillation: state-based teacher -> image-based student.
- rasterize / render_observation: top-down painter's-algorithm view of the cloth on the workspace
- project_teacher_labels: dense pick labels (teacher node values on visible cloth pixels) and
  place labels (teacher place map for its greedy pick, bilinearly upsampled over the workspace)
- CLDS file of (observation, labels, masks) pairs; StudentNet U-Net with a two-channel head
- student_policy: silhouette-restricted pick argmax + workspace place argmax

Image frame: row r runs along scene +x, column c along +y. The workspace spans the pixels
[margin, size - margin) in both axes; a one-pixel border ring sits just outside it.

CLDS layout:
    b"CLDS" | u32 version | u32 H | u32 W | u64 count | u32 len + JSON header | count x record
"""

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from scripts.agent import q_pick, q_place
from scripts.checkpoint import BinaryReader, load_tensors, save_tensors, text_block, u32, u64
from scripts.config import RenderConfig, SimParams
from scripts.errors import ArtifactFormatError, EmptyDatasetError, EmptySilhouetteError
from scripts.neural import Adam, Concat, Conv2d, Gelu, Layer, Sequential, TransposedConv2d
from scripts.rollouts import episode_seed
from scripts.sim_core import (
    ClothState,
    PickPlaceAction,
    cloth_triangles,
    node_for_point,
    scene_to_normalized,
    triangle_cells,
    triangle_node_indices,
)

DISTILL_MAGIC = b"CLDS"
DISTILL_VERSION = 1
DISTILL_CHUNK = 64  # pairs rendered in memory before each write


@dataclass(frozen=True)
class PixelFrame:
    """Mapping between image pixels and scene coordinates."""

    size: int
    margin: int
    workspace_side: float

    @property
    def cell(self):
        return self.workspace_side / (self.size - 2 * self.margin)

    @property
    def origin(self):
        start = -self.workspace_side / 2.0 - self.margin * self.cell
        return (start, start)

    def pixel_center(self, row, col):
        x0, y0 = self.origin
        return np.array([x0 + (row + 0.5) * self.cell, y0 + (col + 0.5) * self.cell])

    def pixel_of(self, xy):
        x0, y0 = self.origin
        row = int(np.floor((xy[0] - x0) / self.cell))
        col = int(np.floor((xy[1] - y0) / self.cell))
        return min(max(row, 0), self.size - 1), min(max(col, 0), self.size - 1)

    def workspace_mask(self):
        mask = np.zeros((self.size, self.size), dtype=bool)
        lo, hi = self.margin, self.size - self.margin
        mask[lo:hi, lo:hi] = True
        return mask


def frame_for(cfg: RenderConfig, params: SimParams):
    return PixelFrame(cfg.size, cfg.margin, params.workspace_side)


def _palette(cfg: RenderConfig, rng):
    background = np.array(cfg.background)
    cloth = np.array(cfg.cloth)
    if cfg.color_jitter > 0 and rng is not None:
        background = np.clip(background + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        cloth = np.clip(cloth + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
    return background, cloth


def rasterize(state, cfg: RenderConfig, params: SimParams, rng=None):
    """(H, W, 3) image in [0, 1] and the (H, W) visible-node buffer (-1 where no cloth)."""
    frame = frame_for(cfg, params)
    size, margin = cfg.size, cfg.margin
    background, cloth_color = _palette(cfg, rng)
    image = np.empty((size, size, 3))
    image[...] = cfg.outside
    image[margin - 1 : size - margin + 1, margin - 1 : size - margin + 1] = cfg.border
    image[margin : size - margin, margin : size - margin] = background
    nodes = np.full((size, size), -1, dtype=np.int64)
    if state is None:
        return image.astype(np.float32), nodes

    tris = cloth_triangles(state)
    tri_nodes = triangle_node_indices(state.grid_side)
    light = np.array(cfg.light_direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    heights = tris[:, :, 2].mean(axis=1)
    origin, cell = frame.origin, frame.cell
    for t in np.argsort(heights, kind="stable"):
        if lengths[t] < 1e-14:
            continue
        hit = triangle_cells(tris[t, :, :2], origin, cell, (size, size))
        if hit is None:
            continue
        rows, cols, inside = hit
        diffuse = abs(float(normals[t] @ light)) / lengths[t]
        shade = cfg.ambient + (1.0 - cfg.ambient) * diffuse + cfg.height_gain * heights[t]
        image[rows, cols][inside] = np.clip(cloth_color * shade, 0.0, 1.0)
        # nearest triangle vertex to each covered pixel centre
        r_idx, c_idx = np.nonzero(inside)
        r_idx = r_idx + rows.start
        c_idx = c_idx + cols.start
        centers = np.stack([origin[0] + (r_idx + 0.5) * cell, origin[1] + (c_idx + 0.5) * cell], axis=1)
        d = np.linalg.norm(centers[:, None, :] - tris[t, None, :, :2], axis=2)
        nodes[r_idx, c_idx] = tri_nodes[t][np.argmin(d, axis=1)]
    return image.astype(np.float32), nodes


def render_observation(state, cfg: RenderConfig, params: SimParams, rng=None):
    return rasterize(state, cfg, params, rng)[0]


def estimate_background(observation, cfg: RenderConfig):
    """Median colour of the outermost workspace ring; the cloth never covers most of it."""
    lo, hi = cfg.margin, cfg.size - cfg.margin - 1
    ring = np.concatenate(
        [
            observation[lo, lo : hi + 1],
            observation[hi, lo : hi + 1],
            observation[lo + 1 : hi, lo],
            observation[lo + 1 : hi, hi],
        ]
    )
    return np.median(ring, axis=0)


def silhouette_mask(observation, cfg: RenderConfig, background=None):
    """Workspace pixels whose colour differs from the background by more than the threshold.

    Without an explicit background colour it is estimated from the observation, so colour
    jittered renders are segmented against their own background.
    """
    if background is None:
        background = estimate_background(observation, cfg)
    background = np.asarray(background, dtype=np.float32)
    distance = np.linalg.norm(observation - background, axis=-1)
    frame = PixelFrame(cfg.size, cfg.margin, 1.0)
    return (distance > cfg.silhouette_threshold) & frame.workspace_mask()


def bilinear_upsample(grid_map, frame: PixelFrame):
    """Samples a P x P map defined on workspace cell centres at every pixel centre (edge-clamped)."""
    p = grid_map.shape[0]
    ws = frame.workspace_side
    rows = np.arange(frame.size)
    coords = np.array([frame.pixel_center(r, 0)[0] for r in rows])
    u = np.clip(scene_to_normalized(coords, ws) * p - 0.5, 0.0, p - 1.0)
    lo = np.floor(u).astype(int)
    hi = np.minimum(lo + 1, p - 1)
    w = u - lo
    row_mix = (1 - w)[:, None] * grid_map[lo] + w[:, None] * grid_map[hi]
    return (1 - w)[None, :] * row_mix[:, lo] + w[None, :] * row_mix[:, hi]


@dataclass
class LabelSet:
    pick: np.ndarray  # (H, W)
    place: np.ndarray  # (H, W)
    pick_mask: np.ndarray  # (H, W) bool, visible cloth
    place_mask: np.ndarray  # (H, W) bool, workspace


def project_teacher_labels(state: ClothState, agent, cfg: RenderConfig, params: SimParams, nodes=None):
    frame = frame_for(cfg, params)
    if nodes is None:
        _, nodes = rasterize(state, cfg, params)
    image = agent.images(state.positions)[0]
    pick_map = q_pick(agent.online, image)
    greedy = int(np.argmax(pick_map))
    place_map = q_place(agent.online, image, greedy)
    visible = nodes >= 0

    if agent.config.pick_mode == "node":
        node_values = pick_map.reshape(-1).astype(np.float64)
        pick = np.zeros(nodes.shape)
        pick[visible] = node_values[nodes[visible]]
        # nodes sharing a projected pixel compete; the pixel keeps the largest value
        splat = np.full(nodes.shape, -np.inf)
        for n, xy in enumerate(state.positions.reshape(-1, 3)[:, :2]):
            r, c = frame.pixel_of(xy)
            if visible[r, c]:
                splat[r, c] = max(splat[r, c], node_values[n])
        hit = np.isfinite(splat)
        pick[hit] = splat[hit]
    else:
        pick = np.where(visible, bilinear_upsample(pick_map.astype(np.float64), frame), 0.0)
    place = bilinear_upsample(place_map.astype(np.float64), frame)
    return LabelSet(pick.astype(np.float32), place.astype(np.float32), visible, frame.workspace_mask())


def projection_noise(state, agent, cfg: RenderConfig, params: SimParams):
    """Mean squared gap between teacher node values and the labels read back at node pixels."""
    labels = project_teacher_labels(state, agent, cfg, params)
    frame = frame_for(cfg, params)
    values = q_pick(agent.online, agent.images(state.positions)[0]).reshape(-1)
    errors = []
    for n, xy in enumerate(state.positions.reshape(-1, 3)[:, :2]):
        r, c = frame.pixel_of(xy)
        if labels.pick_mask[r, c]:
            errors.append((labels.pick[r, c] - values[n]) ** 2)
    return float(np.mean(errors)) if errors else 0.0


def pair_dtype(height, width):
    return np.dtype(
        [
            ("observation", "<f4", (height, width, 3)),
            ("pick", "<f4", (height, width)),
            ("place", "<f4", (height, width)),
            ("pick_mask", "u1", (height, width)),
            ("place_mask", "u1", (height, width)),
        ]
    )


def _distill_preamble(size, count, header):
    return (
        DISTILL_MAGIC
        + u32(DISTILL_VERSION)
        + u32(size)
        + u32(size)
        + u64(count)
        + text_block(json.dumps(header, sort_keys=True))
    )


def read_distill_file(path):
    with open(path, "rb") as f:
        reader = BinaryReader(f.read(), label=str(path))
    reader.expect(DISTILL_MAGIC, DISTILL_VERSION)
    height, width = reader.u32(), reader.u32()
    count = reader.u64()
    header = reader.json()
    dtype = pair_dtype(height, width)
    if reader.remaining != count * dtype.itemsize:
        raise ArtifactFormatError(f"{path}: expected {count} pairs, found {reader.remaining} bytes")
    pairs = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).copy()
    return pairs, header


def validate_pairs(pairs):
    for idx, pair in enumerate(pairs):
        obs = pair["observation"]
        if obs.min() < 0 or obs.max() > 1:
            raise ArtifactFormatError(f"pair {idx}: observation outside [0, 1]")
        for name, mask in (("pick", "pick_mask"), ("place", "place_mask")):
            if not np.all(np.isfinite(pair[name][pair[mask].astype(bool)])):
                raise ArtifactFormatError(f"pair {idx}: non-finite {name} labels")
    return True


def load_state_source(path):
    """(N, G, G, 3) states from a CLRL dataset or a Parquet trajectory dump."""
    if str(path).endswith(".parquet"):
        frame = pd.read_parquet(path)
        flat = np.stack(frame["positions"].to_numpy()).astype(np.float64)
        g = int(round(np.sqrt(flat.shape[1] / 3)))
        return flat.reshape(-1, g, g, 3)
    from scripts.dataset import read_dataset

    return read_dataset(path).records["state"].astype(np.float64)


def generate_distill_dataset(agent, states, count, cfg: RenderConfig, params: SimParams, out_path, seed=0, progress=False):
    """
    Render + label `count` states drawn (seeded) from the source; duplicates are kept per occurrence.
    Pairs are written to the CLDS file in chunks of DISTILL_CHUNK; returns the number written.
    """
    states = np.asarray(states)
    rng = np.random.default_rng(seed)
    if count and len(states) == 0:
        raise EmptyDatasetError("state source is empty")
    picks = rng.choice(len(states), size=count, replace=count > len(states)) if count else np.array([], dtype=int)
    header = {
        "render": cfg.model_dump(),
        "sim_params": params.model_dump(),
        "q_bound": agent.config.q_bound,
        "seed": seed,
    }
    dtype = pair_dtype(cfg.size, cfg.size)
    noise = []
    with open(out_path, "wb") as f:
        f.write(_distill_preamble(cfg.size, count, header))
        chunk = np.zeros(min(max(count, 1), DISTILL_CHUNK), dtype=dtype)
        filled = 0
        for i, s in enumerate(tqdm(picks, desc="distill-data", disable=not progress)):
            state = ClothState.from_positions(states[s])
            image, nodes = rasterize(state, cfg, params, np.random.default_rng(episode_seed(seed, 3, i)))
            labels = project_teacher_labels(state, agent, cfg, params, nodes=nodes)
            chunk["observation"][filled] = image
            chunk["pick"][filled] = labels.pick
            chunk["place"][filled] = labels.place
            chunk["pick_mask"][filled] = labels.pick_mask
            chunk["place_mask"][filled] = labels.place_mask
            filled += 1
            if filled == len(chunk):
                f.write(chunk.tobytes())
                filled = 0
            if i < 20:
                noise.append(projection_noise(state, agent, cfg, params))
        if filled:
            f.write(chunk[:filled].tobytes())
    if noise:
        logger.info(f"Label projection noise (MSE on node pixels): {np.mean(noise):.4f}")
    logger.info(f"Wrote {count} distillation pairs to {out_path}")
    return int(count)


def _conv_block(cin, cout, rng, stride=1):
    return Sequential(Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng), Gelu())


class StudentNet(Layer):
    """Three-level U-Net (16/32/64 channels) with a pick/place two-channel head."""

    def __init__(self, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.enc1 = _conv_block(3, 16, rng)
        self.down1 = _conv_block(16, 32, rng, stride=2)
        self.down2 = _conv_block(32, 64, rng, stride=2)
        self.up2 = Sequential(TransposedConv2d(64, 32, 4, stride=2, padding=1, rng=rng), Gelu())
        self.dec2 = _conv_block(64, 32, rng)
        self.up1 = Sequential(TransposedConv2d(32, 16, 4, stride=2, padding=1, rng=rng), Gelu())
        self.dec1 = _conv_block(32, 16, rng)
        self.head = Conv2d(16, 2, 1, rng=rng)
        self.cat = Concat(axis=1)

    def _stages(self):
        return ("enc1", "down1", "down2", "up2", "dec2", "up1", "dec1", "head")

    def named_parameters(self, prefix=""):
        for name in self._stages():
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError("student input sides must be divisible by 4")
        e1, c1 = self.enc1.forward(x)
        e2, c2 = self.down1.forward(e1)
        e3, c3 = self.down2.forward(e2)
        u2, cu2 = self.up2.forward(e3)
        j2, cj2 = self.cat.forward([u2, e2])
        d2, cd2 = self.dec2.forward(j2)
        u1, cu1 = self.up1.forward(d2)
        j1, cj1 = self.cat.forward([u1, e1])
        d1, cd1 = self.dec1.forward(j1)
        out, ch = self.head.forward(d1)
        return out, (c1, c2, c3, cu2, cj2, cd2, cu1, cj1, cd1, ch)

    def backward(self, cache, dout):
        c1, c2, c3, cu2, cj2, cd2, cu1, cj1, cd1, ch = self._cache_or_raise(cache)
        dd1 = self.head.backward(ch, dout)
        du1, de1_skip = self.cat.backward(cj1, self.dec1.backward(cd1, dd1))
        dd2 = self.up1.backward(cu1, du1)
        du2, de2_skip = self.cat.backward(cj2, self.dec2.backward(cd2, dd2))
        de3 = self.up2.backward(cu2, du2)
        de2 = self.down2.backward(c3, de3) + de2_skip
        de1 = self.down1.backward(c2, de2) + de1_skip
        return self.enc1.backward(c1, de1)


def _batch_arrays(pairs, scale):
    x = pairs["observation"].transpose(0, 3, 1, 2).astype(np.float32)
    target = np.stack([pairs["pick"], pairs["place"]], axis=1).astype(np.float32) / scale
    mask = np.stack([pairs["pick_mask"], pairs["place_mask"]], axis=1).astype(np.float32)
    return x, target, mask


def masked_mse(output, target, mask):
    """Mean squared error over masked pixels of both channels, and its gradient."""
    denom = max(float(mask.sum()), 1.0)
    diff = (output - target) * mask
    return float(np.sum(diff * diff) / denom), (2.0 * diff / denom).astype(output.dtype)


def _evaluate(student, pairs, scale, batch_size):
    total, weight = 0.0, 0.0
    for start in range(0, len(pairs), batch_size):
        x, target, mask = _batch_arrays(pairs[start : start + batch_size], scale)
        loss, _ = masked_mse(student(x), target, mask)
        w = max(float(mask.sum()), 1.0)
        total += loss * w
        weight += w
    return total / weight if weight else float("nan")


@dataclass
class StudentRun:
    student: StudentNet
    history: list  # (epoch, train_loss, validation_loss); epoch 0 is the initialization


def train_student(distill_path, out_path, epochs, lr=1e-3, batch_size=16, seed=0, validation_fraction=0.2, progress=False):
    pairs, header = read_distill_file(distill_path)
    if len(pairs) == 0:
        raise EmptyDatasetError(f"{distill_path} holds no distillation pairs")
    scale = float(header.get("q_bound", 1.0))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pairs))
    n_val = min(int(round(validation_fraction * len(pairs))), len(pairs) - 1)
    val, train = pairs[np.sort(perm[:n_val])], pairs[np.sort(perm[n_val:])]
    student = StudentNet(seed)
    optimizer = Adam(student.parameters(), lr=lr, flavor="adam")
    history = [(0, _evaluate(student, train, scale, batch_size), _evaluate(student, val, scale, batch_size))]
    logger.info(f"Distill: {len(train)} train / {len(val)} validation pairs, {student.num_parameters()} parameters")
    for epoch in tqdm(range(1, epochs + 1), desc="distill-train", disable=not progress):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            x, target, mask = _batch_arrays(train[order[start : start + batch_size]], scale)
            out, cache = student.forward(x)
            _, grad = masked_mse(out, target, mask)
            optimizer.zero_grad()
            student.backward(cache, grad)
            optimizer.step()
        history.append((epoch, _evaluate(student, train, scale, batch_size), _evaluate(student, val, scale, batch_size)))
        logger.info(f"Distill epoch {epoch}: train {history[-1][1]:.5f} validation {history[-1][2]:.5f}")
    save_student(out_path, student, {**header, "history": history})
    return StudentRun(student, history)


def save_student(path, student, header):
    tensors = {f"student.{name}": p.value for name, p in student.named_parameters()}
    save_tensors(path, tensors, {"kind": "student", **header})


def load_student(path):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "student":
        raise ArtifactFormatError(f"{path} is not a student checkpoint")
    student = StudentNet()
    for name, p in student.named_parameters():
        key = f"student.{name}"
        if key not in tensors or tensors[key].shape != p.value.shape:
            raise ArtifactFormatError(f"{path}: tensor {key} missing or mis-shaped")
        p.value = tensors[key].copy()
    return student, meta


def action_from_maps(maps, observation, state, cfg: RenderConfig, params: SimParams):
    """Pick: best silhouette pixel mapped to its nearest node. Place: best workspace pixel."""
    silhouette = silhouette_mask(observation, cfg)
    if not silhouette.any():
        raise EmptySilhouetteError("no cloth pixels found in the observation")
    frame = frame_for(cfg, params)
    pick_px = np.unravel_index(np.argmax(np.where(silhouette, maps[0], -np.inf)), silhouette.shape)
    place_px = np.unravel_index(np.argmax(np.where(frame.workspace_mask(), maps[1], -np.inf)), silhouette.shape)
    node = node_for_point(state, frame.pixel_center(*pick_px), np.inf)
    uv = np.clip(scene_to_normalized(frame.pixel_center(*place_px), params.workspace_side), 0.0, 1.0)
    return PickPlaceAction(node, (float(uv[0]), float(uv[1])))


def student_policy(student, observation, state, cfg: RenderConfig, params: SimParams):
    maps = student(observation.transpose(2, 0, 1)[None].astype(np.float32))[0]
    return action_from_maps(maps, observation, state, cfg, params)


def write_ppm(path, image):
    image = np.clip(np.asarray(image), 0.0, 1.0)
    height, width = image.shape[:2]
    pixels = np.round(image * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, width, height, rest = data.split(maxsplit=3)
    if magic != b"P6":
        raise ArtifactFormatError(f"{path} is not a binary PPM")
    width, height = int(width), int(height)
    # exactly one whitespace byte separates maxval from the raster
    maxval = rest.split(maxsplit=1)[0]
    pixels = np.frombuffer(rest[len(maxval) + 1 : len(maxval) + 1 + width * height * 3], dtype=np.uint8)
    return pixels.reshape(height, width, 3)
