"""
Factorized pick/place Q-learning agent.
- QNetwork: shared encoder -> latent(32) -> pick head (K x K map) and pick-conditioned place head (P x P map)
- One output channel per objective in both heads; acting always reads the Flatten channel
- Double-estimator targets, squared TD losses with an objective mask, hinge bound on map maxima
- Agent bundles online/target networks, normalization stats and the optimizer, and round-trips through CLQN

Pick index is a node index (row * G + col) in node mode, a workspace cell (row * P + col) in pixel mode.
Place index is always a workspace cell; its centre is the normalized place point.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from loguru import logger

from scripts.checkpoint import load_tensors, save_tensors
from scripts.config import LATENT_SIZE, N_OBJECTIVES, AgentConfig
from scripts.errors import ArtifactFormatError, InvalidActionError
from scripts.features import NormStats, normalize, to_state_images
from scripts.neural import (
    Adam,
    Concat,
    Conv2d,
    Crop,
    Gelu,
    Layer,
    LayerNorm,
    Linear,
    Reshape,
    Sequential,
    TransposedConv2d,
)
from scripts.rewards import ObjectiveId
from scripts.sim_core import PickPlaceAction, node_for_point, normalized_to_scene, scene_to_normalized

PICK_ENCODING_SIZE = 5


def _conv_encoder(image_side, width, rng):
    c1, c2 = 16 * width, 32 * width
    s1 = (image_side + 2 * 2 - 5) // 2 + 1
    s2 = (s1 + 2 * 1 - 3) // 2 + 1
    return Sequential(
        Conv2d(3, c1, 5, stride=2, padding=2, rng=rng),
        LayerNorm((c1, s1, s1)),
        Gelu(),
        Conv2d(c1, c2, 3, stride=2, padding=1, rng=rng),
        LayerNorm((c2, s2, s2)),
        Gelu(),
        Reshape((c2 * s2 * s2,)),
        Linear(c2 * s2 * s2, LATENT_SIZE, rng=rng),
        LayerNorm(LATENT_SIZE),
        Gelu(),
    )


def _linear_encoder(image_side, width, rng):
    hidden = 128 * width
    flat = 3 * image_side * image_side
    return Sequential(
        Reshape((flat,)),
        Linear(flat, hidden, rng=rng),
        LayerNorm(hidden),
        Gelu(),
        Linear(hidden, LATENT_SIZE, rng=rng),
        LayerNorm(LATENT_SIZE),
        Gelu(),
    )


def _decoder_head(in_features, out_side, width, rng):
    ch = 8 * width
    h = math.ceil(out_side / 4)
    return Sequential(
        Linear(in_features, ch * h * h, rng=rng),
        Reshape((ch, h, h)),
        LayerNorm((ch, h, h)),
        Gelu(),
        TransposedConv2d(ch, ch, 4, stride=2, padding=1, rng=rng),
        LayerNorm((ch, 2 * h, 2 * h)),
        Gelu(),
        TransposedConv2d(ch, N_OBJECTIVES, 4, stride=2, padding=1, rng=rng),
        Crop(out_side, out_side),
    )


class QNetwork(Layer):
    def __init__(self, config: AgentConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        side = config.grid_side + 2
        build = _conv_encoder if config.encoder == "conv" else _linear_encoder
        self.encoder = build(side, config.width_multiplier, rng)
        self.pick_head = _decoder_head(LATENT_SIZE, config.pick_grid, config.width_multiplier, rng)
        self.concat = Concat(axis=1)
        self.place_head = _decoder_head(
            LATENT_SIZE + PICK_ENCODING_SIZE, config.place_grid, config.width_multiplier, rng
        )

    def named_parameters(self, prefix=""):
        yield from self.encoder.named_parameters(prefix + "encoder.")
        yield from self.pick_head.named_parameters(prefix + "pick_head.")
        yield from self.place_head.named_parameters(prefix + "place_head.")

    def forward(self, inputs):
        images, pick_enc = inputs
        latent, enc_cache = self.encoder.forward(images)
        pick, pick_cache = self.pick_head.forward(latent)
        joined, cat_cache = self.concat.forward([latent, pick_enc.astype(latent.dtype)])
        place, place_cache = self.place_head.forward(joined)
        return (pick, place), (enc_cache, pick_cache, cat_cache, place_cache)

    def backward(self, cache, dout):
        enc_cache, pick_cache, cat_cache, place_cache = self._cache_or_raise(cache)
        dpick, dplace = dout
        dlatent = self.pick_head.backward(pick_cache, dpick)
        djoined = self.place_head.backward(place_cache, dplace)
        dlatent = dlatent + self.concat.backward(cat_cache, djoined)[0]
        return self.encoder.backward(enc_cache, dlatent)

    def pick_maps(self, images):
        return self.pick_head(self.encoder(images))

    def place_maps(self, images, pick_enc):
        latent = self.encoder(images)
        return self.place_head(np.concatenate([latent, pick_enc.astype(latent.dtype)], axis=1))


def cell_center(cell, grid):
    row, col = divmod(int(cell), grid)
    return ((row + 0.5) / grid, (col + 0.5) / grid)


def cell_of(uv, grid):
    row = min(int(uv[0] * grid), grid - 1)
    col = min(int(uv[1] * grid), grid - 1)
    return row * grid + col


def pick_encodings(images, picks, config: AgentConfig):
    """(B, 5) place-head conditioning: normalized grid coordinates + the node's normalized xyz."""
    picks = np.asarray(picks, dtype=np.int64)
    enc = np.zeros((len(picks), PICK_ENCODING_SIZE), dtype=np.float32)
    k = config.pick_grid
    rows, cols = np.divmod(picks, k)
    if config.pick_mode == "node":
        enc[:, 0] = rows / max(k - 1, 1)
        enc[:, 1] = cols / max(k - 1, 1)
        enc[:, 2:] = images[np.arange(len(picks)), :, rows + 1, cols + 1]
    else:
        # pixel picks carry only the cell centre; position channels stay zero
        enc[:, 0] = (rows + 0.5) / k
        enc[:, 1] = (cols + 0.5) / k
    return enc


def state_images(positions, stats: NormStats):
    """Normalized NCHW images for a (B, G, G, 3) batch of particle positions."""
    return normalize(to_state_images(positions), stats)


def _single(image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[-1] == 3:
        image = image.transpose(2, 0, 1)
    return image[None] if image.ndim == 3 else image


def q_pick(net, image, objective=ObjectiveId.FLATTEN):
    """K x K pick map for one normalized state image (HWC or CHW)."""
    return net.pick_maps(_single(image))[0, int(objective)]


def q_place(net, image, pick, objective=ObjectiveId.FLATTEN):
    k = net.config.pick_grid
    if not 0 <= int(pick) < k * k:
        raise InvalidActionError(f"pick {pick} outside [0, {k * k})")
    batch = _single(image)
    return net.place_maps(batch, pick_encodings(batch, [pick], net.config))[0, int(objective)]


def select_action(net, image, eps_pick, eps_place, rng):
    """Epsilon-greedy pick then pick-conditioned place; exploration coins are drawn first."""
    config = net.config
    k, p = config.pick_grid, config.place_grid
    explore_pick = rng.random() < eps_pick
    explore_place = rng.random() < eps_place
    batch = _single(image)
    if explore_pick:
        pick = int(rng.integers(k * k))
    else:
        pick = int(np.argmax(q_pick(net, batch)))
    if explore_place:
        place = int(rng.integers(p * p))
    else:
        place = int(np.argmax(q_place(net, batch, pick)))
    return PickPlaceAction(pick, cell_center(place, p))


def pixel_pick_adapter(state, cell, place_grid, params):
    """Node nearest to a workspace cell centre within the grasp radius, or None for a miss."""
    xy = normalized_to_scene(cell_center(cell, place_grid), params.workspace_side)
    return node_for_point(state, xy, params.grasp_radius)


def node_to_cell(state, node, place_grid, params):
    xy = state.node_position(node)[:2]
    uv = np.clip(scene_to_normalized(xy, params.workspace_side), 0.0, 1.0)
    return cell_of(uv, place_grid)


@dataclass
class Batch:
    states: np.ndarray  # (B, 3, G+2, G+2) normalized
    picks: np.ndarray  # (B,)
    places: np.ndarray  # (B,)
    rewards: np.ndarray  # (B, N_OBJECTIVES)
    dones: np.ndarray  # (B,)
    next_states: np.ndarray

    def __len__(self):
        return len(self.picks)


def compute_targets(batch: Batch, online, target, config: AgentConfig):
    """
    Per-objective targets (B, N_OBJECTIVES):
      place: r + gamma * Q_pick_target(s', argmax_a Q_pick_online(s', a)), r alone when terminal
      pick:  max over cells of Q_place_target(s, pick)
    """
    if len(batch) == 0:
        raise ValueError("compute_targets needs a non-empty batch")
    online_next = online.pick_maps(batch.next_states)
    target_next = target.pick_maps(batch.next_states)
    b, o = online_next.shape[:2]
    online_flat = online_next.reshape(b, o, -1)
    greedy = np.argmax(online_flat, axis=2)
    evaluated = np.take_along_axis(target_next.reshape(b, o, -1), greedy[..., None], axis=2)[..., 0]
    not_done = 1.0 - np.asarray(batch.dones, dtype=np.float64)[:, None]
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    place_targets = rewards + config.gamma * not_done * evaluated

    enc = pick_encodings(batch.states, batch.picks, config)
    place_maps = target.place_maps(batch.states, enc)
    pick_targets = place_maps.reshape(b, place_maps.shape[1], -1).max(axis=2)
    return pick_targets.astype(np.float32), place_targets.astype(np.float32)


class LossTerms(NamedTuple):
    total: float
    pick: float
    place: float
    bound: float


def _taken(maps, index):
    b, o = maps.shape[:2]
    flat = maps.reshape(b, o, -1)
    return np.take_along_axis(flat, np.broadcast_to(index[:, None, None], (b, o, 1)), axis=2)[..., 0]


def _scatter(maps, index, values):
    b, o = maps.shape[:2]
    grad = np.zeros((b, o, maps[0, 0].size), dtype=maps.dtype)
    np.put_along_axis(grad, np.broadcast_to(index[:, None, None], (b, o, 1)), values[..., None], axis=2)
    return grad.reshape(maps.shape)


def td_loss(pick_maps, place_maps, picks, places, pick_targets, place_targets, mask):
    """Squared error at the taken entries, averaged over batch and active objectives."""
    picks = np.asarray(picks, dtype=np.int64)
    places = np.asarray(places, dtype=np.int64)
    weight = np.asarray(mask, dtype=np.float64)[None, :]
    denom = len(picks) * weight.sum()
    err_pick = (_taken(pick_maps, picks) - pick_targets) * weight
    err_place = (_taken(place_maps, places) - place_targets) * weight
    l_pick = float(np.sum(err_pick**2) / denom)
    l_place = float(np.sum(err_place**2) / denom)
    dpick = _scatter(pick_maps, picks, (2.0 * err_pick / denom).astype(pick_maps.dtype))
    dplace = _scatter(place_maps, places, (2.0 * err_place / denom).astype(place_maps.dtype))
    return l_pick, l_place, dpick, dplace


def _hinge(maps, bound, weight, denom):
    b, o = maps.shape[:2]
    flat = maps.reshape(b, o, -1)
    top = np.argmax(flat, axis=2)
    excess = np.maximum(np.take_along_axis(flat, top[..., None], axis=2)[..., 0] - bound, 0.0) * weight
    grad = np.zeros_like(flat)
    np.put_along_axis(grad, top[..., None], (2.0 * excess / denom)[..., None].astype(maps.dtype), axis=2)
    return float(np.sum(excess**2) / denom), grad.reshape(maps.shape)


def bound_loss(pick_maps, place_maps, q_bound, mask):
    """Mean squared excess of each map maximum above q_bound, summed over both heads."""
    weight = np.asarray(mask, dtype=np.float64)[None, :]
    denom = pick_maps.shape[0] * weight.sum()
    l_pick, dpick = _hinge(pick_maps, q_bound, weight, denom)
    l_place, dplace = _hinge(place_maps, q_bound, weight, denom)
    return l_pick + l_place, dpick, dplace


def loss_and_grad(net, batch: Batch, targets, config: AgentConfig, include_bound, mask):
    """Forward + backward on the online network; gradients accumulate into its parameters."""
    pick_targets, place_targets = targets
    enc = pick_encodings(batch.states, batch.picks, config)
    (pick_maps, place_maps), cache = net.forward((batch.states, enc))
    l_pick, l_place, dpick, dplace = td_loss(
        pick_maps, place_maps, batch.picks, batch.places, pick_targets, place_targets, mask
    )
    l_bound = 0.0
    if include_bound:
        l_bound, bpick, bplace = bound_loss(pick_maps, place_maps, config.q_bound, mask)
        dpick = dpick + bpick
        dplace = dplace + bplace
    net.backward(cache, (dpick, dplace))
    return LossTerms(l_pick + l_place + l_bound, l_pick, l_place, l_bound)


def polyak_update(target, online, tau):
    """target <- tau * online + (1 - tau) * target, elementwise in float32."""
    tau32 = np.float32(tau)
    keep = np.float32(1.0 - tau)
    for (name, tp), (_, op) in zip(target.named_parameters(), online.named_parameters()):
        if tp.value.shape != op.value.shape:
            raise ValueError(f"parameter {name} shape mismatch {tp.value.shape} vs {op.value.shape}")
        tp.value = (tau32 * op.value + keep * tp.value).astype(np.float32)
    return target


def epsilon_schedule(config: AgentConfig, block, n_blocks):
    """Constant epsilons, or linear decay towards the *_final values across fine-tuning blocks."""
    frac = block / max(n_blocks - 1, 1)

    def blend(start, end):
        return start if end is None else start + (end - start) * frac

    return blend(config.eps_pick, config.eps_pick_final), blend(config.eps_place, config.eps_place_final)


class Agent:
    def __init__(self, config: AgentConfig, stats: NormStats = None, lr=1e-3, weight_decay=1e-2, flavor="adamw"):
        self.config = config
        self.stats = stats or NormStats.identity()
        self.online = QNetwork(config)
        self.target = self.online.copy()
        self.optimizer = Adam(self.online.parameters(), lr=lr, weight_decay=weight_decay, flavor=flavor)

    def reset_optimizer(self, lr, weight_decay=0.0, flavor="adamw"):
        self.optimizer = Adam(self.online.parameters(), lr=lr, weight_decay=weight_decay, flavor=flavor)

    def images(self, positions):
        positions = np.asarray(positions)
        if positions.ndim == 3:
            positions = positions[None]
        return state_images(positions, self.stats)

    def act(self, state, rng, eps_pick=0.0, eps_place=0.0):
        return select_action(self.online, self.images(state.positions)[0], eps_pick, eps_place, rng)

    def train_step(self, batch: Batch, mask, include_bound):
        targets = compute_targets(batch, self.online, self.target, self.config)
        self.online.zero_grad()
        terms = loss_and_grad(self.online, batch, targets, self.config, include_bound, mask)
        self.optimizer.step()
        polyak_update(self.target, self.online, self.config.tau)
        return terms

    def num_parameters(self):
        return self.online.num_parameters()

    def save(self, path, **metadata):
        tensors = {}
        for name, p in self.online.named_parameters():
            tensors[f"online.{name}"] = p.value
        for name, p in self.target.named_parameters():
            tensors[f"target.{name}"] = p.value
        meta = {
            "kind": "agent",
            "config": self.config.model_dump(),
            "norm_stats": self.stats.to_dict(),
            "n_params": self.num_parameters(),
            **metadata,
        }
        save_tensors(path, tensors, meta)
        logger.debug(f"Saved agent checkpoint to {path}")

    @classmethod
    def load(cls, path):
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "agent":
            raise ArtifactFormatError(f"{path} is not an agent checkpoint")
        agent = cls(AgentConfig(**meta["config"]), NormStats.from_dict(meta["norm_stats"]))
        for prefix, net in (("online.", agent.online), ("target.", agent.target)):
            for name, p in net.named_parameters():
                key = prefix + name
                if key not in tensors or tensors[key].shape != p.value.shape:
                    raise ArtifactFormatError(f"{path}: tensor {key} missing or mis-shaped")
                p.value = tensors[key].copy()
        agent.reset_optimizer(lr=1e-3)
        agent.metadata = meta
        return agent
