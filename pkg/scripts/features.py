"""
State-image features for the Q-networks.
- to_state_image: particle xyz written into a 3-channel (G+2)x(G+2) image with a zero border
- NormStats: per-channel mean/std from the offline dataset, streaming (Welford/Chan) accumulation
- normalize / denormalize apply the same affine map to every pixel, border included
"""

import json
from dataclasses import dataclass

import numpy as np

from scripts.errors import EmptyDatasetError

STD_FLOOR = 1e-8


def to_state_image(state):
    """(G+2, G+2, 3) float32 image; accepts a ClothState or a (G, G, 3) position array."""
    positions = getattr(state, "positions", state)
    positions = np.asarray(positions)
    g = positions.shape[0]
    img = np.zeros((g + 2, g + 2, 3), dtype=np.float32)
    img[1:-1, 1:-1] = positions
    return img


def to_state_images(positions):
    """Batched variant: (B, G, G, 3) positions -> (B, 3, G+2, G+2) NCHW float32."""
    positions = np.asarray(positions)
    b, g = positions.shape[0], positions.shape[1]
    out = np.zeros((b, 3, g + 2, g + 2), dtype=np.float32)
    out[:, :, 1:-1, 1:-1] = positions.transpose(0, 3, 1, 2)
    return out


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), STD_FLOOR)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.ones(3))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["mean"]), np.array(data["std"]))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _channel_axis(img):
    # HWC single images carry channels last, NCHW batches on axis 1
    return -1 if img.ndim == 3 else 1


def _broadcast(vec, img):
    shape = [1] * img.ndim
    shape[_channel_axis(img)] = 3
    return vec.reshape(shape)


def normalize(img, stats: NormStats):
    img = np.asarray(img)
    out = (img - _broadcast(stats.mean, img)) / _broadcast(stats.std, img)
    return out.astype(np.float32)


def denormalize(img, stats: NormStats):
    img = np.asarray(img, dtype=np.float64)
    return img * _broadcast(stats.std, img) + _broadcast(stats.mean, img)


def compute_norm_stats(states):
    """Per-channel mean/std over interior pixels of every state, single pass."""
    count = 0
    mean = np.zeros(3)
    m2 = np.zeros(3)
    for state in states:
        values = np.asarray(getattr(state, "positions", state), dtype=np.float64).reshape(-1, 3)
        n_b = len(values)
        if n_b == 0:
            continue
        mean_b = values.mean(axis=0)
        m2_b = ((values - mean_b) ** 2).sum(axis=0)
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    if count == 0:
        raise EmptyDatasetError("cannot compute normalization statistics of an empty dataset")
    return NormStats(mean, np.sqrt(m2 / count))
