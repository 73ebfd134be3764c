import numpy as np
import pytest

from scripts.config import SimParams
from scripts.errors import EmptyDatasetError
from scripts.features import (
    NormStats,
    compute_norm_stats,
    denormalize,
    normalize,
    to_state_image,
    to_state_images,
)
from scripts.sim_core import ClothState, flat_state


def test_flat_cloth_image_is_a_ramp(small_params):
    img = to_state_image(flat_state(small_params))
    interior = img[1:-1, 1:-1]
    assert np.all(np.diff(interior[..., 0], axis=0) > 0)
    assert np.allclose(np.diff(interior[..., 0], axis=1), 0)
    assert np.all(np.diff(interior[..., 1], axis=1) > 0)
    assert np.allclose(interior[..., 2], 0)


def test_border_is_zero_and_interior_matches_positions(small_params, rng):
    pos = rng.normal(size=(6, 6, 3))
    img = to_state_image(ClothState.from_positions(pos))
    assert img.shape == (8, 8, 3)
    assert np.all(img[0] == 0) and np.all(img[-1] == 0)
    assert np.all(img[:, 0] == 0) and np.all(img[:, -1] == 0)
    assert np.allclose(img[1:-1, 1:-1], pos)


def test_translation_shifts_interior_only(small_params):
    state = flat_state(small_params)
    delta = np.array([0.05, -0.02, 0.01])
    a = to_state_image(state)
    b = to_state_image(ClothState.from_positions(state.positions + delta))
    assert np.allclose(b[1:-1, 1:-1] - a[1:-1, 1:-1], delta, atol=1e-6)
    assert np.all(b[0] == 0)


def test_paper_scale_image_size():
    img = to_state_image(flat_state(SimParams(grid_side=40)))
    assert img.shape == (42, 42, 3)
    assert img[1:-1, 1:-1].size == 4800


def test_batched_images_are_nchw(rng):
    pos = rng.normal(size=(4, 6, 6, 3))
    batch = to_state_images(pos)
    assert batch.shape == (4, 3, 8, 8)
    assert np.allclose(batch[2].transpose(1, 2, 0), to_state_image(pos[2]))


def test_identity_stats_leave_images_unchanged(rng):
    img = rng.normal(size=(8, 8, 3)).astype(np.float32)
    assert np.allclose(normalize(img, NormStats.identity()), img)


def test_image_at_mean_normalizes_to_zero():
    stats = NormStats([0.1, -0.2, 0.3], [2.0, 3.0, 4.0])
    img = np.broadcast_to(np.array([0.1, -0.2, 0.3]), (8, 8, 3))
    assert np.allclose(normalize(img, stats), 0)


def test_normalize_round_trip_both_layouts(rng):
    stats = NormStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    hwc = rng.normal(size=(8, 8, 3))
    nchw = rng.normal(size=(2, 3, 8, 8))
    assert np.allclose(denormalize(normalize(hwc, stats), stats), hwc, atol=1e-6)
    assert np.allclose(denormalize(normalize(nchw, stats), stats), nchw, atol=1e-6)


def test_border_is_normalized_too():
    stats = NormStats([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    img = normalize(np.zeros((8, 8, 3)), stats)
    assert np.allclose(img[0, 0], [-1.0, -2.0, -3.0])


def test_constant_state_hits_std_floor():
    stats = compute_norm_stats([np.full((6, 6, 3), 0.5)])
    assert np.allclose(stats.mean, 0.5)
    assert np.allclose(stats.std, 1e-8)


def test_two_point_statistics():
    stats = compute_norm_stats([np.zeros((4, 4, 3)), np.full((4, 4, 3), 2.0)])
    assert np.allclose(stats.mean, 1.0)
    assert np.allclose(stats.std, 1.0)


def test_streaming_matches_two_pass(rng):
    states = [rng.normal(loc=i * 0.01, size=(6, 6, 3)) for i in range(200)]
    stats = compute_norm_stats(iter(states))
    stacked = np.stack(states).reshape(-1, 3)
    assert np.allclose(stats.mean, stacked.mean(axis=0), rtol=1e-6)
    assert np.allclose(stats.std, stacked.std(axis=0), rtol=1e-6)


def test_empty_dataset_has_no_stats():
    with pytest.raises(EmptyDatasetError):
        compute_norm_stats([])


def test_stats_json_round_trip():
    stats = NormStats([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
    back = NormStats.from_json(stats.to_json())
    assert np.allclose(back.mean, stats.mean)
    assert np.allclose(back.std, stats.std)
