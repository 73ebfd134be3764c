import numpy as np
import pytest

from scripts.agent import (
    Agent,
    Batch,
    QNetwork,
    bound_loss,
    cell_center,
    cell_of,
    compute_targets,
    epsilon_schedule,
    loss_and_grad,
    pick_encodings,
    pixel_pick_adapter,
    polyak_update,
    q_pick,
    q_place,
    select_action,
    td_loss,
)
from scripts.config import N_OBJECTIVES, AgentConfig
from scripts.errors import ArtifactFormatError, InvalidActionError
from scripts.checkpoint import save_tensors
from scripts.features import NormStats
from scripts.neural import Adam
from scripts.rewards import objective_mask
from scripts.sim_core import flat_state


def _images(config, rng, n=1):
    g = config.grid_side + 2
    return rng.normal(size=(n, 3, g, g)).astype(np.float32)


def _batch(config, rng, n=4, dones=0.0):
    return Batch(
        states=_images(config, rng, n),
        picks=rng.integers(config.pick_grid**2, size=n),
        places=rng.integers(config.place_grid**2, size=n),
        rewards=rng.uniform(0, 50, size=(n, N_OBJECTIVES)).astype(np.float32),
        dones=np.full(n, dones, dtype=np.float32),
        next_states=_images(config, rng, n),
    )


class FixedMaps:
    """Stand-in network returning fixed maps, for hand-traced targets."""

    def __init__(self, pick, place):
        self.pick, self.place = pick, place

    def pick_maps(self, images):
        return np.broadcast_to(self.pick, (len(images), N_OBJECTIVES) + self.pick.shape).copy()

    def place_maps(self, images, enc):
        return np.broadcast_to(self.place, (len(images), N_OBJECTIVES) + self.place.shape).copy()


def test_map_shapes_and_determinism(small_config, rng):
    net = QNetwork(small_config)
    image = _images(small_config, rng)[0]
    pick = q_pick(net, image)
    assert pick.shape == (6, 6)
    assert q_place(net, image, 3).shape == (8, 8)
    assert np.array_equal(pick, q_pick(net, image))
    assert np.array_equal(q_place(net, image, 3), q_place(net, image, 3))


def test_hwc_and_chw_inputs_agree(small_config, rng):
    net = QNetwork(small_config)
    image = _images(small_config, rng)[0]
    assert np.allclose(q_pick(net, image), q_pick(net, image.transpose(1, 2, 0)))


def test_untrained_maps_are_finite(small_config, rng):
    net = QNetwork(small_config)
    images = _images(small_config, rng, n=100)
    assert np.all(np.isfinite(net.pick_maps(images)))
    enc = pick_encodings(images, rng.integers(36, size=100), small_config)
    assert np.all(np.isfinite(net.place_maps(images, enc)))


def test_linear_encoder_and_pixel_mode_shapes(rng):
    config = AgentConfig(grid_side=6, place_grid=8, encoder="linear", pick_mode="pixel")
    net = QNetwork(config)
    image = _images(config, rng)[0]
    assert q_pick(net, image).shape == (8, 8)
    assert q_place(net, image, 63).shape == (8, 8)


def test_invalid_pick_index(small_config, rng):
    net = QNetwork(small_config)
    with pytest.raises(InvalidActionError):
        q_place(net, _images(small_config, rng)[0], 36)


def test_greedy_action_is_the_argmax_pair(small_config, rng):
    net = QNetwork(small_config)
    image = _images(small_config, rng)[0]
    action = select_action(net, image, 0.0, 0.0, rng)
    pick = int(np.argmax(q_pick(net, image)))
    place = int(np.argmax(q_place(net, image, pick)))
    assert action.pick == pick
    assert action.place == cell_center(place, 8)


def test_full_exploration_is_uniform(small_config, rng):
    net = QNetwork(small_config)
    image = _images(small_config, rng)[0]
    draws = 20000
    counts = np.bincount([select_action(net, image, 1.0, 1.0, rng).pick for _ in range(draws)], minlength=36)
    expected = draws / 36
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # 35 degrees of freedom, 0.999 quantile is about 66.6
    assert chi2 < 66.6


def test_random_pick_greedy_place(small_config, rng):
    net = QNetwork(small_config)
    image = _images(small_config, rng)[0]
    for _ in range(5):
        action = select_action(net, image, 1.0, 0.0, rng)
        place = int(np.argmax(q_place(net, image, action.pick)))
        assert action.place == cell_center(place, 8)


def test_constant_shift_keeps_greedy_choice(small_config, rng):
    net = QNetwork(small_config)
    image = _images(small_config, rng)[0]
    before = select_action(net, image, 0.0, 0.0, rng)
    for head in (net.pick_head, net.place_head):
        head.layers[-2].params["bias"].value += 7.0
    assert select_action(net, image, 0.0, 0.0, rng) == before


def test_cell_helpers():
    assert cell_center(0, 4) == (0.125, 0.125)
    assert cell_of((0.99, 0.01), 4) == 12
    assert cell_of((1.0, 1.0), 4) == 15
    assert cell_of(cell_center(9, 4), 4) == 9


def test_terminal_targets_are_the_reward(small_config, rng):
    batch = _batch(small_config, rng, dones=1.0)
    batch.rewards[:] = 50.0
    net = QNetwork(small_config)
    _, place_targets = compute_targets(batch, net, net.copy(), small_config)
    assert np.all(place_targets == 50.0)


def test_double_estimator_uses_target_value_at_online_argmax():
    config = AgentConfig(grid_side=2, place_grid=4)
    online = FixedMaps(np.array([[1.0, 5.0], [0.0, 0.0]]), np.zeros((4, 4)))
    place = np.zeros((4, 4))
    place[2, 1] = 12.0
    target = FixedMaps(np.array([[30.0, 20.0], [0.0, 0.0]]), place)
    batch = Batch(
        states=np.zeros((1, 3, 4, 4), dtype=np.float32),
        picks=np.array([2]),
        places=np.array([0]),
        rewards=np.full((1, N_OBJECTIVES), 10.0, dtype=np.float32),
        dones=np.zeros(1, dtype=np.float32),
        next_states=np.zeros((1, 3, 4, 4), dtype=np.float32),
    )
    pick_targets, place_targets = compute_targets(batch, online, target, config)
    assert place_targets[0, 0] == pytest.approx(10.0 + 0.9 * 20.0)
    assert pick_targets[0, 0] == pytest.approx(12.0)


def test_self_targets_match_max_of_next_pick_map(small_config, rng):
    batch = _batch(small_config, rng)
    net = QNetwork(small_config)
    _, place_targets = compute_targets(batch, net, net.copy(), small_config)
    best = net.pick_maps(batch.next_states).reshape(len(batch), N_OBJECTIVES, -1).max(axis=2)
    assert np.allclose(place_targets, batch.rewards + 0.9 * best, rtol=1e-5, atol=1e-4)


def test_empty_batch_is_rejected(small_config, rng):
    net = QNetwork(small_config)
    with pytest.raises(ValueError):
        compute_targets(_batch(small_config, rng, n=0), net, net, small_config)


def test_single_element_squared_error():
    pick_maps = np.zeros((1, N_OBJECTIVES, 2, 2), dtype=np.float32)
    place_maps = np.zeros((1, N_OBJECTIVES, 2, 2), dtype=np.float32)
    pick_maps[0, :, 0, 1] = 3.0
    targets = np.full((1, N_OBJECTIVES), 5.0, dtype=np.float32)
    l_pick, l_place, dpick, _ = td_loss(
        pick_maps, place_maps, [1], [0], targets, np.zeros_like(targets), objective_mask(1)
    )
    assert l_pick == pytest.approx(4.0)
    assert l_place == 0.0
    assert dpick[0, 0, 0, 1] == pytest.approx(-4.0)
    assert np.all(dpick[0, 1:] == 0)


def test_perfect_predictions_have_zero_td_loss(rng):
    pick_maps = rng.normal(size=(3, N_OBJECTIVES, 4, 4)).astype(np.float32)
    place_maps = rng.normal(size=(3, N_OBJECTIVES, 5, 5)).astype(np.float32)
    picks, places = np.array([0, 5, 15]), np.array([24, 3, 7])
    pick_t = pick_maps.reshape(3, N_OBJECTIVES, -1)[np.arange(3), :, picks]
    place_t = place_maps.reshape(3, N_OBJECTIVES, -1)[np.arange(3), :, places]
    l_pick, l_place, _, _ = td_loss(pick_maps, place_maps, picks, places, pick_t, place_t, objective_mask(9))
    assert l_pick == 0.0 and l_place == 0.0


def test_bound_loss_is_silent_below_the_bound(rng):
    pick_maps = rng.uniform(-100, 499, size=(2, N_OBJECTIVES, 4, 4)).astype(np.float32)
    place_maps = rng.uniform(-100, 499, size=(2, N_OBJECTIVES, 5, 5)).astype(np.float32)
    loss, dpick, dplace = bound_loss(pick_maps, place_maps, 500.0, objective_mask(9))
    assert loss == 0.0
    assert not dpick.any() and not dplace.any()


def test_bound_loss_pulls_inflated_maps_under_the_bound(small_config, rng):
    assert small_config.q_bound == pytest.approx(500.0)
    net = QNetwork(small_config)
    biases = []
    for head in (net.pick_head, net.place_head):
        last = head.layers[-2]
        last.params["weight"].value[...] = 0.0
        last.params["bias"].value[...] = 1000.0
        biases.append(last.params["bias"])
    opt = Adam(biases, lr=10.0, weight_decay=0.0, flavor="adam")
    images = _images(small_config, rng)
    enc = pick_encodings(images, [0], small_config)
    mask = objective_mask(9)
    highest = []
    for _ in range(300):
        net.zero_grad()
        (pick_maps, place_maps), cache = net.forward((images, enc))
        highest.append(max(pick_maps.max(), place_maps.max()))
        _, dpick, dplace = bound_loss(pick_maps, place_maps, small_config.q_bound, mask)
        net.backward(cache, (dpick, dplace))
        opt.step()
    assert highest[0] == pytest.approx(1000.0)
    assert all(b <= a for a, b in zip(highest, highest[1:]))
    assert highest[-1] <= 505.0


def test_loss_never_touches_target_parameters(small_config, rng):
    agent = Agent(small_config)
    batch = _batch(small_config, rng)
    targets = compute_targets(batch, agent.online, agent.target, small_config)
    agent.online.zero_grad()
    agent.target.zero_grad()
    terms = loss_and_grad(agent.online, batch, targets, small_config, True, objective_mask(9))
    assert terms.total == pytest.approx(terms.pick + terms.place + terms.bound)
    assert any(p.grad.any() for p in agent.online.parameters())
    assert not any(p.grad.any() for p in agent.target.parameters())


def test_detached_targets_give_identical_online_gradients(small_config, rng):
    agent = Agent(small_config)
    batch = _batch(small_config, rng)
    targets = compute_targets(batch, agent.online, agent.target, small_config)

    def grads():
        agent.online.zero_grad()
        loss_and_grad(agent.online, batch, targets, small_config, False, objective_mask(9))
        return [p.grad.copy() for p in agent.online.parameters()]

    first = grads()
    for p in agent.target.parameters():
        p.value += 1.0
    assert all(np.array_equal(a, b) for a, b in zip(first, grads()))


def test_single_objective_mask_zeroes_auxiliary_gradients(small_config, rng):
    agent = Agent(small_config)
    batch = _batch(small_config, rng)
    pick_t, place_t = compute_targets(batch, agent.online, agent.target, small_config)
    mask = objective_mask(1)
    enc = pick_encodings(batch.states, batch.picks, small_config)
    (pick_maps, place_maps), _ = agent.online.forward((batch.states, enc))
    _, _, dpick, dplace = td_loss(pick_maps, place_maps, batch.picks, batch.places, pick_t, place_t, mask)
    assert not dpick[:, 1:].any() and not dplace[:, 1:].any()
    assert dpick[:, 0].any()

    def grads(targets):
        agent.online.zero_grad()
        loss_and_grad(agent.online, batch, targets, small_config, True, mask)
        return [p.grad.copy() for p in agent.online.parameters()]

    first = grads((pick_t, place_t))
    noisy_pick, noisy_place = pick_t.copy(), place_t.copy()
    noisy_pick[:, 1:] += 1e4
    noisy_place[:, 1:] -= 1e4
    assert all(np.array_equal(a, b) for a, b in zip(first, grads((noisy_pick, noisy_place))))


@pytest.mark.parametrize("tau", [1.0, 0.5, 5e-4])
def test_polyak_update_is_exact_float32_blend(small_config, tau):
    online = QNetwork(small_config, rng=np.random.default_rng(1))
    target = QNetwork(small_config, rng=np.random.default_rng(2))
    before = [p.value.copy() for p in target.parameters()]
    polyak_update(target, online, tau)
    for old, new, on in zip(before, target.parameters(), online.parameters()):
        assert np.array_equal(new.value, np.float32(tau) * on.value + np.float32(1.0 - tau) * old)


def test_polyak_tau_one_copies(small_config):
    online = QNetwork(small_config, rng=np.random.default_rng(1))
    target = QNetwork(small_config, rng=np.random.default_rng(2))
    polyak_update(target, online, 1.0)
    assert all(np.array_equal(t.value, o.value) for t, o in zip(target.parameters(), online.parameters()))


def test_polyak_small_step_and_composition(small_config):
    online = QNetwork(small_config)
    target = online.copy()
    for p in online.parameters():
        p.value[...] = 1.0
    for p in target.parameters():
        p.value[...] = 0.0
    twice = target.copy()
    polyak_update(target, online, 5e-4)
    assert all(np.allclose(p.value, 5e-4) for p in target.parameters())
    polyak_update(twice, online, 0.1)
    polyak_update(twice, online, 0.1)
    once = online.copy()
    for p in once.parameters():
        p.value[...] = 0.0
    polyak_update(once, online, 1.0 - 0.9**2)
    assert all(np.allclose(a.value, b.value, atol=1e-6) for a, b in zip(twice.parameters(), once.parameters()))


def test_epsilon_schedule():
    constant = AgentConfig(eps_pick=0.3, eps_place=0.2)
    assert epsilon_schedule(constant, 5, 10) == (0.3, 0.2)
    decaying = AgentConfig(eps_pick=0.3, eps_place=0.2, eps_pick_final=0.1, eps_place_final=0.0)
    assert epsilon_schedule(decaying, 0, 5) == (0.3, 0.2)
    assert epsilon_schedule(decaying, 4, 5) == pytest.approx((0.1, 0.0))


def test_pixel_adapter_hits_cloth_and_misses_corners(small_params):
    state = flat_state(small_params)
    centre_cell = 4 * 8 + 4
    assert pixel_pick_adapter(state, centre_cell, 8, small_params) is not None
    assert pixel_pick_adapter(state, 0, 8, small_params) is None


def test_agent_checkpoint_round_trip(tmp_path, small_config, rng):
    agent = Agent(small_config, NormStats([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]))
    polyak_update(agent.target, QNetwork(small_config, rng=np.random.default_rng(9)), 0.5)
    path = tmp_path / "agent.clqn"
    agent.save(path, stage="pretrain")
    loaded = Agent.load(path)
    assert loaded.config == small_config
    assert loaded.metadata["stage"] == "pretrain"
    assert np.allclose(loaded.stats.std, [1.0, 2.0, 3.0])
    for net, other in ((agent.online, loaded.online), (agent.target, loaded.target)):
        for (name, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
            assert a.value.tobytes() == b.value.tobytes(), name
    image = _images(small_config, rng)[0]
    assert np.array_equal(q_pick(agent.online, image), q_pick(loaded.online, image))


def test_loading_a_foreign_checkpoint_fails(tmp_path):
    path = tmp_path / "student.clqn"
    save_tensors(path, {"w": np.zeros(2, dtype=np.float32)}, {"kind": "student"})
    with pytest.raises(ArtifactFormatError):
        Agent.load(path)
