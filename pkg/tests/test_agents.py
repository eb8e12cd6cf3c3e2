import numpy as np
import pytest
from hypothesis import given, strategies as st

from comma_ddpg import agents as ag
from comma_ddpg import nn
from comma_ddpg.agents import RewardCase

C1, C2 = RewardCase.GREEN_END_TRAFFIC_LEFT, RewardCase.GREEN_ON_NO_TRAFFIC


def small_global(M=2, L=4, seed=0, gamma=0.9, hidden=(8, 8)):
    b = ag.make_bounds(15.0, 90.0, [120.0] * M)
    return ag.new_global_agent(M + L, b, np.random.default_rng(seed), gamma=gamma, hidden=hidden)


def random_batch(M=2, L=4, B=6, seed=1):
    rng = np.random.default_rng(seed)
    n = M + L
    items = [
        ag.Transition(S=rng.normal(size=n), A=rng.uniform(15, 90, M), R=rng.uniform(-1, 1, M),
                      S_next=rng.normal(size=n), A_next=rng.uniform(15, 90, M),
                      waits=rng.uniform(0, 100, M))
        for _ in range(B)
    ]
    return ag.Batch.from_transitions(items)


def zero_out(p):
    p.flat[:] = 0.0


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("N, g, case, R_max, N_max, G_max, expect", [
    (1, 0.0, C1, 1.0, 100.0, 90.0, 1.0),
    (0, 0.0, C1, 1.0, 100.0, 90.0, 1.0),
    (2, 0.0, C1, 1.0, 100.0, 90.0, -0.02),
    (50, 0.0, C1, 1.0, 100.0, 90.0, -0.5),
    (100, 0.0, C1, 1.0, 100.0, 90.0, -1.0),
    (150, 0.0, C1, 1.0, 100.0, 90.0, -1.5),
    (7, 0.0, C1, 2.0, 100.0, 90.0, -0.14),
    (50, 0.0, C1, 1.0, 200.0, 90.0, -0.25),
    (1, 0.0, C1, 3.0, 10.0, 90.0, 3.0),
    (10, 0.0, C1, 3.0, 10.0, 90.0, -3.0),
    (0, 0.0, C2, 1.0, 100.0, 90.0, 1.0),
    (0, 1.0, C2, 1.0, 100.0, 90.0, 1.0),
    (0, 30.0, C2, 1.0, 100.0, 90.0, -1.0 / 3.0),
    (0, 45.0, C2, 1.0, 100.0, 90.0, -0.5),
    (0, 90.0, C2, 1.0, 100.0, 90.0, -1.0),
    (0, 12.0, C2, 1.0, 100.0, 60.0, -0.2),
    (0, 1.5, C2, 2.0, 100.0, 90.0, -2.0 * 1.5 / 90.0),
    (5, 30.0, C2, 1.0, 100.0, 90.0, -1.0 / 3.0),
    (5, 30.0, None, 1.0, 100.0, 90.0, 0.0),
    (0, 0.0, None, 1.0, 100.0, 90.0, 0.0),
])
def test_local_reward_table(N, g, case, R_max, N_max, G_max, expect):
    assert ag.local_reward(N, g, case, R_max, N_max, G_max) == pytest.approx(expect, abs=1e-15)


def test_local_reward_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ag.local_reward(-1, 0.0, C1)
    with pytest.raises(ValueError):
        ag.local_reward(0, 91.0, C2)
    with pytest.raises(ValueError):
        ag.local_reward(0, 0.0, C1, N_max=0.0)


@pytest.mark.parametrize("waits, M, expect", [
    ([[10.0]], 1, -10.0),
    ([[]], 1, 0.0),
    ([[], [], []], 3, 0.0),
    ([[5.0, 5.0], [10.0]], 2, -10.0),
    ([3.0, 9.0], 2, -6.0),
    ([[1.0, 2.0, 3.0], [0.0], [4.0, 5.0]], 3, -5.0),
])
def test_global_reward_table(waits, M, expect):
    assert ag.global_reward(waits, M) == pytest.approx(expect, abs=1e-15)


def test_global_reward_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ag.global_reward([])
    with pytest.raises(ValueError):
        ag.global_reward([[1.0]], M=2)
    with pytest.raises(ValueError):
        ag.global_reward([[-1.0]])


@given(st.lists(st.lists(st.floats(0, 1e4), max_size=5), min_size=1, max_size=6))
def test_global_reward_is_non_positive_and_scales(waits):
    r = ag.global_reward(waits)
    assert r <= 0.0
    doubled = [[2 * w for w in ws] for ws in waits]
    assert ag.global_reward(doubled) == pytest.approx(2 * r, rel=1e-12, abs=1e-12)


def test_act_endpoints_and_midpoint():
    g = small_global()
    loc = ag.local_from_global(g, 0)
    zero_out(loc.actor)
    assert ag.act_local(loc, np.ones(6)) == 52.5
    loc.actor.biases[-1][:] = 50.0  # tanh saturates at +1
    assert ag.act_local(loc, np.ones(6)) == pytest.approx(90.0)
    loc.actor.biases[-1][:] = -50.0
    assert ag.act_local(loc, np.ones(6)) == pytest.approx(15.0)
    with pytest.raises(ValueError):
        ag.act_local(loc, np.ones(5))


def test_zero_global_actor_gives_midpoints_and_half_weights():
    b = ag.make_bounds(15.0, 90.0, [120.0] * 5)
    g = ag.new_global_agent(23, b, np.random.default_rng(0))
    assert g.actor.n_out == 10
    zero_out(g.actor)
    d, w = ag.act_global(g, np.zeros(23))
    assert d.tolist() == [52.5] * 5
    assert w.tolist() == [0.5] * 5
    assert g.actor_calls == 1


@given(seed=st.integers(0, 2**31))
def test_actions_stay_in_bounds(seed):
    rng = np.random.default_rng(seed)
    g = small_global(seed=seed)
    g.actor.flat *= 20
    d, w = ag.act_global(g, rng.normal(size=(5, 6)) * 10)
    assert np.all((d >= 15) & (d <= 90)) and np.all((w >= 0) & (w <= 1))
    a = ag.act_local(ag.local_from_global(g, 1), rng.normal(size=(5, 6)) * 10)
    assert np.all((a >= 15) & (a <= 90))


def test_local_init_reproduces_global_duration_head():
    g = small_global(M=3, L=5)
    x = np.random.default_rng(3).normal(size=(4, 8))
    d, _ = ag.act_global(g, x)
    for m in range(3):
        np.testing.assert_allclose(ag.act_local(ag.local_from_global(g, m), x), d[:, m], atol=1e-12)


def test_critic_targets_with_zero_discount():
    g = small_global(gamma=0.0)
    batch = random_batch()
    loc = ag.local_from_global(g, 1, gamma=0.0)
    np.testing.assert_array_equal(ag.local_critic_target(loc, batch), batch.R[:, 1])
    np.testing.assert_array_equal(ag.global_critic_target(g, batch), batch.r_global)


def test_zero_target_critic_adds_discounted_bias():
    g = small_global(gamma=0.9)
    loc = ag.local_from_global(g, 0)
    zero_out(loc.target_critic)
    loc.target_critic.biases[-1][:] = 2.0
    batch = random_batch()
    np.testing.assert_allclose(ag.local_critic_target(loc, batch), batch.R[:, 0] + 0.9 * 2.0, atol=1e-14)


def test_critic_loss_single_sample():
    loc = ag.local_from_global(small_global(), 0)
    zero_out(loc.critic)
    loc.critic.biases[-1][:] = 1.0
    batch = random_batch(B=1)
    loss, grads = ag.local_critic_loss(loc, batch, y=np.array([2.0]))
    assert loss == pytest.approx(1.0, abs=1e-15)
    loss, grads = ag.local_critic_loss(loc, batch, y=np.array([1.0]))
    assert loss == 0.0
    assert not np.any(grads.flat)


@pytest.mark.parametrize("which", ["local_critic", "local_actor", "global_critic", "global_actor"])
def test_loss_gradients_match_finite_differences(which):
    g = small_global(seed=4)
    loc = ag.local_from_global(g, 1)
    batch = random_batch(seed=5)
    y_loc = ag.local_critic_target(loc, batch)
    y_glob = ag.global_critic_target(g, batch)
    net, fn = {
        "local_critic": (loc.critic, lambda: ag.local_critic_loss(loc, batch, y_loc)),
        "local_actor": (loc.actor, lambda: ag.local_actor_loss(loc, batch)),
        "global_critic": (g.critic, lambda: ag.global_critic_loss(g, batch, y_glob)),
        "global_actor": (g.actor, lambda: ag.global_actor_loss(g, batch)),
    }[which]
    _, grads = fn()
    num = numeric_grad(lambda: fn()[0], net.flat)
    np.testing.assert_allclose(grads.flat, num, atol=1e-5, rtol=1e-4)


def test_actor_gradient_vanishes_without_action_pathway():
    g = small_global()
    loc = ag.local_from_global(g, 0)
    loc.critic.weights[0][:, 6:] = 0.0  # critic columns fed by the action
    _, grads = ag.local_actor_loss(loc, random_batch())
    assert not np.any(grads.flat)


def test_global_actor_weight_outputs_receive_no_gradient():
    g = small_global(M=2)
    _, grads = ag.global_actor_loss(g, random_batch())
    assert not np.any(grads.weights[-1][2:])
    assert not np.any(grads.biases[-1][2:])


def test_losses_are_bit_reproducible():
    a = ag.global_critic_loss(small_global(seed=9), random_batch(seed=9))
    b = ag.global_critic_loss(small_global(seed=9), random_batch(seed=9))
    assert a[0] == b[0]
    assert a[1].flat.tobytes() == b[1].flat.tobytes()


@given(seed=st.integers(0, 2**31), m=st.integers(0, 1))
def test_local_losses_read_only_own_reward(seed, m):
    g = small_global(seed=seed % 1000)
    loc = ag.local_from_global(g, m)
    batch = random_batch(seed=seed)
    base = ag.local_critic_loss(loc, batch)[0]
    other = 1 - m
    batch.R[:, other] += 1000.0
    batch.waits[:, other] += 1000.0
    assert ag.local_critic_loss(loc, batch)[0] == base


def test_global_losses_ignore_local_rewards():
    g = small_global(seed=2)
    batch = random_batch(seed=2)
    base = ag.global_critic_loss(g, batch)[0]
    batch.R[:] = 123.0
    assert ag.global_critic_loss(g, batch)[0] == base


def test_bundle_round_trip(tmp_path):
    g = small_global(M=3, L=5)
    locs = [ag.local_from_global(g, m, N_max=40.0) for m in range(3)]
    locs[2].actor.flat += 0.1
    ag.save_bundle(locs, g, tmp_path / "b")
    locs2, g2 = ag.load_bundle(tmp_path / "b")
    x = np.random.default_rng(0).normal(size=8)
    for a, b in zip(locs, locs2):
        assert (a.m, a.N_max, a.gamma) == (b.m, b.N_max, b.gamma)
        assert ag.act_local(a, x) == ag.act_local(b, x)
    for name in ("actor", "critic", "target_actor", "target_critic"):
        assert getattr(g, name).flat.tobytes() == getattr(g2, name).flat.tobytes()
    locs3, g3 = ag.load_bundle(tmp_path / "b", with_global=False)
    assert g3 is None and len(locs3) == 3


def test_corrupt_bundle_rejected(tmp_path):
    from comma_ddpg.errors import CheckpointError
    g = small_global()
    ag.save_bundle([ag.local_from_global(g, 0), ag.local_from_global(g, 1)], g, tmp_path / "b")
    p = tmp_path / "b" / "local_1" / "critic.bin"
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        ag.load_bundle(tmp_path / "b")
    with pytest.raises(CheckpointError):
        ag.load_bundle(tmp_path / "missing")


def test_soft_update_moves_target_slowly():
    g = small_global()
    g.actor.flat += 1.0
    before = g.target_actor.flat.copy()
    nn.soft_update(g.target_actor, g.actor, 0.995)
    np.testing.assert_allclose(g.target_actor.flat, before + 0.005, atol=1e-12)
