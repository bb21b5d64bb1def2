"""Always-on, DAC-SM1 and DQN comparison policies."""

import numpy as np
import pandas as pd
import pytest

from cellfree_sleep import nn
from cellfree_sleep.baselines import (
    DQN_CURVE_COLUMNS,
    DqnAgent,
    ReplayBuffer,
    always_on_policy,
    available_policies,
    dac_sm1_policy,
    dqn_train,
    epsilon_at,
    epsilon_greedy,
    needs_checkpoint,
    resolve_policy,
    td_loss,
)
from cellfree_sleep.config import DacParams
from cellfree_sleep.env import NUM_JOINT_ACTIONS, APStatus, CellFreeEnv, JointAction
from cellfree_sleep.errors import CheckpointError
from cellfree_sleep.metrics import run_episodes


def _status(**overrides) -> APStatus:
    fields = dict(
        antennas=np.array([8, 8, 8, 8]),
        sleep_modes=np.zeros(4, dtype=int),
        waking=np.zeros(4, dtype=bool),
        associated=np.array([0, 2, 2, 2]),
        demand_rate=np.array([0.0, 10e6, 10e6, 10e6]),
        achieved_rate=np.array([0.0, 600e6, 500e6, 400e6]),
        max_antennas=8,
    )
    fields.update(overrides)
    return APStatus(**fields)


def test_registry():
    assert available_policies() == ["always-on", "dac-sm1", "dqn", "mappo"]
    assert needs_checkpoint("mappo:run/checkpoint.npz") and needs_checkpoint("dqn")
    assert not needs_checkpoint("dac-sm1")


def test_resolve_errors(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    with pytest.raises(ValueError):
        resolve_policy("sleepy", smoke_cfg, env)
    with pytest.raises(CheckpointError):
        resolve_policy("mappo", smoke_cfg, env)
    with pytest.raises(CheckpointError):
        resolve_policy("dqn:/nonexistent/checkpoint.npz", smoke_cfg, env)
    assert resolve_policy("always-on", smoke_cfg, env).name == "always-on"


def test_always_on_keeps_everything_active():
    action = always_on_policy(_status(antennas=np.array([8, 7, 0, 8])))
    assert action.sleep_choice.tolist() == [0, 0, 0, 0]
    assert action.antenna_delta.tolist() == [0, 1, 1, 0]


def test_dac_thresholds():
    action = dac_sm1_policy(_status(), DacParams())
    assert action.sleep_choice.tolist() == [1, 0, 0, 0], "only the idle AP sleeps"
    assert action.antenna_delta.tolist() == [0, -1, 0, 1], "ratios 60, 50 and 40 against band [45, 55]"


def test_dac_zero_demand_counts_as_overprovisioned():
    status = _status(associated=np.array([1, 1, 1, 1]), demand_rate=np.zeros(4), achieved_rate=np.zeros(4))
    action = dac_sm1_policy(status)
    assert action.antenna_delta.tolist() == [-1, -1, -1, -1]
    assert not action.sleep_choice.any()


def test_dac_never_uses_deep_sleep(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    policy = resolve_policy("dac-sm1", smoke_cfg, env)
    obs, _ = env.reset()
    for _ in range(30):
        action = policy(obs, env.ap_status())
        assert set(action.sleep_choice.tolist()) <= {0, 1}
        obs = env.step(action).observations
    assert not np.isin(env.control.sleep_modes, [2, 3]).any()


def test_always_on_stream_reproduces_baseline(smoke_cfg):
    cfg = smoke_cfg.model_copy(update={"episode_seconds": 0.4})
    baseline = run_episodes(resolve_policy("always-on", cfg, CellFreeEnv(cfg)), cfg, 1)

    def constant(obs, status):
        n = len(status.antennas)
        return JointAction(antenna_delta=np.zeros(n, dtype=int), sleep_choice=np.zeros(n, dtype=int))

    manual = run_episodes(constant, cfg, 1)
    pd.testing.assert_frame_equal(baseline.trace, manual.trace)
    assert baseline.summary.mean_p_net == manual.summary.mean_p_net


def test_replay_buffer_wraps(rng):
    buf = ReplayBuffer(5, obs_dim=2)
    for step in range(3):
        obs = np.full((2, 2), float(step))
        buf.push(obs, np.array([step, step]), float(step), obs + 1, False)
    assert len(buf) == 5
    assert buf.position == 1
    assert sorted(buf.rewards.tolist()) == [0.0, 1.0, 1.0, 2.0, 2.0]
    obs, actions, rewards, next_obs, dones = buf.sample(16, rng)
    assert obs.shape == (16, 2) and np.all(next_obs == obs + 1)


def test_epsilon_schedule():
    assert epsilon_at(0, 1.0, 0.05, 100) == 1.0
    assert epsilon_at(50, 1.0, 0.05, 100) == pytest.approx(0.525)
    assert epsilon_at(10_000, 1.0, 0.05, 100) == 0.05


def test_full_exploration_is_uniform(rng):
    q = np.tile(np.arange(NUM_JOINT_ACTIONS, dtype=float), (100_000, 1))
    freq = np.bincount(epsilon_greedy(q, 1.0, rng), minlength=NUM_JOINT_ACTIONS) / 100_000
    assert np.abs(freq - 1 / NUM_JOINT_ACTIONS).max() < 0.01
    assert np.all(epsilon_greedy(q[:10], 0.0, rng) == NUM_JOINT_ACTIONS - 1)


def test_td_loss_zero_on_zero_networks(rng):
    net = nn.Mlp((4, 8, NUM_JOINT_ACTIONS), rng=rng)
    net.set_params([np.zeros_like(p) for p in net.params()])
    batch = (rng.normal(size=(6, 4)), rng.integers(0, 12, 6), np.zeros(6), rng.normal(size=(6, 4)),
             np.zeros(6, dtype=bool))
    loss, grads = td_loss(net, net.copy(), batch, 0.99, 10.0)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_td_loss_gradient_matches_finite_differences(rng):
    q = nn.Mlp((3, 5, NUM_JOINT_ACTIONS), rng=rng)
    target = nn.Mlp((3, 5, NUM_JOINT_ACTIONS), rng=rng)
    batch = (rng.normal(size=(8, 3)), rng.integers(0, 12, 8), rng.normal(size=8), rng.normal(size=(8, 3)),
             np.array([False, True] * 4))
    _, grads = td_loss(q, target, batch, 0.9, 10.0)
    w = q.params()[0]
    h = 1e-6
    for idx in [(0, 0), (1, 3), (2, 4)]:
        old = w[idx]
        w[idx] = old + h
        up, _ = td_loss(q, target, batch, 0.9, 10.0)
        w[idx] = old - h
        down, _ = td_loss(q, target, batch, 0.9, 10.0)
        w[idx] = old
        assert grads[0][idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_target_sync_is_bit_exact(smoke_cfg, rng):
    agent = DqnAgent(smoke_cfg, obs_dim=12)
    for p in agent.q.params():
        p += rng.normal(size=p.shape)
    assert not np.array_equal(agent.q.params()[0], agent.target.params()[0])
    agent.sync_target()
    assert all(np.array_equal(a, b) for a, b in zip(agent.q.params(), agent.target.params()))
    agent.q.params()[0] += 1.0
    assert not np.array_equal(agent.q.params()[0], agent.target.params()[0]), "target must be a copy"


def test_dqn_training_and_evaluation(smoke_cfg, tmp_path):
    result = dqn_train(smoke_cfg, tmp_path, max_iterations=2)
    assert result.iterations == 2
    assert result.updates > 0
    curves = pd.read_csv(result.curves)
    assert list(curves.columns) == DQN_CURVE_COLUMNS and len(curves) == 2

    env = CellFreeEnv(smoke_cfg)
    policy = resolve_policy(f"dqn:{result.checkpoint}", smoke_cfg, env)
    assert policy.name == "dqn"
    obs, _ = env.reset()
    action = policy(obs, env.ap_status())
    assert action.to_indices().shape == (4,)
