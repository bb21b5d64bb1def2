"""MDP semantics: observations, action application, wake-up latency and reward."""

import numpy as np
import pandas as pd
import pytest

from cellfree_sleep.env import (
    NUM_JOINT_ACTIONS,
    CellFreeEnv,
    JointAction,
    reward,
    rs_score,
)
from cellfree_sleep.power import cloud_power, waking_ap_power
from cellfree_sleep.traffic import BINS_PER_DAY, TrafficProfile

from .conftest import with_updates


def _uniform(env: CellFreeEnv, delta: int = 0, sleep: int = 0) -> JointAction:
    n = env.num_agents
    return JointAction(antenna_delta=np.full(n, delta), sleep_choice=np.full(n, sleep))


def _silent(cfg) -> TrafficProfile:
    return TrafficProfile(density=np.zeros((3, BINS_PER_DAY)), delay_budgets=cfg.traffic.delay_budgets,
                          day_seconds=cfg.day_seconds)


def _warm(env: CellFreeEnv, steps: int = 5):
    for _ in range(steps):
        env.step(_uniform(env))


def _busy(cfg):
    return with_updates(cfg, traffic={"peak_density": 3000.0, "trough_density": 3000.0})


def test_rs_score_branches():
    assert rs_score(1.0, 5e-3) == 0.0
    assert rs_score(0.9, 5e-3) == pytest.approx(-0.1, abs=1e-12)
    assert rs_score(2.0, 5e-3) == pytest.approx(2.5e-3, rel=1e-12)
    assert rs_score(0.0, 5e-3) == -1.0
    assert np.allclose(rs_score(np.array([0.5, 4.0]), 0.1), [-0.5, 0.075])


def test_reward_edge_cases(smoke_cfg):
    rl = smoke_cfg.rl
    assert (rl.reward_w_rs, rl.reward_w_pc) == (60.0, 0.4)
    assert reward(np.zeros(0), 1000.0, rl) == pytest.approx(-0.4)
    assert reward(np.ones(5), 2500.0, rl) == pytest.approx(-0.4 * 2.5)


def test_reset_state(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    obs, state = env.reset()
    assert obs.shape == (4, env.obs_dim) and env.obs_dim == 8 + 2 * 2
    assert state.shape == (env.state_dim,) and env.state_dim == 4 + 2 * 4
    assert np.all(obs[:, 1] == 1.0) and np.all(obs[:, 2] == 0.0)
    assert np.all(obs[:, 4:8] == 0.0), "no UEs means no load features"
    assert len(env.sessions) == 0 and env.time_s == 0.0


def test_symmetric_aps_observe_alike(smoke_cfg):
    obs, _ = CellFreeEnv(smoke_cfg).reset()
    assert np.all(obs == obs[0])


def test_observation_width_is_fixed(smoke_cfg):
    busy = _busy(smoke_cfg)
    widths = set()
    for cfg in (smoke_cfg, busy):
        env = CellFreeEnv(cfg)
        widths.add(env.observe_all().shape)
        _warm(env, 3)
        obs = env.observe_all()
        widths.add(obs.shape)
        assert np.all(np.isfinite(obs)) and np.all(np.abs(obs) <= 1.0)
        assert np.all(np.abs(env.global_state()) <= 1.0)
    assert widths == {(4, 12)}


def test_observe_single_ap(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    _warm(env, 2)
    assert np.array_equal(env.observe(3), env.observe_all()[3])
    with pytest.raises(IndexError):
        env.observe(4)


def test_antenna_delta_clamps_and_counts(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    info = env.step(_uniform(env, delta=+1)).info
    assert info.antennas == (4, 4, 4, 4)
    assert info.clamps == 4
    for _ in range(5):
        info = env.step(_uniform(env, delta=-1)).info
    assert info.antennas == (0, 0, 0, 0)
    assert info.clamps == 4 + 4


def test_deepening_sleep_is_immediate(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    env.step(_uniform(env, sleep=3))
    assert np.all(env.control.sleep_modes == 3) and not env.control.waking.any()
    assert np.allclose(env.breakdown.per_ap, 0.23 * waking_ap_power(4, smoke_cfg.power))
    assert not env.clusters.serving.any()


def test_wake_latency_charged_on_exit(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    env.apply_actions(_uniform(env, sleep=3))
    env.apply_actions(_uniform(env, sleep=0))
    assert env.control.wake_steps.tolist() == [5, 5, 5, 5]
    for _ in range(4):
        env._tick()
        assert env.control.waking.all()
        assert not env.clusters.serving.any(), "waking APs serve nobody"
    env._tick()
    assert not env.control.waking.any()


def test_exited_mode_sets_latency(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    env.apply_actions(JointAction(antenna_delta=np.zeros(4, dtype=int), sleep_choice=np.array([1, 2, 3, 3])))
    env.apply_actions(JointAction(antenna_delta=np.zeros(4, dtype=int), sleep_choice=np.array([0, 0, 1, 3])))
    assert env.control.wake_steps.tolist() == [1, 1, 5, 0]
    assert env.control.sleep_modes.tolist() == [0, 0, 1, 3]


def test_all_sleep_on_silent_network_settles_at_floor(smoke_cfg):
    env = CellFreeEnv(smoke_cfg, profile=_silent(smoke_cfg))
    result = env.step(_uniform(env, sleep=3))
    floor = 4 * 0.23 * waking_ap_power(4, smoke_cfg.power) + cloud_power(0.0, smoke_cfg.power)
    assert result.info.p_net == pytest.approx(floor, rel=1e-12)
    assert result.reward == pytest.approx(-0.4 * floor / 1000.0 * smoke_cfg.decision_period, rel=1e-12)
    assert result.info.num_ues == 0


def test_reward_decomposition_is_exact(smoke_cfg):
    env = CellFreeEnv(_busy(smoke_cfg))
    _warm(env, 10)
    assert len(env.rho) > 0
    rl = smoke_cfg.rl
    xi = float(np.mean(rs_score(env.rho, rl.reward_phi)))
    expected = rl.reward_w_rs * xi - rl.reward_w_pc * env.breakdown.total / rl.power_unit_w
    assert env.current_reward() == expected


def test_identical_seeds_give_identical_trajectories(smoke_cfg, rng):
    actions = rng.integers(0, NUM_JOINT_ACTIONS, size=(15, 4))
    runs = []
    for _ in range(2):
        env = CellFreeEnv(smoke_cfg)
        rewards, states = [], []
        for a in actions:
            out = env.step(JointAction.from_indices(a))
            rewards.append(out.reward)
            states.append(out.global_state)
        runs.append((rewards, np.array(states), env.sessions.ids.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])
    assert np.array_equal(runs[0][2], runs[1][2])


def test_arrivals_do_not_depend_on_actions(smoke_cfg):
    on = CellFreeEnv(smoke_cfg)
    off = CellFreeEnv(smoke_cfg)
    for _ in range(5):
        on.step(_uniform(on))
        off.step(_uniform(off, sleep=3))
    assert on.sessions._next_id == off.sessions._next_id


def test_return_is_affine_in_power_weight(smoke_cfg):
    totals = {}
    for w_pc in (0.0, 0.4):
        env = CellFreeEnv(with_updates(smoke_cfg, rl={"reward_w_pc": w_pc}))
        ret = energy = 0.0
        for _ in range(10):
            out = env.step(_uniform(env))
            ret += out.reward
            energy += out.info.energy_w_steps
        totals[w_pc] = (ret, energy)
    (r0, e0), (r4, e4) = totals[0.0], totals[0.4]
    assert e0 == e4
    assert r4 == pytest.approx(r0 - 0.4 * e0 / 1000.0, rel=1e-9)


def test_step_info_and_episode_end(smoke_cfg):
    cfg = with_updates(smoke_cfg, episode_seconds=0.05)
    env = CellFreeEnv(cfg, profile=_silent(cfg))
    ticks = []
    done = False
    while not done:
        out = env.step(_uniform(env, sleep=1))
        ticks.append(out.info.timesteps)
        assert sum(out.info.mode_counts) == 4
        done = out.done
    assert ticks == [20, 20, 10]
    assert env.step_count == cfg.episode_steps


def test_offered_load_follows_profile(smoke_cfg):
    env = CellFreeEnv(smoke_cfg)
    assert env.offered_load() == pytest.approx(150.0)
    assert env.total_arrival_rate() == pytest.approx(0.1)
    info = env.step(_uniform(env)).info
    assert info.offered_load == pytest.approx(150.0)


def test_joint_action_indices():
    action = JointAction.from_indices(np.array([0, 5, 11]))
    assert action.antenna_delta.tolist() == [-1, 0, 1]
    assert action.sleep_choice.tolist() == [0, 1, 3]
    assert action.to_indices().tolist() == [0, 5, 11]


def test_channel_tables_dump(smoke_cfg, tmp_path):
    env = CellFreeEnv(_busy(smoke_cfg))
    _warm(env, 5)
    beta_path, chi_path = env.dump_channel_tables(tmp_path)
    beta = pd.read_csv(beta_path, index_col="ap")
    chi = pd.read_csv(chi_path, index_col="ap")
    assert beta.shape == (4, len(env.sessions))
    assert (chi.to_numpy() <= beta.to_numpy()).all()
